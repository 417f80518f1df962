"""Contrastive objectives with analytic gradients."""

from __future__ import annotations

import numpy as np

from .errors import InvalidArgument


def normalize_rows(x, eps: float = 1e-12):
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), eps)


def normalize_rows_backward(dy, x, eps: float = 1e-12):
    norm = np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), eps)
    y = x / norm
    return (dy - y * np.sum(y * dy, axis=-1, keepdims=True)) / norm


def _check_unit(x, name):
    norms = np.linalg.norm(x, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise InvalidArgument(f"{name} embeddings must be L2-normalized")


def info_nce_loss(anchors, positives, negatives, tau: float = 0.05, check_normalized: bool = True):
    """InfoNCE over a batch of anchors with P benign and M tampered variants each.

    For anchor i the denominator runs over every embedding in the batch except
    the anchor itself: its own variants plus all other anchors and their
    variants. The numerator averages over the anchor's P benign variants.

    anchors: (B, D); positives: (B, P, D); negatives: (B, M, D), M may be 0.
    Returns ``(loss, (d_anchors, d_positives, d_negatives))``.
    """
    if tau <= 0:
        raise InvalidArgument("temperature must be positive")
    a = np.asarray(anchors, dtype=np.float64)
    p = np.asarray(positives, dtype=np.float64)
    n = np.asarray(negatives, dtype=np.float64)
    b, d = a.shape
    n_pos = p.shape[1]
    if n.size == 0:
        n = np.zeros((b, 0, d))
    n_neg = n.shape[1]
    if n_pos < 1:
        raise InvalidArgument("need at least one benign variant per anchor")
    if check_normalized:
        _check_unit(a, "anchor")
        _check_unit(p, "benign")
        if n_neg:
            _check_unit(n, "tampered")

    everything = np.concatenate([a, p.reshape(b * n_pos, d), n.reshape(b * n_neg, d)], axis=0)
    logits = a @ everything.T / tau
    logits[np.arange(b), np.arange(b)] = -np.inf
    top = logits.max(axis=1, keepdims=True)
    expd = np.exp(logits - top)
    denom = expd.sum(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(denom[:, 0])
    pos_cols = b + np.arange(b)[:, None] * n_pos + np.arange(n_pos)[None, :]
    pos_logits = np.take_along_axis(logits, pos_cols, axis=1)
    loss = float(np.mean(lse - pos_logits.mean(axis=1)))

    g = expd / denom
    np.put_along_axis(g, pos_cols, np.take_along_axis(g, pos_cols, axis=1) - 1.0 / n_pos, axis=1)
    g /= b
    d_a = g @ everything / tau
    d_all = g.T @ a / tau
    d_a += d_all[:b]
    d_p = d_all[b:b + b * n_pos].reshape(b, n_pos, d)
    d_n = d_all[b + b * n_pos:].reshape(b, n_neg, d)
    return loss, (d_a, d_p, d_n)


def _cosine_and_grads(x, y):
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    c = float(x @ y / (nx * ny))
    return c, y / (nx * ny) - c * x / nx ** 2, x / (nx * ny) - c * y / ny ** 2


def triplet_loss(anchor, positive, negative, margin: float = 0.5):
    """max(0, d(a, p) - d(a, n) + margin) with cosine distance d = 1 - cos."""
    a, p, n = (np.asarray(v, dtype=np.float64) for v in (anchor, positive, negative))
    cap, ga_p, gp = _cosine_and_grads(a, p)
    can, ga_n, gn = _cosine_and_grads(a, n)
    value = (1.0 - cap) - (1.0 - can) + margin
    if value <= 0:
        z = np.zeros_like(a)
        return 0.0, (z, z.copy(), z.copy())
    return float(value), (-ga_p + ga_n, -gp, gn)


def triplet_batch_loss(anchors, positives, negatives, margin: float = 0.5):
    """Triplets pair every benign with every tampered variant of the same
    anchor; summed per anchor and averaged over anchors."""
    a = np.asarray(anchors, dtype=np.float64)
    p = np.asarray(positives, dtype=np.float64)
    n = np.asarray(negatives, dtype=np.float64)
    b = a.shape[0]
    total = 0.0
    d_a, d_p, d_n = np.zeros_like(a), np.zeros_like(p), np.zeros_like(n)
    for i in range(b):
        for j in range(p.shape[1]):
            for k in range(n.shape[1]):
                value, (ga, gp, gn) = triplet_loss(a[i], p[i, j], n[i, k], margin)
                total += value
                d_a[i] += ga
                d_p[i, j] += gp
                d_n[i, k] += gn
    return total / b, (d_a / b, d_p / b, d_n / b)
