"""Forward and reverse-mode passes for the fingerprint network's building blocks.

Every ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
takes the cache and the upstream gradient and returns input gradients plus a
dict of parameter gradients. Arrays are float64 throughout.
"""

from __future__ import annotations

import numpy as np


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------

def _gate_affine(hidden):
    """Per-gate (scale, offset) turning one tanh into sigmoid/tanh gates:
    sigmoid(a) = 0.5 * tanh(0.5 a) + 0.5."""
    scale = np.full(4 * hidden, 0.5)
    scale[2 * hidden:3 * hidden] = 1.0
    offset = np.full(4 * hidden, 0.5)
    offset[2 * hidden:3 * hidden] = 0.0
    return scale, offset


def lstm_forward(x, w_x, w_h, b):
    """Run a stack of independent LSTMs in lockstep.

    x: (..., N, T, D) inputs, w_x: (..., D, 4H), w_h: (..., H, 4H), b: (..., 4H).
    Leading axes of ``x`` and the weights broadcast, which lets the forward and
    backward directions of a BiLSTM share one time loop. Gate order is
    input, forget, cell, output. Initial states are zero.
    """
    hidden = w_h.shape[-2]
    lead = x.shape[:-2]
    steps = x.shape[-2]
    pre_x = x @ w_x[..., None, :, :] + b[..., None, None, :]
    scale, offset = _gate_affine(hidden)
    gates = np.empty(lead + (steps, 4 * hidden))
    cells = np.empty(lead + (steps, hidden))
    tanh_c = np.empty_like(cells)
    out = np.empty_like(cells)
    h = np.zeros(lead + (hidden,))
    c = np.zeros_like(h)
    i_, f_, g_, o_ = (slice(k * hidden, (k + 1) * hidden) for k in range(4))
    for t in range(steps):
        a = pre_x[..., t, :] + h @ w_h
        g = np.tanh(a * scale)
        g *= scale
        g += offset
        c = g[..., f_] * c + g[..., i_] * g[..., g_]
        tc = np.tanh(c)
        h = g[..., o_] * tc
        gates[..., t, :] = g
        cells[..., t, :] = c
        tanh_c[..., t, :] = tc
        out[..., t, :] = h
    return out, (x, w_x, w_h, gates, cells, tanh_c, out)


def lstm_backward(d_out, cache):
    x, w_x, w_h, gates, cells, tanh_c, out = cache
    hidden = w_h.shape[-2]
    steps = x.shape[-2]
    i_, f_, g_, o_ = (slice(k * hidden, (k + 1) * hidden) for k in range(4))
    # local derivative of each gate w.r.t. its pre-activation
    slope = gates * (1.0 - gates)
    slope[..., g_] = 1.0 - gates[..., g_] ** 2
    d_pre = np.empty_like(gates)
    dh_next = np.zeros(out.shape[:-2] + (hidden,))
    dc_next = np.zeros_like(dh_next)
    zeros = np.zeros_like(dh_next)
    w_h_t = np.swapaxes(w_h, -1, -2)
    for t in range(steps - 1, -1, -1):
        g = gates[..., t, :]
        tc = tanh_c[..., t, :]
        c_prev = cells[..., t - 1, :] if t > 0 else zeros
        dh = d_out[..., t, :] + dh_next
        dc = dc_next + dh * g[..., o_] * (1.0 - tc * tc)
        da = d_pre[..., t, :]
        da[..., i_] = dc * g[..., g_]
        da[..., f_] = dc * c_prev
        da[..., g_] = dc * g[..., i_]
        da[..., o_] = dh * tc
        da *= slope[..., t, :]
        dh_next = da @ w_h_t
        dc_next = dc * g[..., f_]
    lead = x.shape[:-3]
    h_prev = np.concatenate([np.zeros(out.shape[:-2] + (1, hidden)), out[..., :-1, :]], axis=-2)
    flat_h = h_prev.reshape(lead + (-1, hidden))
    flat_d = d_pre.reshape(lead + (-1, 4 * hidden))
    dw_h = np.swapaxes(flat_h, -1, -2) @ flat_d
    dw_x = np.swapaxes(x.reshape(lead + (-1, x.shape[-1])), -1, -2) @ flat_d
    dx = d_pre @ np.swapaxes(w_x, -1, -2)[..., None, :, :]
    db = flat_d.sum(axis=-2)
    return dx, {"w_x": dw_x, "w_h": dw_h, "b": db}


def reverse_within_length(x, lengths):
    """Time-reverse each sequence's valid prefix; padding stays at the end.

    The mapping is its own inverse.
    """
    n, t = x.shape[0], x.shape[1]
    idx = np.tile(np.arange(t), (n, 1))
    for row, length in enumerate(lengths):
        idx[row, :length] = np.arange(length - 1, -1, -1)
    return np.take_along_axis(x, idx[:, :, None], axis=1)


def bilstm_layer_forward(x, lengths, params):
    """One bidirectional layer. ``params`` holds stacked (2, ...) weights,
    index 0 forward and index 1 backward. Returns (N, T, 2H)."""
    both = np.stack([x, reverse_within_length(x, lengths)])
    out, cache = lstm_forward(both, params["w_x"], params["w_h"], params["b"])
    y = np.concatenate([out[0], reverse_within_length(out[1], lengths)], axis=-1)
    return y, (cache, lengths)


def bilstm_layer_backward(dy, cache):
    lstm_cache, lengths = cache
    hidden = dy.shape[-1] // 2
    d_both = np.stack([dy[..., :hidden], reverse_within_length(dy[..., hidden:], lengths)])
    dx_both, grads = lstm_backward(d_both, lstm_cache)
    dx = dx_both[0] + reverse_within_length(dx_both[1], lengths)
    return dx, grads


# ---------------------------------------------------------------------------
# Multiscale average pooling
# ---------------------------------------------------------------------------

def pool_counts(steps: int, windows, stride: int) -> list[int]:
    return [max(0, (steps - w) // stride + 1) if steps >= w else 0 for w in windows]


def multiscale_pool_forward(h, windows, stride: int):
    """Average ``h`` (T, D) over sliding windows of each size, concatenated
    in window order. Sequences shorter than the largest window are first
    padded by repeating their last frame."""
    steps = h.shape[0]
    target = max(windows)
    if steps < target:
        h = np.concatenate([h, np.repeat(h[-1:], target - steps, axis=0)], axis=0)
    csum = np.concatenate([np.zeros((1, h.shape[1])), np.cumsum(h, axis=0)], axis=0)
    pieces = []
    for w in windows:
        count = (h.shape[0] - w) // stride + 1
        starts = np.arange(count) * stride
        pieces.append((csum[starts + w] - csum[starts]) / w)
    return np.concatenate(pieces, axis=0), (steps, h.shape[0], tuple(windows), stride)


def multiscale_pool_backward(dpooled, cache):
    steps, padded, windows, stride = cache
    diff = np.zeros((padded + 1, dpooled.shape[1]))
    row = 0
    for w in windows:
        count = (padded - w) // stride + 1
        starts = np.arange(count) * stride
        g = dpooled[row:row + count] / w
        np.add.at(diff, starts, g)
        np.add.at(diff, starts + w, -g)
        row += count
    dh = np.cumsum(diff, axis=0)[:padded]
    if padded > steps:
        dh[steps - 1] += dh[steps:].sum(axis=0)
        dh = dh[:steps]
    return dh


# ---------------------------------------------------------------------------
# Attentive pooling
# ---------------------------------------------------------------------------

def attentive_pool_forward(h, w, b, u):
    """Softmax-weighted sum of rows of ``h`` (K, D) scored by u . tanh(h W + b)."""
    s = np.tanh(h @ w + b)
    scores = s @ u
    scores = scores - scores.max()
    e = np.exp(scores)
    weights = e / e.sum()
    return weights @ h, (h, w, u, s, weights)


def attentive_pool_backward(dv, cache):
    h, w, u, s, weights = cache
    dweights = h @ dv
    dscores = weights * (dweights - weights @ dweights)
    ds = np.outer(dscores, u)
    dz = ds * (1.0 - s * s)
    dh = np.outer(weights, dv) + dz @ w.T
    return dh, {"w": h.T @ dz, "b": dz.sum(axis=0), "u": s.T @ dscores}


def average_pool_forward(h):
    return h.mean(axis=0), h.shape[0]


def average_pool_backward(dv, cache):
    return np.repeat(dv[None, :] / cache, cache, axis=0)


# ---------------------------------------------------------------------------
# Projection head: linear -> ReLU -> linear -> L2 normalize -> tanh
# ---------------------------------------------------------------------------

def projection_forward(v, w1, b1, w2, b2):
    z1 = v @ w1 + b1
    r = np.maximum(z1, 0.0)
    u = r @ w2 + b2
    norm = np.sqrt(np.sum(u * u, axis=-1, keepdims=True))
    norm = np.maximum(norm, 1e-12)
    n = u / norm
    out = np.tanh(n)
    return out, (v, w1, w2, z1, r, n, norm, out)


def projection_backward(dout, cache):
    v, w1, w2, z1, r, n, norm, out = cache
    dn = dout * (1.0 - out * out)
    du = (dn - n * np.sum(n * dn, axis=-1, keepdims=True)) / norm
    dr = du @ w2.T
    dz1 = dr * (z1 > 0)
    dv = dz1 @ w1.T
    grads = {
        "w1": np.swapaxes(v, -1, -2) @ dz1 if v.ndim > 1 else np.outer(v, dz1),
        "b1": dz1.sum(axis=0) if dz1.ndim > 1 else dz1,
        "w2": np.swapaxes(r, -1, -2) @ du if r.ndim > 1 else np.outer(r, du),
        "b2": du.sum(axis=0) if du.ndim > 1 else du,
    }
    return dv, grads


# ---------------------------------------------------------------------------
# Dropout
# ---------------------------------------------------------------------------

def dropout_mask(rng: np.random.Generator, shape, rate: float):
    if rate <= 0.0:
        return None
    keep = 1.0 - rate
    return (rng.random(shape) < keep) / keep
