"""Central finite-difference checks for every differentiable stage."""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import InvalidArgument
from . import layers


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.shape[0]):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check(loss_and_grads: Callable[[], tuple[float, dict]], tensors: dict[str, np.ndarray],
          eps: float = 1e-5) -> dict[str, float]:
    """Compare analytic grads against central differences for each named tensor.

    ``loss_and_grads`` must read the arrays in ``tensors`` by reference.
    """
    _, analytic = loss_and_grads()
    analytic = {k: np.array(v, copy=True) for k, v in analytic.items()}
    out = {}
    for name, arr in tensors.items():
        num = numeric_grad(lambda: loss_and_grads()[0], arr, eps)
        out[name] = relative_error(analytic[name], num)
    return out


def _probe(rng, shape):
    return rng.standard_normal(shape)


def _check_attentive(rng, eps, k=3, dim=4, hidden=5):
    t = {"h": _probe(rng, (k, dim)), "w": _probe(rng, (dim, hidden)) * 0.5,
         "b": _probe(rng, hidden) * 0.1, "u": _probe(rng, hidden)}
    probe = _probe(rng, dim)

    def run():
        v, cache = layers.attentive_pool_forward(t["h"], t["w"], t["b"], t["u"])
        dh, g = layers.attentive_pool_backward(probe, cache)
        return float(probe @ v), {"h": dh, **g}
    return check(run, t, eps)


def _check_projection(rng, eps, n=3, dim=6, hidden=5, out=4):
    t = {"v": _probe(rng, (n, dim)), "w1": _probe(rng, (dim, hidden)),
         "b1": _probe(rng, hidden) * 0.1, "w2": _probe(rng, (hidden, out)),
         "b2": _probe(rng, out) * 0.1}
    probe = _probe(rng, (n, out))

    def run():
        y, cache = layers.projection_forward(t["v"], t["w1"], t["b1"], t["w2"], t["b2"])
        dv, g = layers.projection_backward(probe, cache)
        return float(np.sum(probe * y)), {"v": dv, **g}
    return check(run, t, eps)


def _check_lstm(rng, eps, steps=3, dim=2, hidden=3, n=2):
    t = {"x": _probe(rng, (n, steps, dim)),
         "w_x": _probe(rng, (2, dim, 4 * hidden)) * 0.5,
         "w_h": _probe(rng, (2, hidden, 4 * hidden)) * 0.5,
         "b": _probe(rng, (2, 4 * hidden)) * 0.1}
    lengths = [steps, max(1, steps - 1)]
    probe = _probe(rng, (n, steps, 2 * hidden))
    for i, length in enumerate(lengths):
        probe[i, length:] = 0.0

    def run():
        y, cache = layers.bilstm_layer_forward(t["x"], lengths,
                                               {"w_x": t["w_x"], "w_h": t["w_h"], "b": t["b"]})
        dx, g = layers.bilstm_layer_backward(probe, cache)
        return float(np.sum(probe * y)), {"x": dx, **g}
    return check(run, t, eps)


def _check_multiscale(rng, eps, steps=7, dim=3):
    t = {"h": _probe(rng, (steps, dim))}
    windows, stride = (2, 3, 9), 2
    out_rows = layers.multiscale_pool_forward(t["h"], windows, stride)[0].shape[0]
    probe = _probe(rng, (out_rows, dim))

    def run():
        y, cache = layers.multiscale_pool_forward(t["h"], windows, stride)
        return float(np.sum(probe * y)), {"h": layers.multiscale_pool_backward(probe, cache)}
    return check(run, t, eps)


def _check_info_nce(rng, eps, anchors=4, positives=2, negatives=2, dim=5):
    from ..losses import info_nce_loss, normalize_rows
    t = {"a": normalize_rows(_probe(rng, (anchors, dim))),
         "p": normalize_rows(_probe(rng, (anchors, positives, dim))),
         "n": normalize_rows(_probe(rng, (anchors, negatives, dim)))}

    def run():
        loss, (ga, gp, gn) = info_nce_loss(t["a"], t["p"], t["n"], 0.5, check_normalized=False)
        return loss, {"a": ga, "p": gp, "n": gn}
    return check(run, t, eps)


def _check_triplet(rng, eps, dim=5):
    from ..losses import triplet_loss
    while True:
        t = {"a": _probe(rng, dim), "p": _probe(rng, dim), "n": _probe(rng, dim)}
        t = {k: v / np.linalg.norm(v) for k, v in t.items()}
        cos = lambda x, y: x @ y / (np.linalg.norm(x) * np.linalg.norm(y))
        margin_gap = (1 - cos(t["a"], t["p"])) - (1 - cos(t["a"], t["n"])) + 0.5
        if margin_gap > 0.05:
            break

    def run():
        loss, (ga, gp, gn) = triplet_loss(t["a"], t["p"], t["n"], 0.5)
        return loss, {"a": ga, "p": gp, "n": gn}
    return check(run, t, eps)


_OPS = {
    "attentive_pool": _check_attentive,
    "projection": _check_projection,
    "bilstm": _check_lstm,
    "multiscale_pool": _check_multiscale,
    "info_nce": _check_info_nce,
    "triplet": _check_triplet,
}

OP_NAMES = tuple(_OPS)


def gradient_check(op_name: str, seed: int = 0, eps: float = 1e-5, **sizes) -> float:
    """Max relative error between analytic and finite-difference gradients of a
    small random instance of ``op_name``, over every weight and input entry."""
    try:
        fn = _OPS[op_name]
    except KeyError:
        raise InvalidArgument(f"unknown op {op_name!r}; choose from {sorted(_OPS)}") from None
    errors = fn(np.random.default_rng(seed), eps, **sizes)
    return max(errors.values())


def gradient_report(op_name: str, seed: int = 0, eps: float = 1e-5, **sizes) -> dict[str, float]:
    return _OPS[op_name](np.random.default_rng(seed), eps, **sizes)
