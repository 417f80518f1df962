"""Fingerprint network: BiLSTM -> multiscale pooling -> attentive pooling ->
projection -> tanh, and the binarizer that turns its output into bits."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import EmptyInput, InvalidArgument, ShapeError
from . import layers


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 39
    lstm_hidden: int = 64
    lstm_layers: int = 2
    lstm_dropout: float = 0.25
    pool_windows: tuple = (20, 50, 100)
    pool_stride: int = 10
    attention_hidden: int = 64
    embed_dropout: float = 0.2
    proj_hidden: int = 64
    fingerprint_bits: int = 256
    multiscale: bool = True
    pooling: str = "attentive"
    segments: int = 16

    def __post_init__(self):
        object.__setattr__(self, "pool_windows", tuple(int(w) for w in self.pool_windows))
        if list(self.pool_windows) != sorted(self.pool_windows):
            raise InvalidArgument("pool windows must be sorted ascending")
        if self.fingerprint_bits % self.segments:
            raise InvalidArgument("fingerprint_bits must be divisible by the segment count")
        if self.pooling not in ("attentive", "average"):
            raise InvalidArgument(f"unknown pooling {self.pooling!r}")

    @property
    def hidden_dim(self) -> int:
        return 2 * self.lstm_hidden

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pool_windows"] = list(self.pool_windows)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def reference_scale(cls, input_dim: int = 768) -> "ModelConfig":
        return cls(input_dim=input_dim, lstm_hidden=256, attention_hidden=256, proj_hidden=512)


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    hid = config.lstm_hidden
    bound = 1.0 / np.sqrt(hid)
    d_in = config.input_dim
    for layer in range(config.lstm_layers):
        p = f"lstm{layer}."
        params[p + "w_x"] = rng.uniform(-bound, bound, (2, d_in, 4 * hid))
        params[p + "w_h"] = rng.uniform(-bound, bound, (2, hid, 4 * hid))
        b = np.zeros((2, 4 * hid))
        b[:, hid:2 * hid] = 1.0
        params[p + "b"] = b
        d_in = 2 * hid
    dh = config.hidden_dim
    if config.pooling == "attentive":
        a = config.attention_hidden
        params["attn.w"] = rng.uniform(-1, 1, (dh, a)) / np.sqrt(dh)
        params["attn.b"] = np.zeros(a)
        params["attn.u"] = rng.uniform(-1, 1, a) / np.sqrt(a)
    params["proj.w1"] = rng.uniform(-1, 1, (dh, config.proj_hidden)) * np.sqrt(3.0 / dh)
    params["proj.b1"] = np.zeros(config.proj_hidden)
    params["proj.w2"] = rng.uniform(-1, 1, (config.proj_hidden, config.fingerprint_bits)) * \
        np.sqrt(3.0 / config.proj_hidden)
    params["proj.b2"] = np.zeros(config.fingerprint_bits)
    return params


def _pad_batch(feats: list[np.ndarray]) -> tuple[np.ndarray, list[int]]:
    lengths = [f.shape[0] for f in feats]
    out = np.zeros((len(feats), max(lengths), feats[0].shape[1]))
    for i, f in enumerate(feats):
        out[i, :f.shape[0]] = f
    return out, lengths


@dataclass
class ForwardCache:
    lengths: list
    layer_caches: list = field(default_factory=list)
    pool_caches: list = field(default_factory=list)
    att_caches: list = field(default_factory=list)
    embed_mask: np.ndarray | None = None
    proj_cache: tuple | None = None
    input_shape: tuple = ()


def bilstm_forward(x, lengths, params, config: ModelConfig, train: bool = False,
                   rng: np.random.Generator | None = None):
    """Stacked BiLSTM over a padded batch (N, T, D). Returns (N, T, 2H)."""
    if x.shape[1] == 0 or min(lengths) == 0:
        raise EmptyInput("BiLSTM needs at least one frame per sequence")
    if x.shape[2] != config.input_dim:
        raise ShapeError(f"feature dim {x.shape[2]} != model input dim {config.input_dim}")
    caches, masks = [], []
    h = x
    for layer in range(config.lstm_layers):
        if layer > 0 and train and config.lstm_dropout > 0:
            mask = layers.dropout_mask(rng, h.shape, config.lstm_dropout)
            h = h * mask
        else:
            mask = None
        p = {k: params[f"lstm{layer}.{k}"] for k in ("w_x", "w_h", "b")}
        h, cache = layers.bilstm_layer_forward(h, lengths, p)
        caches.append(cache)
        masks.append(mask)
    return h, (caches, masks)


def bilstm_backward(dh, cache, config: ModelConfig):
    caches, masks = cache
    grads = {}
    for layer in range(config.lstm_layers - 1, -1, -1):
        dh, g = layers.bilstm_layer_backward(dh, caches[layer])
        for k, v in g.items():
            grads[f"lstm{layer}.{k}"] = v
        if masks[layer] is not None:
            dh = dh * masks[layer]
    return dh, grads


def forward(features: list[np.ndarray], params, config: ModelConfig, train: bool = False,
            rng: np.random.Generator | None = None):
    """Run a batch of (T_i, d_z) feature matrices through the network.

    Returns the tanh outputs (N, d) and a cache for :func:`backward`.
    """
    if not features:
        raise EmptyInput("empty batch")
    if train and rng is None:
        raise InvalidArgument("train mode needs an rng for dropout")
    x, lengths = _pad_batch(features)
    cache = ForwardCache(lengths=lengths, input_shape=x.shape)
    hidden, lstm_cache = bilstm_forward(x, lengths, params, config, train, rng)
    cache.layer_caches = lstm_cache

    pooled = []
    for i, length in enumerate(lengths):
        h = hidden[i, :length]
        if config.multiscale:
            h, pc = layers.multiscale_pool_forward(h, config.pool_windows, config.pool_stride)
        else:
            pc = None
        cache.pool_caches.append(pc)
        if config.pooling == "attentive":
            v, ac = layers.attentive_pool_forward(h, params["attn.w"], params["attn.b"],
                                                  params["attn.u"])
        else:
            v, ac = layers.average_pool_forward(h)
        cache.att_caches.append(ac)
        pooled.append(v)
    utter = np.stack(pooled)
    if train and config.embed_dropout > 0:
        cache.embed_mask = layers.dropout_mask(rng, utter.shape, config.embed_dropout)
        utter = utter * cache.embed_mask
    out, cache.proj_cache = layers.projection_forward(
        utter, params["proj.w1"], params["proj.b1"], params["proj.w2"], params["proj.b2"])
    return out, cache


def backward(dout, cache: ForwardCache, params, config: ModelConfig) -> dict[str, np.ndarray]:
    """Gradients of all parameters given dLoss/d(tanh output)."""
    grads = {}
    dutter, g = layers.projection_backward(dout, cache.proj_cache)
    grads.update({f"proj.{k}": v for k, v in g.items()})
    if cache.embed_mask is not None:
        dutter = dutter * cache.embed_mask
    dhidden = np.zeros(cache.input_shape[:2] + (config.hidden_dim,))
    if config.pooling == "attentive":
        for k in ("w", "b", "u"):
            grads[f"attn.{k}"] = np.zeros_like(params[f"attn.{k}"])
    for i, length in enumerate(cache.lengths):
        if config.pooling == "attentive":
            dh, g = layers.attentive_pool_backward(dutter[i], cache.att_caches[i])
            for k, v in g.items():
                grads[f"attn.{k}"] += v
        else:
            dh = layers.average_pool_backward(dutter[i], cache.att_caches[i])
        if config.multiscale:
            dh = layers.multiscale_pool_backward(dh, cache.pool_caches[i])
        dhidden[i, :length] = dh
    _, g = bilstm_backward(dhidden, cache.layer_caches, config)
    grads.update(g)
    return grads


def binarize(v) -> np.ndarray:
    """Sign with the tie rule sign(0) = +1. Returns int8 values in {-1, +1}."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise InvalidArgument("cannot binarize non-finite values")
    return np.where(v >= 0, 1, -1).astype(np.int8)


def pack_bits(bits) -> bytes:
    """MSB-first packing; coordinate 0 is the first (most significant) bit."""
    b = np.asarray(bits)
    return np.packbits((b > 0).astype(np.uint8), bitorder="big").tobytes()


def unpack_bits(data: bytes, n_bits: int) -> np.ndarray:
    raw = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="big")[:n_bits]
    if raw.shape[0] != n_bits:
        raise InvalidArgument(f"need {n_bits} bits, got {raw.shape[0]}")
    return np.where(raw == 1, 1, -1).astype(np.int8)


def bits_to_hex(bits) -> str:
    return pack_bits(bits).hex()


def hex_to_bits(text: str, n_bits: int | None = None) -> np.ndarray:
    data = bytes.fromhex(text)
    return unpack_bits(data, n_bits if n_bits is not None else 8 * len(data))

