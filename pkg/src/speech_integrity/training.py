"""Contrastive training of the fingerprint network."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .audio import Waveform
from .checkpoint import ModelCheckpoint
from .corpus import Corpus
from .errors import CorpusTooSmall, InvalidArgument, TrainingDiverged
from .features import MfccConfig, encode
from .losses import info_nce_loss, normalize_rows, normalize_rows_backward, triplet_batch_loss
from .model.network import ModelConfig, backward, binarize, forward, init_params
from .ops import (RESAMPLE_TARGETS, BenignKind, BenignOp, Level, MaliciousKind, MaliciousOp,
                  apply_benign, apply_malicious)
from .watermark import WatermarkConfig, embed

log = logging.getLogger(__name__)

TRAIN_MALICIOUS = (MaliciousKind.DELETION, MaliciousKind.SPLICING, MaliciousKind.SUBSTITUTION,
                   MaliciousKind.SILENCING, MaliciousKind.REORDERING,
                   MaliciousKind.VOICE_CONVERSION, MaliciousKind.TTS_PROXY)


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 8
    positives: int = 2
    negatives: int | None = None
    tau: float = 0.05
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    epochs: int = 50
    seed: int = 0
    loss: str = "infonce"
    margin: float = 0.5
    optimizer: str = "sgd"
    momentum: float = 0.0
    grad_clip: float | None = 5.0
    watermark_augment: bool = True
    augment_cycle: int = 0
    dev_size: int = 8

    def __post_init__(self):
        if self.batch_size < 2:
            raise InvalidArgument("batch_size must be >= 2 (other anchors are the negatives)")
        if self.positives < 1:
            raise InvalidArgument("need at least one benign variant per anchor")
        if self.tau <= 0:
            raise InvalidArgument("temperature must be positive")
        if self.loss not in ("infonce", "triplet"):
            raise InvalidArgument(f"unknown loss {self.loss!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise InvalidArgument(f"unknown optimizer {self.optimizer!r}")
        if self.negatives is not None and self.negatives < 0:
            raise InvalidArgument("negatives must be >= 0")

    @property
    def n_negatives(self) -> int:
        return self.positives if self.negatives is None else self.negatives

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        return cls(**d)


def lr_at(step: int, total_steps: int, lr_max: float = 1e-3, lr_min: float = 1e-5) -> float:
    """Cosine annealing from lr_max at step 0 to lr_min at total_steps."""
    if total_steps <= 0:
        return lr_max
    if not 0 <= step <= total_steps:
        raise InvalidArgument("step must lie in [0, total_steps]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------------------
# Variants and batches
# ---------------------------------------------------------------------------

class Variant:
    """A lazily generated variant; ``provenance`` fully determines it."""

    def __init__(self, make, provenance: dict):
        self._make = make
        self._waveform = None
        self.provenance = provenance

    @property
    def waveform(self) -> Waveform:
        if self._waveform is None:
            self._waveform = self._make()
        return self._waveform


@dataclass(eq=False)
class ContrastiveBatch:
    anchor_indices: list
    anchors: list
    benign_variants: list
    malicious_variants: list
    epoch: int = 0
    batch_index: int = 0

    def provenance(self) -> list:
        return [{"anchor": int(i),
                 "benign": [v.provenance for v in b],
                 "malicious": [v.provenance for v in m]}
                for i, b, m in zip(self.anchor_indices, self.benign_variants,
                                   self.malicious_variants)]


def draw_benign(rng: np.random.Generator) -> BenignOp:
    kind = list(BenignKind)[int(rng.integers(0, len(BenignKind)))]
    if kind is BenignKind.RESAMPLING:
        return BenignOp(kind, target_rate=int(RESAMPLE_TARGETS[int(rng.integers(0, 3))]))
    return BenignOp(kind)


def draw_malicious(rng: np.random.Generator, corpus: Corpus, index: int,
                   kinds=TRAIN_MALICIOUS) -> tuple[dict, int | None]:
    """An op description plus the donor's corpus index (or None)."""
    kind = kinds[int(rng.integers(0, len(kinds)))]
    level = list(Level)[int(rng.integers(0, 3))]
    spec = {"kind": kind, "level": level, "seed": int(rng.integers(0, 2 ** 31)), "ratio": None}
    donor = None
    if kind is MaliciousKind.REORDERING:
        spec["level"] = Level.SEVERE
    if kind in (MaliciousKind.SPLICING, MaliciousKind.SUBSTITUTION):
        donor = corpus.donor_index(index, rng, same_speaker=True)
    elif kind is MaliciousKind.TTS_PROXY:
        donor = corpus.donor_index(index, rng, same_speaker=False)
        spec["ratio"] = float(rng.choice([0.1, 0.25, 0.5, 0.75, 0.9, 1.0]))
        spec["level"] = Level.SEVERE
    return spec, donor


def make_variants(corpus: Corpus, index: int, rng: np.random.Generator, positives: int,
                  negatives: int, watermark: WatermarkConfig | None,
                  sample_rate: int) -> tuple[list, list]:
    """Benign and malicious variants of one anchor. With ``watermark`` set,
    variants start from the anchor carrying a random payload, which is what a
    verifier sees after signing."""
    payload_seed = int(rng.integers(0, 2 ** 31))
    memo = {}

    def base():
        if "x" not in memo:
            x = corpus[index].load(sample_rate)
            if watermark is not None:
                bits = np.where(np.random.default_rng(payload_seed).random(
                    watermark.fingerprint_bits) < 0.5, 1, -1)
                x = embed(x, bits, watermark)
            memo["x"] = x
        return memo["x"]

    tag = {"payload_seed": payload_seed if watermark is not None else None,
           "watermark": watermark.to_dict() if watermark is not None else None}
    benign = []
    for _ in range(positives):
        op = draw_benign(rng)
        benign.append(Variant(lambda op=op: apply_benign(base(), op), {**op.describe(), **tag}))
    malicious = []
    for _ in range(negatives):
        spec, donor = draw_malicious(rng, corpus, index)

        def run(spec=spec, donor=donor):
            d = corpus[donor].load(sample_rate) if donor is not None else None
            op = MaliciousOp(spec["kind"], spec["level"], spec["seed"], d, spec["ratio"])
            return apply_malicious(base(), op).output

        prov = {"family": "malicious", "kind": spec["kind"].value, "level": spec["level"].value,
                "seed": spec["seed"], "ratio": spec["ratio"],
                "donor": corpus[donor].uid if donor is not None else None, **tag}
        malicious.append(Variant(run, prov))
    return benign, malicious


def batches_per_epoch(corpus_size: int, batch_size: int) -> int:
    if corpus_size < batch_size:
        raise CorpusTooSmall(f"corpus of {corpus_size} utterances is smaller than "
                             f"batch size {batch_size}")
    return corpus_size // batch_size


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0]).permutation(n)


def build_batch(corpus: Corpus, config: TrainingConfig, epoch: int, batch_index: int,
                watermark: WatermarkConfig | None = None,
                sample_rate: int = 16000) -> ContrastiveBatch:
    """Anchors come from a seeded per-epoch shuffle without replacement;
    each anchor's variants are drawn from a generator keyed by
    (seed, epoch, anchor)."""
    per_epoch = batches_per_epoch(len(corpus), config.batch_size)
    if not 0 <= batch_index < per_epoch:
        raise InvalidArgument(f"batch_index must lie in [0, {per_epoch})")
    order = epoch_order(len(corpus), config.seed, epoch)
    idx = order[batch_index * config.batch_size:(batch_index + 1) * config.batch_size]
    aug_epoch = epoch % config.augment_cycle if config.augment_cycle else epoch
    anchors, benign, malicious = [], [], []
    for i in idx:
        rng = np.random.default_rng([config.seed, aug_epoch, int(i), 1])
        b, m = make_variants(corpus, int(i), rng, config.positives, config.n_negatives,
                             watermark if config.watermark_augment else None, sample_rate)
        anchors.append(corpus[int(i)])
        benign.append(b)
        malicious.append(m)
    return ContrastiveBatch([int(i) for i in idx], anchors, benign, malicious, epoch, batch_index)


# ---------------------------------------------------------------------------
# Feature cache
# ---------------------------------------------------------------------------

class FeatureCache:
    """Encoded features memoized in memory and optionally on disk, keyed by
    (utterance, op provenance, feature config)."""

    def __init__(self, feature_config: MfccConfig, directory: str | None = None,
                 max_items: int = 4096):
        self.feature_config = feature_config
        self.directory = directory
        self.max_items = max_items
        self._mem: dict = {}
        if directory:
            os.makedirs(directory, exist_ok=True)
        self._salt = json.dumps(feature_config.to_dict(), sort_keys=True)

    def key(self, uid: str, provenance) -> str:
        raw = json.dumps([uid, provenance, self._salt], sort_keys=True, default=str)
        return hashlib.sha256(raw.encode()).hexdigest()[:32]

    def get(self, uid: str, provenance, waveform_fn) -> np.ndarray:
        k = self.key(uid, provenance)
        hit = self._mem.get(k)
        if hit is not None:
            return hit
        path = os.path.join(self.directory, k + ".npy") if self.directory else None
        if path and os.path.exists(path):
            m = np.load(path)
        else:
            m = encode(waveform_fn(), self.feature_config).matrix
            if path:
                tmp = path + ".tmp.npy"
                np.save(tmp, m)
                os.replace(tmp, path)
        if len(self._mem) >= self.max_items:
            self._mem.pop(next(iter(self._mem)))
        self._mem[k] = m
        return m


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Optimizer:
    """SGD (optional momentum) or Adam over a dict of named arrays. State
    lives in a flat dict so it can ride along in the checkpoint."""

    def __init__(self, kind: str, momentum: float = 0.0, state: dict | None = None,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.kind = kind
        self.momentum = momentum
        self.betas = betas
        self.eps = eps
        self.state = dict(state or {})

    def step(self, params: dict, grads: dict, lr: float, t: int) -> None:
        for name in sorted(params):
            g = grads[name]
            if self.kind == "sgd":
                if self.momentum:
                    buf = self.state.get(f"m.{name}")
                    buf = g.copy() if buf is None else self.momentum * buf + g
                    self.state[f"m.{name}"] = buf
                    g = buf
                params[name] = params[name] - lr * g
            else:
                b1, b2 = self.betas
                m = self.state.get(f"m.{name}", np.zeros_like(g))
                v = self.state.get(f"v.{name}", np.zeros_like(g))
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                self.state[f"m.{name}"] = m
                self.state[f"v.{name}"] = v
                mhat = m / (1 - b1 ** t)
                vhat = v / (1 - b2 ** t)
                params[name] = params[name] - lr * mhat / (np.sqrt(vhat) + self.eps)


def clip_gradients(grads: dict, max_norm: float | None) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


# ---------------------------------------------------------------------------
# Loss on network outputs
# ---------------------------------------------------------------------------

def batch_loss(outputs: np.ndarray, b: int, p: int, m: int, config: TrainingConfig):
    """Loss and its gradient w.r.t. the tanh outputs, which are ordered
    anchors, then benign (anchor-major), then malicious (anchor-major)."""
    emb = normalize_rows(outputs)
    a = emb[:b]
    pos = emb[b:b + b * p].reshape(b, p, -1)
    neg = emb[b + b * p:].reshape(b, m, -1)
    if config.loss == "infonce":
        loss, (ga, gp, gn) = info_nce_loss(a, pos, neg, config.tau)
    else:
        loss, (ga, gp, gn) = triplet_batch_loss(a, pos, neg, config.margin)
    d_emb = np.concatenate([ga, gp.reshape(b * p, -1), gn.reshape(b * m, -1)], axis=0)
    return loss, normalize_rows_backward(d_emb, outputs)


# ---------------------------------------------------------------------------
# Dev-set separation
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class DevSet:
    """Fixed anchors with fixed variants for per-epoch separation stats."""
    anchors: list
    benign: list
    malicious: list

    @classmethod
    def build(cls, corpus: Corpus, indices, seed: int, cache: FeatureCache,
              watermark: WatermarkConfig | None, sample_rate: int) -> "DevSet":
        anchors, benign, malicious = [], [], []
        for i in indices:
            rng = np.random.default_rng([seed, 10 ** 6, int(i)])
            b, m = make_variants(corpus, int(i), rng, 2, 2, watermark, sample_rate)
            uid = corpus[int(i)].uid
            anchors.append(cache.get(uid, "anchor", lambda i=i: corpus[int(i)].load(sample_rate)))
            benign.extend(encode(v.waveform, cache.feature_config).matrix for v in b)
            malicious.extend(encode(v.waveform, cache.feature_config).matrix for v in m)
        return cls(anchors, benign, malicious)

    def separation(self, params, model_config, mean, scale) -> dict:
        def bits(mats):
            normed = [(x - mean) / scale for x in mats]
            out, _ = forward(normed, params, model_config, train=False)
            return binarize(out)
        a = bits(self.anchors)
        b = bits(self.benign)
        m = bits(self.malicious)
        pb = len(self.benign) // len(self.anchors)
        pm = len(self.malicious) // len(self.anchors)
        db = [int(np.sum(a[i // pb] != b[i])) for i in range(len(b))]
        dm = [int(np.sum(a[i // pm] != m[i])) for i in range(len(m))]
        return {"benign_mean": float(np.mean(db)), "malicious_mean": float(np.mean(dm)),
                "gap_bits": float(np.mean(dm) - np.mean(db))}


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def feature_statistics(mats: list) -> tuple[np.ndarray, np.ndarray]:
    stacked = np.concatenate(mats, axis=0)
    mean = stacked.mean(axis=0)
    scale = stacked.std(axis=0)
    return mean, np.where(scale > 1e-8, scale, 1.0)


@dataclass
class TrainResult:
    checkpoint: ModelCheckpoint
    log_rows: list = field(default_factory=list)


LOG_FIELDS = ("epoch", "step", "lr", "loss", "dev_gap_bits")


def _write_log(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=LOG_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in LOG_FIELDS})


def train(corpus: Corpus, model_config: ModelConfig, training_config: TrainingConfig,
          feature_config: MfccConfig | None = None, watermark: WatermarkConfig | None = None,
          out_dir: str | None = None, resume: ModelCheckpoint | None = None,
          dev_corpus: Corpus | None = None, cache_dir: str | None = None,
          stop_after_epochs: int | None = None, meta: dict | None = None) -> TrainResult:
    """Train for ``training_config.epochs`` epochs (or until
    ``stop_after_epochs`` more epochs have run, used to test resumption).

    Every source of randomness is keyed by (seed, epoch, batch), so a run
    resumed from an epoch checkpoint lands on the same weights as an
    uninterrupted one.
    """
    cfg = training_config
    feature_config = feature_config or MfccConfig()
    watermark = watermark or WatermarkConfig(fingerprint_bits=model_config.fingerprint_bits,
                                             segments=model_config.segments)
    if feature_config.dim != model_config.input_dim:
        raise InvalidArgument(f"feature dim {feature_config.dim} != model input dim "
                              f"{model_config.input_dim}")
    sr = feature_config.sample_rate
    per_epoch = batches_per_epoch(len(corpus), cfg.batch_size)
    total_steps = per_epoch * cfg.epochs
    cache = FeatureCache(feature_config, cache_dir)
    m_neg = cfg.n_negatives

    if resume is not None:
        params = {k: v.copy() for k, v in resume.params.items()}
        mean, scale = resume.feature_mean, resume.feature_scale
        start_epoch, step = resume.epoch, resume.step
        opt = Optimizer(cfg.optimizer, cfg.momentum, resume.optimizer_state)
        rows = list(resume.meta.get("log", []))
    else:
        params = init_params(model_config, np.random.default_rng([cfg.seed, 99]))
        mats = [cache.get(u.uid, "anchor", lambda u=u: u.load(sr)) for u in corpus.utterances]
        mean, scale = feature_statistics(mats)
        start_epoch, step = 0, 0
        opt = Optimizer(cfg.optimizer, cfg.momentum)
        rows = []

    dev = None
    if dev_corpus is not None and len(dev_corpus) and cfg.dev_size:
        dev = DevSet.build(dev_corpus, range(min(cfg.dev_size, len(dev_corpus))), cfg.seed,
                           FeatureCache(feature_config), watermark, sr)

    base_meta = {"loss": cfg.loss, "training": cfg.to_dict(), "watermark": watermark.to_dict()}
    base_meta.update(meta or {})

    def snapshot(epoch):
        return ModelCheckpoint(model_config, feature_config, {k: v.copy() for k, v in params.items()},
                               mean, scale, step=step, epoch=epoch,
                               rng_state={"seed": cfg.seed, "next_epoch": epoch},
                               optimizer_state={k: v.copy() for k, v in opt.state.items()},
                               meta={**base_meta, "log": rows})

    end_epoch = cfg.epochs
    if stop_after_epochs is not None:
        end_epoch = min(end_epoch, start_epoch + stop_after_epochs)
    ckpt = snapshot(start_epoch)
    for epoch in range(start_epoch, end_epoch):
        losses = []
        for bi in range(per_epoch):
            batch = build_batch(corpus, cfg, epoch, bi, watermark, sr)
            mats = [cache.get(corpus[i].uid, "anchor", lambda i=i: corpus[i].load(sr))
                    for i in batch.anchor_indices]
            for i, vs in zip(batch.anchor_indices, batch.benign_variants):
                mats.extend(cache.get(corpus[i].uid, v.provenance, lambda v=v: v.waveform) for v in vs)
            for i, vs in zip(batch.anchor_indices, batch.malicious_variants):
                mats.extend(cache.get(corpus[i].uid, v.provenance, lambda v=v: v.waveform) for v in vs)
            normed = [(x - mean) / scale for x in mats]
            rng = np.random.default_rng([cfg.seed, epoch, bi, 7])
            out, fcache = forward(normed, params, model_config, train=True, rng=rng)
            loss, d_out = batch_loss(out, cfg.batch_size, cfg.positives, m_neg, cfg)
            if not np.isfinite(loss):
                diag = json.dumps({"epoch": epoch, "batch": bi, "provenance": batch.provenance()},
                                  default=str)
                if out_dir:
                    with open(os.path.join(out_dir, "diverged_batch.json"), "w") as f:
                        f.write(diag)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} batch {bi}: {diag[:2000]}")
            grads = backward(d_out, fcache, params, model_config)
            clip_gradients(grads, cfg.grad_clip)
            lr = lr_at(step, total_steps, cfg.lr_max, cfg.lr_min)
            step += 1
            opt.step(params, grads, lr, step)
            losses.append(loss)
        gap = None
        if dev is not None:
            gap = dev.separation(params, model_config, mean, scale)["gap_bits"]
        row = {"epoch": epoch + 1, "step": step, "lr": lr_at(step, total_steps, cfg.lr_max, cfg.lr_min),
               "loss": float(np.mean(losses)), "dev_gap_bits": gap}
        rows.append(row)
        log.info("epoch %d loss %.4f dev_gap %s", epoch + 1, row["loss"], gap)
        ckpt = snapshot(epoch + 1)
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            ckpt.save(os.path.join(out_dir, f"checkpoint_epoch{epoch + 1:03d}.svck"))
            ckpt.save(os.path.join(out_dir, "checkpoint.svck"))
            _write_log(os.path.join(out_dir, "training_log.csv"), rows)
    return TrainResult(ckpt, rows)
