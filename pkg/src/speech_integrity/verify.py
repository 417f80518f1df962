"""Dual-path verification: regenerate the fingerprint from the audio (path A),
read the embedded one back (path B), accept when they are close."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .audio import Waveform
from .checkpoint import ModelCheckpoint
from .errors import ConfigMismatch, InvalidArgument
from .metrics import error_rates_at
from .model.network import bits_to_hex
from .watermark import WatermarkConfig, embed, extract

REFERENCE_THETA = 42


class Decision(str, Enum):
    ACCEPT = "Accept"
    REJECT = "Reject"


@dataclass(frozen=True)
class VerifierConfig:
    theta: int = REFERENCE_THETA
    checkpoint: ModelCheckpoint | None = None
    watermark: WatermarkConfig | None = None

    def __post_init__(self):
        bits = self.watermark.fingerprint_bits if self.watermark else 256
        if not 0 <= int(self.theta) <= bits:
            raise InvalidArgument(f"theta must lie in [0, {bits}]")


@dataclass(frozen=True)
class VerificationResult:
    regenerated: np.ndarray
    extracted: np.ndarray
    distance: int
    theta: int
    decision: Decision
    per_segment_errors: tuple

    @property
    def accepted(self) -> bool:
        return self.decision is Decision.ACCEPT

    def to_dict(self) -> dict:
        return {"distance": self.distance, "theta": self.theta,
                "decision": self.decision.value,
                "per_segment_errors": list(self.per_segment_errors),
                "regenerated": bits_to_hex(self.regenerated),
                "extracted": bits_to_hex(self.extracted)}


def hamming(a, b) -> int:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise InvalidArgument(f"fingerprints differ in length: {a.shape} vs {b.shape}")
    return int(np.count_nonzero(a != b))


def decide(distance: int, theta: int) -> Decision:
    return Decision.ACCEPT if distance <= theta else Decision.REJECT


def check_compatible(checkpoint: ModelCheckpoint, watermark: WatermarkConfig) -> None:
    mc = checkpoint.model_config
    if mc.fingerprint_bits != watermark.fingerprint_bits:
        raise ConfigMismatch(f"checkpoint emits {mc.fingerprint_bits} bits, watermark "
                             f"carries {watermark.fingerprint_bits}")
    if mc.segments != watermark.segments:
        raise ConfigMismatch(f"checkpoint assumes {mc.segments} segments, watermark "
                             f"uses {watermark.segments}")


def sign(waveform: Waveform, checkpoint: ModelCheckpoint,
         watermark: WatermarkConfig) -> tuple[Waveform, np.ndarray]:
    """Fingerprint the audio and embed the fingerprint into it."""
    check_compatible(checkpoint, watermark)
    bits = checkpoint.fingerprint(waveform)
    return embed(waveform, bits, watermark), bits


def verify(waveform: Waveform, config: VerifierConfig) -> VerificationResult:
    if config.checkpoint is None:
        raise InvalidArgument("verification needs a checkpoint")
    watermark = config.watermark or WatermarkConfig(
        fingerprint_bits=config.checkpoint.model_config.fingerprint_bits,
        segments=config.checkpoint.model_config.segments)
    check_compatible(config.checkpoint, watermark)
    regenerated = config.checkpoint.fingerprint(waveform)
    extracted = extract(waveform, watermark)
    diff = (regenerated != extracted).reshape(watermark.segments, -1)
    per_segment = tuple(int(v) for v in diff.sum(axis=1))
    distance = int(sum(per_segment))
    return VerificationResult(regenerated, extracted, distance, int(config.theta),
                              decide(distance, int(config.theta)), per_segment)


@dataclass(frozen=True)
class Calibration:
    theta: int
    fpr: float
    fnr: float


def calibrate_threshold(dev_scores) -> Calibration:
    """Integer theta at the equal-error point of (distance, is_benign) pairs.

    Every integer from one below the smallest distance to the largest is
    tried; the smallest theta minimizing |FPR - FNR| wins.
    """
    pairs = list(dev_scores)
    d = np.array([int(p[0]) for p in pairs], dtype=np.int64)
    y = np.array([_is_benign(p[1]) for p in pairs], dtype=bool)
    if d.size == 0 or y.all() or not y.any():
        raise InvalidArgument("calibration needs both benign and malicious scores")
    pos, neg = d[y], d[~y]
    best = None
    for theta in range(max(0, int(d.min()) - 1), int(d.max()) + 1):
        fpr, fnr = error_rates_at(pos, neg, theta)
        gap = abs(fpr - fnr)
        if best is None or gap < best[0]:
            best = (gap, Calibration(theta, fpr, fnr))
    return best[1]


def _is_benign(label) -> bool:
    if isinstance(label, (bool, np.bool_)):
        return bool(label)
    text = str(label).lower()
    if text in ("benign", "accept", "positive"):
        return True
    if text in ("malicious", "reject", "negative"):
        return False
    raise InvalidArgument(f"unknown label {label!r}")
