"""Toolkit configuration file (TOML or JSON) and its canonical hash."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace

import tomli
import tomli_w

from .errors import InvalidArgument, IoError, ParseError
from .features import MfccConfig
from .model.network import ModelConfig
from .training import TrainingConfig
from .verify import REFERENCE_THETA
from .watermark import WatermarkConfig

ENV_VAR = "SPEECHVERIFIER_CONFIG"
HASHED_SECTIONS = ("model", "features", "training", "watermark")


@dataclass(frozen=True)
class VerifierSettings:
    # 42 is the threshold calibrated at reference scale; a desk checkpoint
    # needs its own value from `calibrate`
    theta: int = REFERENCE_THETA
    calibrated: bool = False

    def to_dict(self) -> dict:
        return {"theta": self.theta, "calibrated": self.calibrated}


@dataclass(frozen=True)
class CorpusPaths:
    train: str | None = None
    dev: str | None = None
    test: str | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in (("train", self.train), ("dev", self.dev),
                                  ("test", self.test)) if v is not None}


@dataclass(frozen=True)
class ToolkitConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    features: MfccConfig = field(default_factory=MfccConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    watermark: WatermarkConfig = field(default_factory=WatermarkConfig)
    verifier: VerifierSettings = field(default_factory=VerifierSettings)
    corpus: CorpusPaths = field(default_factory=CorpusPaths)
    output_dir: str = "runs"
    checkpoint: str | None = None
    seed: int = 0
    source: str | None = None

    def __post_init__(self):
        if self.features.dim != self.model.input_dim:
            raise InvalidArgument(f"feature dim {self.features.dim} != model input dim "
                                  f"{self.model.input_dim}")
        if (self.watermark.fingerprint_bits != self.model.fingerprint_bits
                or self.watermark.segments != self.model.segments):
            raise InvalidArgument("watermark payload layout must match the model "
                                  "(fingerprint_bits and segments)")
        if not 0 <= self.verifier.theta <= self.model.fingerprint_bits:
            raise InvalidArgument("theta must lie in [0, fingerprint_bits]")

    def to_dict(self) -> dict:
        d = {"seed": self.seed, "output_dir": self.output_dir,
             "model": self.model.to_dict(), "features": _drop_none(self.features.to_dict()),
             "training": _drop_none(self.training.to_dict()),
             "watermark": self.watermark.to_dict(), "verifier": self.verifier.to_dict(),
             "corpus": self.corpus.to_dict()}
        if self.checkpoint is not None:
            d["checkpoint"] = self.checkpoint
        return d

    @property
    def config_hash(self) -> str:
        """sha256 (first 16 hex chars) of the canonical JSON of the sections
        that determine a checkpoint and its watermark."""
        d = self.to_dict()
        canon = json.dumps({k: d[k] for k in HASHED_SECTIONS}, sort_keys=True,
                           separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]

    def resolve(self, path: str | None) -> str | None:
        """Paths in the file are relative to the file itself."""
        if path is None or os.path.isabs(path) or self.source is None:
            return path
        return os.path.join(os.path.dirname(os.path.abspath(self.source)), path)

    def with_theta(self, theta: int, calibrated: bool = True) -> "ToolkitConfig":
        return replace(self, verifier=VerifierSettings(int(theta), calibrated))

    @classmethod
    def from_dict(cls, d: dict, source: str | None = None) -> "ToolkitConfig":
        known = {"seed", "output_dir", "checkpoint", "model", "features", "training",
                 "watermark", "verifier", "corpus"}
        extra = set(d) - known
        if extra:
            raise ParseError(f"unknown config keys: {sorted(extra)}")
        try:
            seed = int(d.get("seed", 0))
            model = ModelConfig.from_dict(d.get("model", {}))
            features = MfccConfig.from_dict(d.get("features", {}))
            training = TrainingConfig.from_dict({"seed": seed, **d.get("training", {})})
            wm = {"fingerprint_bits": model.fingerprint_bits, "segments": model.segments,
                  **d.get("watermark", {})}
            watermark = WatermarkConfig.from_dict(wm)
            verifier = VerifierSettings(**d.get("verifier", {}))
            corpus = CorpusPaths(**d.get("corpus", {}))
        except TypeError as exc:
            raise ParseError(f"bad config: {exc}") from None
        return cls(model, features, training, watermark, verifier, corpus,
                   d.get("output_dir", "runs"), d.get("checkpoint"), seed, source)


def _drop_none(d: dict) -> dict:
    return {k: v for k, v in d.items() if v is not None}


def load_config(path: str | None = None) -> ToolkitConfig:
    """Read ``path``, or the file named by $SPEECHVERIFIER_CONFIG, or fall
    back to defaults when neither is given."""
    path = path or os.environ.get(ENV_VAR)
    if not path:
        return ToolkitConfig()
    if not os.path.exists(path):
        raise IoError(f"config file not found: {path}")
    with open(path, "rb") as f:
        raw = f.read()
    try:
        if path.endswith(".json"):
            data = json.loads(raw.decode("utf-8"))
        else:
            data = tomli.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError, tomli.TOMLDecodeError) as exc:
        raise ParseError(f"cannot parse config {path}: {exc}") from None
    return ToolkitConfig.from_dict(data, source=path)


def dump_config(config: ToolkitConfig, path: str) -> None:
    data = config.to_dict()
    if path.endswith(".json"):
        text = json.dumps(data, indent=2, sort_keys=True) + "\n"
    else:
        text = ("# theta = 42 is the reference-scale threshold; recalibrate for desk checkpoints\n"
                + tomli_w.dumps(data))
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)
