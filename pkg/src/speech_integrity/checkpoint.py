"""Model checkpoints ("SVCK" container) and the fingerprint pipeline.

Layout: magic ``SVCK``, u32 version, u32 header length, UTF-8 JSON header,
then every tensor as little-endian float64 in header-table order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .audio import Waveform, resample
from .errors import IoError, ParseError, ShapeError, TooShort
from .features import FrameFeatures, MfccConfig, encode
from .model.network import ModelConfig, binarize, bits_to_hex, forward

MAGIC = b"SVCK"
VERSION = 1
MIN_SECONDS = 2.0


@dataclass(eq=False)
class ModelCheckpoint:
    model_config: ModelConfig
    feature_config: MfccConfig
    params: dict
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    step: int = 0
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)
    optimizer_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        d = self.model_config.input_dim
        self.feature_mean = np.asarray(self.feature_mean, dtype=np.float64).reshape(d)
        self.feature_scale = np.asarray(self.feature_scale, dtype=np.float64).reshape(d)
        for name, value in self.params.items():
            if not np.all(np.isfinite(value)):
                raise ShapeError(f"weight {name} has non-finite entries")

    # -- pipeline -----------------------------------------------------------

    def features(self, waveform: Waveform) -> np.ndarray:
        if waveform.duration_seconds < MIN_SECONDS:
            raise TooShort(f"fingerprinting needs at least {MIN_SECONDS} s of audio")
        if waveform.sample_rate != self.feature_config.sample_rate:
            waveform = resample(waveform, self.feature_config.sample_rate)
        return self.normalize(encode(waveform, self.feature_config))

    def normalize(self, feats: FrameFeatures) -> np.ndarray:
        if feats.dim != self.model_config.input_dim:
            raise ShapeError(f"feature dim {feats.dim} != model input dim "
                             f"{self.model_config.input_dim}")
        return (feats.matrix - self.feature_mean) / self.feature_scale

    def embed_features(self, matrices: list) -> np.ndarray:
        """tanh outputs (N, bits) for already-normalized feature matrices."""
        out, _ = forward(matrices, self.params, self.model_config, train=False)
        return out

    def fingerprint_vector(self, waveform: Waveform) -> np.ndarray:
        return self.embed_features([self.features(waveform)])[0]

    def fingerprint(self, waveform: Waveform) -> np.ndarray:
        return binarize(self.fingerprint_vector(waveform))

    def fingerprint_hex(self, waveform: Waveform) -> str:
        return bits_to_hex(self.fingerprint(waveform))

    # -- serialization ------------------------------------------------------

    def tensors(self) -> dict:
        t = {f"param.{k}": v for k, v in sorted(self.params.items())}
        t["norm.mean"] = self.feature_mean
        t["norm.scale"] = self.feature_scale
        for k, v in sorted(self.optimizer_state.items()):
            t[f"opt.{k}"] = v
        return t

    def to_bytes(self) -> bytes:
        table, blobs, offset = [], [], 0
        for name, value in self.tensors().items():
            arr = np.ascontiguousarray(value, dtype="<f8")
            table.append({"name": name, "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
        header = {
            "model": self.model_config.to_dict(),
            "features": self.feature_config.to_dict(),
            "step": self.step,
            "epoch": self.epoch,
            "rng_state": self.rng_state,
            "meta": self.meta,
            "tensors": table,
        }
        raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + struct.pack("<II", VERSION, len(raw)) + raw + b"".join(blobs)

    @property
    def checkpoint_id(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()[:16]

    def save(self, path) -> None:
        try:
            with open(path, "wb") as f:
                f.write(self.to_bytes())
        except OSError as exc:
            raise IoError(f"cannot write checkpoint {path}: {exc}") from None

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ModelCheckpoint":
        if len(buf) < 12 or buf[:4] != MAGIC:
            raise ParseError("not an SVCK checkpoint")
        version, hlen = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise ParseError(f"unsupported checkpoint version {version}")
        try:
            header = json.loads(buf[12:12 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ParseError(f"corrupt checkpoint header: {exc}") from None
        body = memoryview(buf)[12 + hlen:]
        tensors = {}
        for entry in header["tensors"]:
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            start = entry["offset"]
            if start + 8 * count > len(body):
                raise ParseError(f"tensor {entry['name']} runs past end of file")
            arr = np.frombuffer(body[start:start + 8 * count], dtype="<f8").astype(np.float64)
            tensors[entry["name"]] = arr.reshape(entry["shape"])
        model = ModelConfig.from_dict(header["model"])
        params = {k[6:]: v for k, v in tensors.items() if k.startswith("param.")}
        opt = {k[4:]: v for k, v in tensors.items() if k.startswith("opt.")}
        return cls(model_config=model, feature_config=MfccConfig.from_dict(header["features"]),
                   params=params, feature_mean=tensors["norm.mean"],
                   feature_scale=tensors["norm.scale"], step=header["step"],
                   epoch=header["epoch"], rng_state=header["rng_state"],
                   optimizer_state=opt, meta=header["meta"])

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        try:
            with open(path, "rb") as f:
                return cls.from_bytes(f.read())
        except FileNotFoundError:
            raise IoError(f"checkpoint not found: {path}") from None
