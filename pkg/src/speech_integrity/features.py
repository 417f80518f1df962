"""Frame-level acoustic features: MFCC encoder and external-feature import."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
from scipy.fft import dct

from .audio import Waveform, frame_count, frame_matrix
from .errors import DataError, InvalidArgument, ParseError, ShapeError, TooShort

EXTERNAL_MAGIC = b"SVFT"


@dataclass(frozen=True)
class MfccConfig:
    sample_rate: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    fft_size: int = 512
    mel_filters: int = 40
    cepstra: int = 13
    deltas: bool = True
    delta_width: int = 2
    pre_emphasis: float = 0.97
    log_floor: float = 1e-10
    low_hz: float = 0.0
    high_hz: float | None = None
    cmn: bool = True

    def __post_init__(self):
        if self.cepstra > self.mel_filters:
            raise InvalidArgument("cepstra must not exceed mel_filters")
        if self.window_ms < self.hop_ms:
            raise InvalidArgument("window must be at least the hop")

    @property
    def window_samples(self) -> int:
        return int(round(self.window_ms * self.sample_rate / 1000.0))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000.0))

    @property
    def dim(self) -> int:
        return self.cepstra * (3 if self.deltas else 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MfccConfig":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class FrameFeatures:
    matrix: np.ndarray
    frame_hop_seconds: float
    source: str = "mfcc"

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise ShapeError("feature matrix must be 2-D")
        if m.shape[0] < 1:
            raise ShapeError("feature matrix has no frames")
        if not np.all(np.isfinite(m)):
            raise DataError("feature matrix contains non-finite entries")
        object.__setattr__(self, "matrix", m)

    @property
    def frames(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(sample_rate: int, fft_size: int, n_filters: int,
                   low_hz: float = 0.0, high_hz: float | None = None) -> np.ndarray:
    """Triangular HTK-mel filters as an (n_filters, fft_size//2 + 1) matrix."""
    high_hz = sample_rate / 2.0 if high_hz is None else high_hz
    mel_points = np.linspace(hz_to_mel(low_hz), hz_to_mel(high_hz), n_filters + 2)
    hz_points = mel_to_hz(mel_points)
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    fb = np.zeros((n_filters, freqs.shape[0]))
    for j in range(n_filters):
        left, centre, right = hz_points[j], hz_points[j + 1], hz_points[j + 2]
        rising = (freqs - left) / (centre - left)
        falling = (right - freqs) / (right - centre)
        fb[j] = np.maximum(0.0, np.minimum(rising, falling))
    fb.flags.writeable = False
    return fb


def delta(feat: np.ndarray, width: int = 2) -> np.ndarray:
    """Regression deltas over +-width frames with edge replication."""
    t = feat.shape[0]
    padded = np.pad(feat, ((width, width), (0, 0)), mode="edge")
    denom = 2.0 * sum(n * n for n in range(1, width + 1))
    out = np.zeros_like(feat)
    for n in range(1, width + 1):
        out += n * (padded[width + n:width + n + t] - padded[width - n:width - n + t])
    return out / denom


def log_mel_energies(waveform: Waveform, config: MfccConfig) -> np.ndarray:
    x = waveform.samples
    emphasized = np.empty_like(x)
    if x.shape[0]:
        emphasized[0] = x[0]
        emphasized[1:] = x[1:] - config.pre_emphasis * x[:-1]
    frames = frame_matrix(emphasized, config.window_samples, config.hop_samples)
    window = np.hanning(config.window_samples + 1)[:-1]
    spectrum = np.fft.rfft(frames * window, n=config.fft_size)
    power = spectrum.real ** 2 + spectrum.imag ** 2
    fb = mel_filterbank(config.sample_rate, config.fft_size, config.mel_filters,
                        config.low_hz, config.high_hz)
    return np.log(np.maximum(power @ fb.T, config.log_floor))


def mfcc(waveform: Waveform, config: MfccConfig | None = None) -> FrameFeatures:
    """13 cepstra (orthonormal DCT-II of log mel energies) plus deltas.

    Cepstral mean normalization is *not* applied here; see :func:`encode`.
    """
    config = config or MfccConfig(sample_rate=waveform.sample_rate)
    if waveform.sample_rate != config.sample_rate:
        raise InvalidArgument(
            f"waveform rate {waveform.sample_rate} != feature rate {config.sample_rate}")
    if frame_count(len(waveform), config.window_samples, config.hop_samples) == 0:
        raise TooShort(f"need at least {config.window_samples} samples for one frame")
    logmel = log_mel_energies(waveform, config)
    ceps = dct(logmel, type=2, axis=1, norm="ortho")[:, :config.cepstra]
    if config.deltas:
        d1 = delta(ceps, config.delta_width)
        d2 = delta(d1, config.delta_width)
        ceps = np.concatenate([ceps, d1, d2], axis=1)
    return FrameFeatures(ceps, config.hop_samples / config.sample_rate, "mfcc")


def cepstral_mean_normalize(features: FrameFeatures) -> FrameFeatures:
    m = features.matrix
    return FrameFeatures(m - m.mean(axis=0, keepdims=True), features.frame_hop_seconds,
                         features.source)


def encode(waveform: Waveform, config: MfccConfig) -> FrameFeatures:
    """The feature encoder used by the fingerprint pipeline."""
    feats = mfcc(waveform, config)
    return cepstral_mean_normalize(feats) if config.cmn else feats


# ---------------------------------------------------------------------------
# External features ("SVFT" container)
# ---------------------------------------------------------------------------

def save_external_features(features: FrameFeatures, path) -> None:
    m = features.matrix.astype("<f4")
    header = EXTERNAL_MAGIC + struct.pack("<IIf", m.shape[0], m.shape[1],
                                          features.frame_hop_seconds)
    with open(path, "wb") as f:
        f.write(header + m.tobytes())


def parse_external_features(buf: bytes, expected_dim: int | None = None) -> FrameFeatures:
    if len(buf) < 16 or buf[:4] != EXTERNAL_MAGIC:
        raise ParseError("missing SVFT header")
    t, d, hop = struct.unpack_from("<IIf", buf, 4)
    payload = buf[16:]
    if len(payload) != 4 * t * d:
        raise ShapeError(f"header declares {t}x{d} floats, payload holds {len(payload) // 4}")
    if expected_dim is not None and d != expected_dim:
        raise ShapeError(f"feature dim {d} does not match model input dim {expected_dim}")
    m = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(t, d)
    if not np.all(np.isfinite(m)):
        raise DataError("external features contain non-finite values")
    if t == 0:
        raise ShapeError("external feature file has no frames")
    return FrameFeatures(m, float(hop), "external")


def load_external_features(path, expected_dim: int | None = None) -> FrameFeatures:
    with open(path, "rb") as f:
        return parse_external_features(f.read(), expected_dim)
