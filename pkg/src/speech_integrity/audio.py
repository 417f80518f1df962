"""Waveform container, RIFF/WAVE I/O and the DSP primitives used everywhere else.

All processing happens on float64 samples nominally in [-1, 1]. Clipping is
applied only when a waveform is serialized to an integer container.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy.signal import upfirdn

from .errors import InvalidArgument, IoError, ParseError, UnsupportedFormat

__all__ = [
    "Waveform",
    "FrameView",
    "read_wav",
    "write_wav",
    "wav_bytes",
    "resample",
    "frame_signal",
    "frame_matrix",
    "frame_count",
    "rms_energy",
    "pitch_shift",
    "time_stretch",
]

_WAVE_FORMAT_PCM = 0x0001
_WAVE_FORMAT_IEEE_FLOAT = 0x0003
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE
# Trailing 14 bytes shared by the KSDATAFORMAT_SUBTYPE_* GUIDs.
_GUID_TAIL = b"\x00\x00\x00\x00\x10\x00\x80\x00\x00\xaa\x00\x38\x9b\x71"

KAISER_BETA = 8.0
SINC_HALF_WIDTH = 32
RESAMPLE_ROLLOFF = 0.95


@dataclass(frozen=True, eq=False)
class Waveform:
    """Mono PCM samples plus their sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.float64, copy=True).reshape(-1)
        if not np.all(np.isfinite(x)):
            raise InvalidArgument("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise InvalidArgument(f"sample_rate must be positive, got {self.sample_rate}")
        x.flags.writeable = False
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_seconds(self) -> float:
        return len(self) / self.sample_rate

    def with_samples(self, samples) -> "Waveform":
        return Waveform(samples, self.sample_rate)

    def segment(self, start: int, stop: int) -> "Waveform":
        return Waveform(self.samples[start:stop], self.sample_rate)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Waveform):
            return NotImplemented
        return self.sample_rate == other.sample_rate and np.array_equal(self.samples, other.samples)

    __hash__ = None


@dataclass(frozen=True)
class FrameView:
    start_sample: int
    length: int
    values: np.ndarray


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

def _decode_pcm(data: bytes, bits: int, channels: int) -> np.ndarray:
    width = bits // 8
    usable = len(data) - len(data) % (width * channels)
    data = data[:usable]
    if bits == 8:
        x = (np.frombuffer(data, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    elif bits == 16:
        x = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif bits == 24:
        raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        ints = raw[:, 0] | (raw[:, 1] << 8) | (raw[:, 2] << 16)
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
        x = ints.astype(np.float64) / float(1 << 23)
    elif bits == 32:
        x = np.frombuffer(data, dtype="<i4").astype(np.float64) / float(1 << 31)
    else:
        raise UnsupportedFormat(f"unsupported PCM bit depth {bits}")
    return x.reshape(-1, channels)


def _decode_float(data: bytes, bits: int, channels: int) -> np.ndarray:
    if bits == 32:
        dtype = "<f4"
    elif bits == 64:
        dtype = "<f8"
    else:
        raise UnsupportedFormat(f"unsupported float bit depth {bits}")
    width = bits // 8
    usable = len(data) - len(data) % (width * channels)
    x = np.frombuffer(data[:usable], dtype=dtype).astype(np.float64)
    return x.reshape(-1, channels)


def parse_wav(buf: bytes) -> tuple[Waveform, dict]:
    """Decode RIFF/WAVE bytes. Returns the waveform and any INFO text chunks."""
    if len(buf) < 12 or buf[:4] != b"RIFF" or buf[8:12] != b"WAVE":
        raise ParseError("not a RIFF/WAVE stream")
    pos = 12
    fmt = None
    data = None
    info: dict[str, str] = {}
    while pos + 8 <= len(buf):
        cid = buf[pos:pos + 4]
        (size,) = struct.unpack_from("<I", buf, pos + 4)
        body = buf[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise ParseError("fmt chunk too short")
            fmt = body
        elif cid == b"data":
            data = body
        elif cid == b"LIST" and body[:4] == b"INFO":
            info.update(_parse_info(body[4:]))
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise ParseError("missing fmt or data chunk")

    tag, channels, rate, _byte_rate, _align, bits = struct.unpack_from("<HHIIHH", fmt, 0)
    if tag == _WAVE_FORMAT_EXTENSIBLE:
        if len(fmt) < 40:
            raise ParseError("truncated WAVE_FORMAT_EXTENSIBLE header")
        guid = fmt[24:40]
        if guid[2:] != _GUID_TAIL:
            raise UnsupportedFormat("unknown extensible subformat")
        (tag,) = struct.unpack_from("<H", guid, 0)
    if channels < 1 or rate < 1:
        raise ParseError("invalid channel count or sample rate")

    if tag == _WAVE_FORMAT_PCM:
        frames = _decode_pcm(data, bits, channels)
    elif tag == _WAVE_FORMAT_IEEE_FLOAT:
        frames = _decode_float(data, bits, channels)
    else:
        raise UnsupportedFormat(f"unsupported WAVE format tag 0x{tag:04x}")
    mono = frames.mean(axis=1) if channels > 1 else frames[:, 0]
    return Waveform(mono, rate), info


def _parse_info(body: bytes) -> dict:
    out = {}
    pos = 0
    while pos + 8 <= len(body):
        key = body[pos:pos + 4].decode("ascii", "replace")
        (size,) = struct.unpack_from("<I", body, pos + 4)
        out[key] = body[pos + 8:pos + 8 + size].rstrip(b"\x00").decode("utf-8", "replace")
        pos += 8 + size + (size & 1)
    return out


def read_wav(path, with_info: bool = False):
    """Read a PCM/IEEE-float WAV file, averaging multichannel audio to mono.

    Integer samples are scaled by 1/2^(bits-1) so full scale maps to [-1, 1).
    """
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    wave, info = parse_wav(buf)
    return (wave, info) if with_info else wave


def wav_bytes(waveform: Waveform, bit_depth="16", info: dict | None = None) -> bytes:
    """Serialize to RIFF/WAVE bytes. ``bit_depth`` is 16 or "32f"."""
    x = waveform.samples
    depth = str(bit_depth).lower()
    if depth in ("16", "16i"):
        q = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
        fmt = struct.pack("<HHIIHH", _WAVE_FORMAT_PCM, 1, waveform.sample_rate,
                          waveform.sample_rate * 2, 2, 16)
        payload = q.tobytes()
        extra = b""
    elif depth in ("32f", "32-float", "32float", "float"):
        q = np.clip(x, -1.0, 1.0).astype("<f4")
        fmt = struct.pack("<HHIIHHH", _WAVE_FORMAT_IEEE_FLOAT, 1, waveform.sample_rate,
                          waveform.sample_rate * 4, 4, 32, 0)
        payload = q.tobytes()
        extra = b"fact" + struct.pack("<II", 4, len(q))
    else:
        raise InvalidArgument(f"bit_depth must be 16 or '32f', got {bit_depth!r}")

    chunks = [b"fmt " + struct.pack("<I", len(fmt)) + fmt, extra]
    if info:
        entries = b""
        for key, value in info.items():
            raw = value.encode("utf-8") + b"\x00"
            entries += key.encode("ascii")[:4].ljust(4, b" ") + struct.pack("<I", len(raw)) + raw
            if len(raw) & 1:
                entries += b"\x00"
        chunks.append(b"LIST" + struct.pack("<I", 4 + len(entries)) + b"INFO" + entries)
    data = b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        data += b"\x00"
    chunks.append(data)
    body = b"WAVE" + b"".join(chunks)
    return b"RIFF" + struct.pack("<I", len(body)) + body


def write_wav(waveform: Waveform, path, bit_depth="16", info: dict | None = None) -> None:
    buf = wav_bytes(waveform, bit_depth, info)
    try:
        with open(path, "wb") as f:
            f.write(buf)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

@lru_cache(maxsize=32)
def _sinc_filter(up: int, down: int) -> tuple[np.ndarray, int]:
    """Kaiser-windowed sinc prototype, front-padded so the group delay is a
    whole number of output samples. Returns (taps, output delay)."""
    ratio = max(up, down)
    half = SINC_HALF_WIDTH * ratio
    n = np.arange(-half, half + 1, dtype=np.float64)
    cutoff = RESAMPLE_ROLLOFF / ratio
    h = cutoff * np.sinc(cutoff * n) * np.kaiser(2 * half + 1, KAISER_BETA) * up
    pad = (-half) % down
    h = np.concatenate([np.zeros(pad), h])
    return h, (half + pad) // down


def _resample_ratio(x: np.ndarray, up: int, down: int, n_out: int) -> np.ndarray:
    if up == down:
        return x.copy()
    h, delay = _sinc_filter(up, down)
    y = upfirdn(h, x, up, down)[delay:delay + n_out]
    if y.shape[0] < n_out:
        y = np.concatenate([y, np.zeros(n_out - y.shape[0])])
    return y


def resample(waveform: Waveform, target_rate: int) -> Waveform:
    """Band-limited polyphase resampling to ``target_rate``.

    Output length is round(len * target / source).
    """
    target_rate = int(target_rate)
    if target_rate <= 0:
        raise InvalidArgument("target_rate must be positive")
    src = waveform.sample_rate
    if target_rate == src:
        return Waveform(waveform.samples, src)
    g = math.gcd(src, target_rate)
    up, down = target_rate // g, src // g
    n_out = int(round(len(waveform) * target_rate / src))
    return Waveform(_resample_ratio(waveform.samples, up, down, n_out), target_rate)


# ---------------------------------------------------------------------------
# Framing and energy
# ---------------------------------------------------------------------------

def frame_count(n_samples: int, window: int, hop: int) -> int:
    if n_samples < window:
        return 0
    return (n_samples - window) // hop + 1


def frame_matrix(samples: np.ndarray, window: int, hop: int) -> np.ndarray:
    """Read-only (n_frames, window) strided view of ``samples``."""
    if window < 1 or hop < 1:
        raise InvalidArgument("window and hop must be >= 1")
    n = frame_count(samples.shape[0], window, hop)
    if n == 0:
        return np.zeros((0, window))
    return np.lib.stride_tricks.sliding_window_view(samples, window)[::hop][:n]


def frame_signal(waveform: Waveform, window_samples: int, hop_samples: int) -> list[FrameView]:
    frames = frame_matrix(waveform.samples, window_samples, hop_samples)
    return [FrameView(i * hop_samples, window_samples, frames[i]) for i in range(frames.shape[0])]


def rms_energy(frame) -> float:
    values = frame.values if isinstance(frame, FrameView) else np.asarray(frame, dtype=np.float64)
    if values.size == 0:
        raise InvalidArgument("rms of an empty frame")
    return float(np.sqrt(np.mean(np.square(values))))


# ---------------------------------------------------------------------------
# Pitch shifting
# ---------------------------------------------------------------------------

_OLA_FRAME = 1024
_OLA_HOP = 256


def time_stretch(x: np.ndarray, rate: float, n_out: int,
                 frame: int = _OLA_FRAME, hop: int = _OLA_HOP) -> np.ndarray:
    """Waveform-similarity overlap-add. Reads the input ``rate`` times faster
    than it writes, so the output is about len(x) / rate samples long; the
    result is cut or zero-padded to exactly ``n_out``."""
    window = np.hanning(frame + 1)[:frame]
    analysis_hop = hop * rate
    tol = hop // 2
    n_frames = max(1, int(math.ceil(max(n_out - frame, 0) / hop)) + 1)
    pad = frame + 2 * tol + int(math.ceil(analysis_hop)) + hop
    src = np.concatenate([np.zeros(tol), x, np.zeros(pad + n_frames * int(math.ceil(analysis_hop)))])
    out = np.zeros(n_frames * hop + frame)
    norm = np.zeros_like(out)
    prev = None
    for k in range(n_frames):
        nominal = int(round(k * analysis_hop)) + tol
        if prev is None:
            pos = nominal
        else:
            target = src[prev + hop: prev + hop + frame]
            lo = max(nominal - tol, 0)
            region = src[lo: nominal + tol + frame]
            corr = np.correlate(region, target, mode="valid")
            pos = lo + int(np.argmax(corr)) if np.any(target) else nominal
        seg = src[pos: pos + frame]
        out[k * hop: k * hop + frame] += window * seg
        norm[k * hop: k * hop + frame] += window
        prev = pos
    norm[norm < 1e-8] = 1.0
    y = out / norm
    if y.shape[0] < n_out:
        y = np.concatenate([y, np.zeros(n_out - y.shape[0])])
    return y[:n_out]


def pitch_shift(waveform: Waveform, semitones: float) -> Waveform:
    """Shift pitch by ``semitones`` while keeping the length and sample rate.

    Resamples by 2^(-semitones/12) (which scales every frequency) and then
    restores the original duration with overlap-add time stretching.
    """
    if abs(semitones) > 12:
        raise InvalidArgument("|semitones| must be <= 12")
    if semitones == 0:
        return Waveform(waveform.samples, waveform.sample_rate)
    factor = 2.0 ** (semitones / 12.0)
    ratio = Fraction(1.0 / factor).limit_denominator(200)
    n = len(waveform)
    n_fast = int(round(n * ratio.numerator / ratio.denominator))
    fast = _resample_ratio(waveform.samples, ratio.numerator, ratio.denominator, n_fast)
    stretched = time_stretch(fast, n_fast / n, n)
    return Waveform(stretched, waveform.sample_rate)
