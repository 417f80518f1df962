"""Segment-wise QIM watermark carrying the binary fingerprint.

Each segment carries ``bits_per_segment`` bits. A bit is written into
``repetition`` STFT cells (frame, bin) by quantizing the log-magnitude of the
cell onto one of two interleaved lattices; phases are kept. Carrier frames
are the even frames of a 2048/1024 Hann STFT lying fully inside the segment,
so they never overlap, and carrier bins sit on a 3-bin grid so the leakage of
one cell's correction (the Hann-squared kernel reaches two bins) never lands
on another carrier. Embedding is therefore exact: extract(embed(x, b)) == b.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from .audio import Waveform
from .errors import InvalidArgument, TooShort


@dataclass(frozen=True)
class WatermarkConfig:
    segments: int = 16
    fingerprint_bits: int = 256
    n_fft: int = 2048
    hop: int = 1024
    low_hz: float = 500.0
    high_hz: float = 4000.0
    bin_spacing: int = 3
    repetition: int = 8
    step: float = 0.2
    floor: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.segments < 1 or self.fingerprint_bits % self.segments:
            raise InvalidArgument("fingerprint_bits must be a positive multiple of segments")
        if self.step <= 0 or self.floor <= 0:
            raise InvalidArgument("quantization step and floor must be positive")
        if self.bin_spacing < 3:
            raise InvalidArgument("carrier bins closer than 3 bins interfere")
        if self.repetition < 1:
            raise InvalidArgument("repetition must be >= 1")

    @property
    def bits_per_segment(self) -> int:
        return self.fingerprint_bits // self.segments

    @property
    def min_segment(self) -> int:
        return self.n_fft

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WatermarkConfig":
        return cls(**d)


@dataclass(frozen=True)
class SegmentationPlan:
    segments: int
    boundaries: tuple
    bits_per_segment: int = 16

    def bounds(self, n: int) -> tuple[int, int]:
        return self.boundaries[n], self.boundaries[n + 1]


def plan_segments(n_samples: int, segments: int, min_segment: int = 1,
                  bits_per_segment: int = 16) -> SegmentationPlan:
    """First N-1 segments hold floor(len/N) samples, the last absorbs the rest."""
    if segments < 1:
        raise InvalidArgument("segment count must be >= 1")
    base = n_samples // segments
    if base < max(1, min_segment):
        raise TooShort(f"{n_samples} samples cannot form {segments} segments of "
                       f"at least {max(1, min_segment)} samples")
    bounds = [i * base for i in range(segments)] + [n_samples]
    return SegmentationPlan(segments, tuple(bounds), bits_per_segment)


def qim_quantize(value, step: float, bit: int, offset: float = 0.0):
    """Nearest point of the bit's lattice: offset + k*step for bit -1,
    offset + k*step + step/2 for bit +1."""
    shift = offset + (step / 2.0 if bit > 0 else 0.0)
    return np.round((np.asarray(value, dtype=np.float64) - shift) / step) * step + shift


def qim_decode(value, step: float, offset: float = 0.0):
    """Bit of the nearer lattice (+1 or -1) for each value."""
    frac = np.mod((np.asarray(value, dtype=np.float64) - offset) / step, 1.0)
    return np.where((frac >= 0.25) & (frac < 0.75), 1, -1).astype(np.int8)


def carrier_bins(config: WatermarkConfig, sample_rate: int) -> np.ndarray:
    lo = int(math.ceil(config.low_hz * config.n_fft / sample_rate))
    hi = int(math.floor(config.high_hz * config.n_fft / sample_rate))
    bins = np.arange(max(lo, 3), min(hi, config.n_fft // 2 - 3) + 1, config.bin_spacing)
    return bins


@lru_cache(maxsize=256)
def _layout(seed: int, frames: int, slots: int, bits: int, repetition: int):
    """Cell (frame, slot) for every (bit, repetition), disjoint and seeded.

    All repetitions of a bit share one frame (bits are dealt to frames in
    contiguous blocks), so an edit covering part of a segment fully
    randomizes the bits of the frames it hits instead of diluting every
    bit's vote.
    """
    g = np.arange(bits * repetition)
    b = g // repetition
    frame = b * frames // bits
    first = (np.arange(frames) * bits + frames - 1) // frames   # first bit in each frame
    pos = (b - first[frame]) * repetition + g % repetition
    if pos.max() >= slots:
        raise TooShort(f"segment holds {frames * slots} carrier cells, "
                       f"{bits * repetition} needed")
    rng = np.random.default_rng([seed, frames, slots])
    shift = int(rng.integers(0, frames))
    perms = np.stack([rng.permutation(slots) for _ in range(frames)])
    f_idx = ((frame + shift) % frames).reshape(bits, repetition)
    s_idx = perms[f_idx.ravel(), pos].reshape(bits, repetition)
    f_idx.flags.writeable = False
    s_idx.flags.writeable = False
    return f_idx, s_idx


def _window(n_fft):
    return np.hanning(n_fft + 1)[:n_fft]


def _segment_cells(x, start, stop, config, bins):
    """Carrier frames of one segment: their start offsets and normalized spectra."""
    n_fft = config.n_fft
    frames = (stop - start) // n_fft
    block = x[start:start + frames * n_fft].reshape(frames, n_fft)
    w = _window(n_fft)
    spec = np.fft.rfft(block * w, axis=1)[:, bins] / w.sum()
    return frames, spec


def _plan(n, config, sample_rate):
    bins = carrier_bins(config, sample_rate)
    if bins.shape[0] == 0:
        raise InvalidArgument(f"no carrier bins between {config.low_hz} and {config.high_hz} Hz")
    plan = plan_segments(n, config.segments, config.min_segment, config.bits_per_segment)
    return plan, bins


def embed(waveform: Waveform, bits, config: WatermarkConfig | None = None) -> Waveform:
    config = config or WatermarkConfig()
    bits = np.asarray(bits)
    if bits.shape != (config.fingerprint_bits,) or not np.all(np.abs(bits) == 1):
        raise InvalidArgument(f"payload must be {config.fingerprint_bits} values in {{-1, +1}}")
    x = waveform.samples.copy()
    plan, bins = _plan(len(waveform), config, waveform.sample_rate)
    n_fft = config.n_fft
    w = _window(n_fft)
    gain = 2.0 * w.sum() / np.sum(w * w)
    anchor = math.log(config.floor)
    per = config.bits_per_segment
    for seg in range(plan.segments):
        start, stop = plan.bounds(seg)
        frames, spec = _segment_cells(x, start, stop, config, bins)
        f_idx, s_idx = _layout(config.seed, frames, bins.shape[0], per, config.repetition)
        payload = bits[seg * per:(seg + 1) * per]
        cells = spec[f_idx, s_idx]
        mag = np.abs(cells)
        value = np.log(np.maximum(mag, config.floor))
        target = np.where(payload[:, None] > 0,
                          qim_quantize(value, config.step, 1, anchor),
                          qim_quantize(value, config.step, -1, anchor))
        # keep every carrier strictly above the floor: below it a cell reads as an erasure
        target = np.where(target < anchor + 0.25 * config.step, target + config.step, target)
        unit = np.where(mag > 0, cells / np.where(mag > 0, mag, 1.0), 1.0)
        delta = (np.exp(target) - mag) * unit * gain
        # sum of Hann-windowed cosines, one per cell, via an inverse real FFT
        spectrum = np.zeros((frames, n_fft // 2 + 1), dtype=np.complex128)
        spectrum[f_idx.ravel(), bins[s_idx.ravel()]] = delta.ravel() * (n_fft / 2.0)
        block = x[start:start + frames * n_fft].reshape(frames, n_fft)
        block += w * np.fft.irfft(spectrum, n=n_fft, axis=1)
    return Waveform(x, waveform.sample_rate)


def _cell_values(waveform: Waveform, config: WatermarkConfig):
    """Log-magnitudes (bits, repetition) of every carrier cell plus an
    erasure mask for cells below the floor."""
    x = waveform.samples
    plan, bins = _plan(len(waveform), config, waveform.sample_rate)
    per = config.bits_per_segment
    values = np.empty((config.fingerprint_bits, config.repetition))
    erased = np.empty(values.shape, dtype=bool)
    for seg in range(plan.segments):
        start, stop = plan.bounds(seg)
        frames, spec = _segment_cells(x, start, stop, config, bins)
        f_idx, s_idx = _layout(config.seed, frames, bins.shape[0], per, config.repetition)
        mag = np.abs(spec[f_idx, s_idx])
        values[seg * per:(seg + 1) * per] = np.log(np.maximum(mag, config.floor))
        erased[seg * per:(seg + 1) * per] = mag < config.floor
    return values, erased


def extract_cells(waveform: Waveform, config: WatermarkConfig | None = None) -> np.ndarray:
    """Per-cell hard decisions (bits, repetition); erased cells read 0."""
    config = config or WatermarkConfig()
    values, erased = _cell_values(waveform, config)
    votes = qim_decode(values, config.step, math.log(config.floor))
    return np.where(erased, 0, votes).astype(np.int8)


def extract(waveform: Waveform, config: WatermarkConfig | None = None) -> np.ndarray:
    """Majority vote over each bit's non-erased cells.

    A tied vote falls back to the summed soft distance to the two lattices,
    and a bit with no usable cell at all reads +1. Never fails on
    unwatermarked audio: it then returns arbitrary bits.
    """
    config = config or WatermarkConfig()
    values, erased = _cell_values(waveform, config)
    anchor = math.log(config.floor)
    hard = np.where(erased, 0, qim_decode(values, config.step, anchor)).astype(np.int64)
    soft = np.where(erased, 0.0, -np.cos(2 * np.pi * (values - anchor) / config.step))
    score = hard.sum(axis=1).astype(np.float64)
    tied = score == 0
    score[tied] = soft[tied].sum(axis=1)
    return np.where(score >= 0, 1, -1).astype(np.int8)
