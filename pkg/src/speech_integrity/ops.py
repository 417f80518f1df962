"""Seeded simulators for benign processing and malicious tampering."""

from __future__ import annotations

import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .audio import Waveform, frame_matrix, parse_wav, pitch_shift, read_wav, resample, wav_bytes
from .errors import InfeasibleEdit, InvalidArgument, IoError, TooShort

MIN_DURATION_SECONDS = 2.0
RESAMPLE_TARGETS = (8000, 22050, 44100)


class BenignKind(str, Enum):
    COMPRESSION = "compression"
    REENCODING = "reencoding"
    RESAMPLING = "resampling"
    NOISE_SUPPRESSION = "noise_suppression"


class MaliciousKind(str, Enum):
    DELETION = "deletion"
    SPLICING = "splicing"
    SUBSTITUTION = "substitution"
    SILENCING = "silencing"
    REORDERING = "reordering"
    VOICE_CONVERSION = "voice_conversion"
    TTS_PROXY = "tts_proxy"


class Level(str, Enum):
    MINOR = "minor"
    MODERATE = "moderate"
    SEVERE = "severe"


_RATIOS = {Level.MINOR: 0.1, Level.MODERATE: 0.3, Level.SEVERE: 0.5}
NEEDS_DONOR = frozenset({MaliciousKind.SPLICING, MaliciousKind.SUBSTITUTION, MaliciousKind.TTS_PROXY})
RATIO_KINDS = frozenset({MaliciousKind.DELETION, MaliciousKind.SPLICING,
                         MaliciousKind.SUBSTITUTION, MaliciousKind.SILENCING})


def severity_ratio(level) -> float:
    try:
        return _RATIOS[Level(level)]
    except ValueError:
        raise InvalidArgument(f"unknown severity level {level!r}") from None


@dataclass(frozen=True)
class BenignOp:
    kind: BenignKind
    target_rate: int = 8000
    mute_quantile: float = 0.1
    level_bits: int = 6
    dynamic_range_db: float = 72.0
    cutoff_hz: float = 7000.0
    encoder_command: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", BenignKind(self.kind))
        if self.kind is BenignKind.RESAMPLING and self.target_rate not in RESAMPLE_TARGETS:
            raise InvalidArgument(f"resample target must be one of {RESAMPLE_TARGETS}")
        if not 0.0 <= self.mute_quantile < 1.0:
            raise InvalidArgument("mute_quantile must lie in [0, 1)")
        if not 1 <= self.level_bits <= 16:
            raise InvalidArgument("level_bits must lie in [1, 16]")

    def describe(self) -> dict:
        d = {"family": "benign", "kind": self.kind.value}
        if self.kind is BenignKind.RESAMPLING:
            d["target_rate"] = self.target_rate
        elif self.kind is BenignKind.NOISE_SUPPRESSION:
            d["mute_quantile"] = self.mute_quantile
        elif self.kind is BenignKind.COMPRESSION:
            d["external"] = self.encoder_command is not None
        return d


@dataclass(frozen=True, eq=False)
class MaliciousOp:
    kind: MaliciousKind
    level: Level = Level.MINOR
    seed: int = 0
    donor: Waveform | None = None
    ratio: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", MaliciousKind(self.kind))
        object.__setattr__(self, "level", Level(self.level))
        if self.kind is MaliciousKind.REORDERING and self.level is not Level.SEVERE:
            raise InvalidArgument("reordering is always severe")
        if (self.donor is not None) != (self.kind in NEEDS_DONOR):
            need = "requires" if self.kind in NEEDS_DONOR else "does not take"
            raise InvalidArgument(f"{self.kind.value} {need} a donor waveform")
        if self.ratio is not None:
            if self.kind is not MaliciousKind.TTS_PROXY:
                raise InvalidArgument("an explicit ratio is only accepted by tts_proxy")
            if not 0.0 < self.ratio <= 1.0:
                raise InvalidArgument("ratio must lie in (0, 1]")

    @property
    def alteration_ratio(self) -> float:
        if self.kind is MaliciousKind.TTS_PROXY:
            return 1.0 if self.ratio is None else self.ratio
        if self.kind in (MaliciousKind.VOICE_CONVERSION, MaliciousKind.REORDERING):
            return 1.0
        return severity_ratio(self.level)

    def describe(self) -> dict:
        d = {"family": "malicious", "kind": self.kind.value, "level": self.level.value,
             "seed": self.seed}
        if self.kind is MaliciousKind.TTS_PROXY:
            d["ratio"] = self.alteration_ratio
        return d


@dataclass(frozen=True, eq=False)
class TamperRecord:
    output: Waveform
    edited_intervals: list = field(default_factory=list)
    op: MaliciousOp | None = None

    def __post_init__(self):
        ivs = [(int(a), int(b)) for a, b in self.edited_intervals]
        for a, b in ivs:
            if not 0 <= a < b:
                raise InvalidArgument(f"bad interval ({a}, {b})")
        for (_, b0), (a1, _) in zip(ivs, ivs[1:]):
            if a1 < b0:
                raise InvalidArgument("edited intervals overlap or are unsorted")
        object.__setattr__(self, "edited_intervals", ivs)

    @property
    def edited_samples(self) -> int:
        return sum(b - a for a, b in self.edited_intervals)

    def to_dict(self) -> dict:
        return {"op": self.op.describe() if self.op else None,
                "sample_rate": self.output.sample_rate,
                "output_samples": len(self.output),
                "edited_intervals": [list(iv) for iv in self.edited_intervals]}


# ---------------------------------------------------------------------------
# Voice activity
# ---------------------------------------------------------------------------

def voiced_regions(waveform: Waveform, frame_ms: float = 20.0, hop_ms: float = 10.0,
                   energy_quantile: float = 0.2, merge_gap_frames: int = 3) -> list[tuple[int, int]]:
    """Sample intervals of frames whose RMS reaches the ``energy_quantile``
    of all frame RMS values (and is non-zero); runs separated by fewer than
    ``merge_gap_frames`` quiet frames are merged."""
    sr = waveform.sample_rate
    frame = max(1, int(round(frame_ms * sr / 1000.0)))
    hop = max(1, int(round(hop_ms * sr / 1000.0)))
    if len(waveform) < frame:
        raise TooShort("waveform shorter than one VAD frame")
    rms = np.sqrt(np.mean(np.square(frame_matrix(waveform.samples, frame, hop)), axis=1))
    threshold = np.quantile(rms, energy_quantile)
    active = (rms >= threshold) & (rms > 0)
    runs = []
    start = None
    for i, on in enumerate(active):
        if on and start is None:
            start = i
        elif not on and start is not None:
            runs.append([start, i - 1])
            start = None
    if start is not None:
        runs.append([start, len(active) - 1])
    merged = []
    for run in runs:
        if merged and run[0] - merged[-1][1] - 1 < merge_gap_frames:
            merged[-1][1] = run[1]
        else:
            merged.append(run)
    n_frames = len(active)
    out = []
    for a, b in merged:
        end = len(waveform) if b == n_frames - 1 else b * hop + frame
        out.append((a * hop, end))
    return out


# ---------------------------------------------------------------------------
# Benign operations
# ---------------------------------------------------------------------------

def _stft(x, n_fft, hop, window):
    frames = frame_matrix(x, n_fft, hop)
    return np.fft.rfft(frames * window, axis=1)


def _istft(spec, n_fft, hop, window, length):
    frames = np.fft.irfft(spec, n=n_fft, axis=1) * window
    total = (frames.shape[0] - 1) * hop + n_fft
    out = np.zeros(total)
    norm = np.zeros(total)
    for i in range(frames.shape[0]):
        out[i * hop:i * hop + n_fft] += frames[i]
        norm[i * hop:i * hop + n_fft] += window ** 2
    out /= np.maximum(norm, 1e-8)
    return out[:length]


def compress_proxy(waveform: Waveform, level_bits: int = 6, dynamic_range_db: float = 72.0,
                   cutoff_hz: float = 7000.0, n_fft: int = 1024, hop: int = 256) -> Waveform:
    """Codec stand-in: log-magnitude quantization plus a high-band cut."""
    x = waveform.samples
    n = x.shape[0]
    pad = n_fft // 2
    padded = np.pad(x, (pad, pad + (-(n + 2 * pad - n_fft) % hop)), mode="reflect")
    window = np.hanning(n_fft + 1)[:n_fft]
    spec = _stft(padded, n_fft, hop, window)
    mag = np.abs(spec)
    phase = np.exp(1j * np.angle(spec))
    peak = mag.max()
    if peak <= 0:
        return Waveform(x, waveform.sample_rate)
    db = 20.0 * np.log10(np.maximum(mag, 1e-300) / peak)
    step = dynamic_range_db / (2 ** level_bits - 1)
    q = -np.round(-db / step) * step
    qmag = np.where(db < -dynamic_range_db, 0.0, peak * 10.0 ** (q / 20.0))
    freqs = np.fft.rfftfreq(n_fft, 1.0 / waveform.sample_rate)
    qmag[:, freqs > cutoff_hz] = 0.0
    y = _istft(qmag * phase, n_fft, hop, window, padded.shape[0])[pad:pad + n]
    return Waveform(y, waveform.sample_rate)


def _external_encode(waveform: Waveform, template: str) -> Waveform:
    with tempfile.TemporaryDirectory() as tmp:
        src = os.path.join(tmp, "in.wav")
        dst = os.path.join(tmp, "out.wav")
        with open(src, "wb") as f:
            f.write(wav_bytes(waveform, "16"))
        cmd = [part.format(input=src, output=dst) for part in shlex.split(template)]
        proc = subprocess.run(cmd, capture_output=True)
        if proc.returncode != 0 or not os.path.exists(dst):
            raise IoError(f"encoder command failed ({proc.returncode}): "
                          f"{proc.stderr.decode(errors='replace')[-400:]}")
        out = read_wav(dst)
    if out.sample_rate != waveform.sample_rate:
        out = resample(out, waveform.sample_rate)
    return Waveform(_fit_length(out.samples, len(waveform)), waveform.sample_rate)


def _fit_length(x, n):
    if x.shape[0] >= n:
        return x[:n]
    return np.concatenate([x, np.zeros(n - x.shape[0])])


def suppress_noise(waveform: Waveform, quantile: float = 0.1, frame_ms: float = 20.0,
                   hop_ms: float = 10.0) -> Waveform:
    """Mute frames whose RMS lies strictly below the given quantile of frame
    RMS values. A sample is zeroed only when every frame covering it is
    muted, so kept frames come through bit-exact."""
    sr = waveform.sample_rate
    frame = int(round(frame_ms * sr / 1000.0))
    hop = int(round(hop_ms * sr / 1000.0))
    x = waveform.samples
    frames = frame_matrix(x, frame, hop)
    if frames.shape[0] == 0:
        return Waveform(x, sr)
    rms = np.sqrt(np.mean(np.square(frames), axis=1))
    muted = rms < np.quantile(rms, quantile)
    keep = np.zeros(x.shape[0] + 1)
    covered = np.zeros(x.shape[0] + 1)
    starts = np.arange(frames.shape[0]) * hop
    np.add.at(covered, starts, 1.0)
    np.add.at(covered, starts + frame, -1.0)
    np.add.at(keep, starts[~muted], 1.0)
    np.add.at(keep, starts[~muted] + frame, -1.0)
    covered = np.cumsum(covered)[:-1]
    keep = np.cumsum(keep)[:-1]
    zero = (covered > 0.5) & (keep < 0.5)
    y = x.copy()
    y[zero] = 0.0
    return Waveform(y, sr)


def apply_benign(waveform: Waveform, op: BenignOp) -> Waveform:
    if waveform.duration_seconds < MIN_DURATION_SECONDS:
        raise TooShort(f"benign ops need at least {MIN_DURATION_SECONDS} s of audio")
    kind = op.kind
    if kind is BenignKind.REENCODING:
        return parse_wav(wav_bytes(waveform, "16"))[0]
    if kind is BenignKind.RESAMPLING:
        there = resample(waveform, op.target_rate)
        back = resample(there, waveform.sample_rate)
        return Waveform(_fit_length(back.samples, len(waveform)), waveform.sample_rate)
    if kind is BenignKind.NOISE_SUPPRESSION:
        return suppress_noise(waveform, op.mute_quantile)
    if op.encoder_command:
        return _external_encode(waveform, op.encoder_command)
    return compress_proxy(waveform, op.level_bits, op.dynamic_range_db, op.cutoff_hz)


# ---------------------------------------------------------------------------
# Malicious operations
# ---------------------------------------------------------------------------

_CHUNK_SECONDS = (0.2, 0.6)


def _chunk_lengths(rng, total: int, sr: int) -> list[int]:
    lo, hi = (int(s * sr) for s in _CHUNK_SECONDS)
    lengths = []
    remaining = total
    while remaining > 0:
        if remaining <= hi:
            lengths.append(remaining)
            break
        size = int(rng.integers(lo, min(hi, remaining - lo) + 1))
        lengths.append(size)
        remaining -= size
    return lengths


def _to_timeline(regions):
    """Offsets of each voiced region on the concatenated voiced timeline."""
    offsets = np.cumsum([0] + [b - a for a, b in regions])
    return offsets


def _timeline_to_intervals(regions, offsets, start, stop):
    """Map [start, stop) on the voiced timeline back to sample intervals."""
    out = []
    for (a, b), off in zip(regions, offsets[:-1]):
        lo = max(start, off)
        hi = min(stop, off + (b - a))
        if hi > lo:
            out.append((a + lo - off, a + hi - off))
    return out


def _merge(intervals):
    merged = []
    for a, b in sorted(intervals):
        if merged and a <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(b, merged[-1][1]))
        else:
            merged.append((a, b))
    return merged


def _place_chunks(rng, regions, lengths):
    """Non-overlapping random placement of chunks on the voiced timeline.
    Returns sample intervals (a chunk straddling a pause is split)."""
    offsets = _to_timeline(regions)
    capacity = int(offsets[-1])
    free = capacity - sum(lengths)
    if free < 0:
        raise InfeasibleEdit(f"voiced audio ({capacity} samples) cannot hold "
                             f"{sum(lengths)} edited samples")
    cuts = np.sort(rng.integers(0, free + 1, size=len(lengths)))
    order = rng.permutation(len(lengths))
    intervals = []
    used = 0
    for k, idx in enumerate(order):
        start = int(cuts[k]) + used
        intervals.extend(_timeline_to_intervals(regions, offsets, start, start + lengths[idx]))
        used += lengths[idx]
    return _merge(intervals)


def _donor_samples(rng, donor: Waveform, length: int, sample_rate: int) -> np.ndarray:
    if donor.sample_rate != sample_rate:
        donor = resample(donor, sample_rate)
    d = donor.samples
    if d.shape[0] == 0:
        raise InvalidArgument("donor waveform is empty")
    if d.shape[0] >= length:
        start = int(rng.integers(0, d.shape[0] - length + 1))
        return d[start:start + length]
    reps = -(-length // d.shape[0])
    return np.tile(d, reps)[:length]


def _voiced_window(rng, waveform: Waveform, length: int) -> int:
    """Start of a ``length``-sample window centred on a random voiced sample
    (anywhere when nothing is voiced), clipped to the signal."""
    n = len(waveform)
    if length >= n:
        return 0
    regions = voiced_regions(waveform) if waveform.duration_seconds * 1000 >= 25 else []
    if regions:
        offsets = _to_timeline(regions)
        p = int(rng.integers(0, int(offsets[-1])))
        k = int(np.searchsorted(offsets, p, side="right")) - 1
        centre = regions[k][0] + p - int(offsets[k])
        return int(np.clip(centre - length // 2, 0, n - length))
    return int(rng.integers(0, n - length + 1))


def _voiced_or_fail(waveform):
    regions = voiced_regions(waveform)
    if not regions:
        raise InfeasibleEdit("no voiced region found")
    return regions


def _reorder(rng, waveform, regions):
    sr = waveform.sample_rate
    n = len(waveform)
    min_chunk = int(0.2 * sr)
    candidates = []
    for a, b in regions:
        candidates.extend(range(a, b, max(1, sr // 100)))
    candidates = [c for c in candidates if min_chunk <= c <= n - min_chunk]
    for _ in range(200):
        k = int(rng.integers(4, 9))
        if len(candidates) < k - 1:
            raise InfeasibleEdit("too little voiced audio to cut reordering chunks")
        cuts = sorted(rng.choice(candidates, size=k - 1, replace=False).tolist())
        bounds = [0] + cuts + [n]
        if min(b - a for a, b in zip(bounds, bounds[1:])) < min_chunk:
            continue
        perm = rng.permutation(k)
        while np.array_equal(perm, np.arange(k)):
            perm = rng.permutation(k)
        chunks = [waveform.samples[bounds[i]:bounds[i + 1]] for i in perm]
        out = np.concatenate(chunks)
        moved = []
        pos = 0
        for slot, i in enumerate(perm):
            length = bounds[i + 1] - bounds[i]
            if i != slot:
                moved.append((pos, pos + length))
            pos += length
        return out, _merge(moved)
    raise InfeasibleEdit("could not cut reordering chunks of at least 0.2 s")


def apply_malicious(waveform: Waveform, op: MaliciousOp) -> TamperRecord:
    """Apply a tampering op. Deletion intervals refer to the input signal;
    every other kind records intervals in output coordinates."""
    rng = np.random.default_rng([op.seed, list(MaliciousKind).index(op.kind)])
    sr = waveform.sample_rate
    n = len(waveform)
    x = waveform.samples
    kind = op.kind

    if kind is MaliciousKind.VOICE_CONVERSION:
        return TamperRecord(pitch_shift(waveform, 4.0), [(0, n)] if n else [], op)

    if kind is MaliciousKind.TTS_PROXY:
        span = int(round(op.alteration_ratio * n))
        if span == 0:
            raise InfeasibleEdit("substitution span rounds to zero samples")
        # a partial substitution replaces speech with the donor's speech:
        # both windows are centred on a voiced sample
        start = _voiced_window(rng, waveform, span)
        donor = op.donor if op.donor.sample_rate == sr else resample(op.donor, sr)
        y = x.copy()
        if len(donor) >= span:
            at = _voiced_window(rng, donor, span)
            y[start:start + span] = donor.samples[at:at + span]
        else:
            y[start:start + span] = _donor_samples(rng, donor, span, sr)
        return TamperRecord(Waveform(y, sr), [(start, start + span)], op)

    regions = _voiced_or_fail(waveform)
    if kind is MaliciousKind.REORDERING:
        y, moved = _reorder(rng, waveform, regions)
        return TamperRecord(Waveform(y, sr), moved, op)

    target = int(round(op.alteration_ratio * n))
    lengths = _chunk_lengths(rng, target, sr)

    if kind is MaliciousKind.SPLICING:
        offsets = _to_timeline(regions)
        points = np.sort(rng.integers(0, int(offsets[-1]) + 1, size=len(lengths)))
        inserts = []
        for p in points:
            p = int(p)
            for (a, b), off in zip(regions, offsets[:-1]):
                if off <= p <= off + (b - a):
                    inserts.append(a + p - off)
                    break
        pieces, intervals = [], []
        prev = 0
        shift = 0
        for at, length in zip(inserts, lengths):
            pieces.append(x[prev:at])
            pieces.append(_donor_samples(rng, op.donor, length, sr))
            intervals.append((at + shift, at + shift + length))
            shift += length
            prev = at
        pieces.append(x[prev:])
        return TamperRecord(Waveform(np.concatenate(pieces), sr), _merge(intervals), op)

    intervals = _place_chunks(rng, regions, lengths)
    if kind is MaliciousKind.DELETION:
        keep = np.ones(n, dtype=bool)
        for a, b in intervals:
            keep[a:b] = False
        return TamperRecord(Waveform(x[keep], sr), intervals, op)
    y = x.copy()
    for a, b in intervals:
        if kind is MaliciousKind.SILENCING:
            y[a:b] = 0.0
        else:
            y[a:b] = _donor_samples(rng, op.donor, b - a, sr)
    return TamperRecord(Waveform(y, sr), intervals, op)


# ---------------------------------------------------------------------------
# Op-spec strings, e.g. "benign:resampling:8000" or "malicious:silencing:moderate"
# ---------------------------------------------------------------------------

def parse_op_spec(spec: str):
    """Returns ("benign", BenignOp) or ("malicious", kind, level, ratio)."""
    parts = spec.strip().lower().split(":")
    try:
        if parts[0] == "benign" and len(parts) in (2, 3):
            kind = BenignKind(parts[1])
            if len(parts) == 3:
                if kind is BenignKind.RESAMPLING:
                    return ("benign", BenignOp(kind, target_rate=int(parts[2])))
                if kind is BenignKind.NOISE_SUPPRESSION:
                    return ("benign", BenignOp(kind, mute_quantile=float(parts[2])))
                raise InvalidArgument(f"{kind.value} takes no parameter")
            return ("benign", BenignOp(kind))
        if parts[0] == "malicious" and len(parts) in (2, 3):
            kind = MaliciousKind(parts[1])
            if kind is MaliciousKind.TTS_PROXY:
                ratio = float(parts[2]) if len(parts) == 3 else None
                return ("malicious", kind, Level.SEVERE, ratio)
            if kind is MaliciousKind.REORDERING:
                level = Level(parts[2]) if len(parts) == 3 else Level.SEVERE
            else:
                level = Level(parts[2]) if len(parts) == 3 else Level.MINOR
            return ("malicious", kind, level, None)
    except ValueError as exc:
        raise InvalidArgument(f"invalid op spec {spec!r}: {exc}") from None
    raise InvalidArgument(f"invalid op spec {spec!r}")
