"""Corpus manifests (JSON lines) and a synthetic speech-like utterance generator."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from .audio import Waveform, read_wav, resample, write_wav
from .errors import InvalidArgument, IoError, ParseError

MIN_SECONDS = 2.0
MAX_SECONDS = 20.0


@dataclass(eq=False)
class Utterance:
    uid: str
    speaker_id: str | None = None
    path: str | None = None
    duration: float | None = None
    _waveform: Waveform | None = field(default=None, repr=False)

    def load(self, sample_rate: int | None = None) -> Waveform:
        if self._waveform is None:
            if self.path is None:
                raise InvalidArgument(f"utterance {self.uid} has neither audio nor a path")
            self._waveform = read_wav(self.path)
        w = self._waveform
        if sample_rate is not None and w.sample_rate != sample_rate:
            w = resample(w, sample_rate)
        return w


@dataclass
class Corpus:
    utterances: list

    def __len__(self) -> int:
        return len(self.utterances)

    def __getitem__(self, i) -> Utterance:
        return self.utterances[i]

    @property
    def speakers(self) -> list:
        return sorted({u.speaker_id for u in self.utterances if u.speaker_id is not None})

    def filter_duration(self, lo: float = MIN_SECONDS, hi: float = MAX_SECONDS) -> "Corpus":
        keep = []
        for u in self.utterances:
            d = u.duration if u.duration is not None else u.load().duration_seconds
            if lo <= d <= hi:
                keep.append(u)
        return Corpus(keep)

    def split(self, *sizes) -> list["Corpus"]:
        out, start = [], 0
        for size in sizes:
            out.append(Corpus(self.utterances[start:start + size]))
            start += size
        return out

    def donor_index(self, index: int, rng: np.random.Generator, same_speaker: bool) -> int:
        """Another utterance: same speaker when labels exist and ``same_speaker``,
        a different speaker when not; falls back to any other utterance."""
        if len(self.utterances) < 2:
            raise InvalidArgument("need at least two utterances to pick a donor")
        spk = self.utterances[index].speaker_id
        pool = [j for j, u in enumerate(self.utterances) if j != index and spk is not None
                and u.speaker_id is not None and (u.speaker_id == spk) == same_speaker]
        if not pool:
            pool = [j for j in range(len(self.utterances)) if j != index]
        return int(pool[int(rng.integers(0, len(pool)))])


def read_manifest(path) -> Corpus:
    """JSON lines of {"path", "speaker_id"?, "duration"?}; relative paths
    resolve against the manifest's directory."""
    if not os.path.exists(path):
        raise IoError(f"manifest not found: {path}")
    base = os.path.dirname(os.path.abspath(path))
    utts = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                p = rec["path"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(f"{path}:{lineno}: bad manifest entry ({exc})") from None
            full = p if os.path.isabs(p) else os.path.join(base, p)
            utts.append(Utterance(uid=rec.get("id", os.path.splitext(os.path.basename(p))[0]),
                                  speaker_id=rec.get("speaker_id"), path=full,
                                  duration=rec.get("duration")))
    return Corpus(utts)


def write_manifest(corpus: Corpus, path) -> None:
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w", encoding="utf-8") as f:
        for u in corpus.utterances:
            rec = {"id": u.uid, "path": os.path.relpath(u.path, base)}
            if u.speaker_id is not None:
                rec["speaker_id"] = u.speaker_id
            if u.duration is not None:
                rec["duration"] = round(u.duration, 6)
            f.write(json.dumps(rec) + "\n")


def scan_directory(directory) -> Corpus:
    """Every *.wav below ``directory``; the parent folder name is the speaker."""
    utts = []
    for root, _, files in sorted(os.walk(directory)):
        for name in sorted(files):
            if name.lower().endswith(".wav"):
                full = os.path.join(root, name)
                spk = os.path.basename(root) if os.path.abspath(root) != os.path.abspath(directory) else None
                utts.append(Utterance(uid=os.path.splitext(name)[0], speaker_id=spk, path=full))
    return Corpus(utts)


# ---------------------------------------------------------------------------
# Synthetic speech-like audio
# ---------------------------------------------------------------------------

# (F1, F2, F3) in Hz for a handful of vowel qualities
_VOWELS = np.array([
    [730, 1090, 2440], [270, 2290, 3010], [300, 870, 2240], [530, 1840, 2480],
    [660, 1720, 2410], [570, 840, 2410], [440, 1020, 2240], [490, 1350, 1690],
])
_BANDWIDTHS = np.array([90.0, 110.0, 170.0])


@dataclass(frozen=True)
class Speaker:
    f0: float
    formant_scale: float
    tilt: float
    breath: float


def make_speaker(rng: np.random.Generator) -> Speaker:
    return Speaker(f0=float(rng.uniform(90, 240)), formant_scale=float(rng.uniform(0.85, 1.2)),
                   tilt=float(rng.uniform(0.6, 0.95)), breath=float(rng.uniform(0.01, 0.06)))


def _resonator(x, freq, bw, sr):
    r = np.exp(-np.pi * bw / sr)
    theta = 2 * np.pi * freq / sr
    a = [1.0, -2 * r * np.cos(theta), r * r]
    return lfilter([1.0 - r], a, x)


def _envelope(n, sr, attack=0.02):
    k = max(1, min(int(attack * sr), n // 2))
    env = np.ones(n)
    ramp = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, k))
    env[:k] = ramp
    env[n - k:] = ramp[::-1]
    return env


def synth_utterance(rng: np.random.Generator, speaker: Speaker, seconds: float,
                    sample_rate: int = 16000, noise_db: float = -55.0) -> Waveform:
    """Voiced syllables (glottal pulse train through three formant
    resonators), fricative noise bursts and short pauses."""
    n_total = int(seconds * sample_rate)
    out = np.zeros(n_total)
    pos = int(rng.uniform(0.05, 0.2) * sample_rate)
    phase = 0.0
    while pos < n_total - int(0.1 * sample_rate):
        for _ in range(int(rng.integers(1, 5))):
            if rng.random() < 0.3:
                n = int(rng.uniform(0.05, 0.12) * sample_rate)
                noise = rng.standard_normal(n)
                centre = rng.uniform(3000, 6500)
                burst = _resonator(noise, centre, 1500.0, sample_rate) * 0.15
                seg = burst * _envelope(n, sample_rate, 0.01)
            else:
                n = int(rng.uniform(0.08, 0.3) * sample_rate)
                v0, v1 = _VOWELS[rng.integers(0, len(_VOWELS), size=2)]
                glide = np.linspace(0, 1, n)[:, None]
                formants = (v0 * (1 - glide) + v1 * glide) * speaker.formant_scale
                f0 = speaker.f0 * (1 + 0.15 * rng.uniform(-1, 1)) * \
                    (1 + 0.08 * np.sin(2 * np.pi * rng.uniform(1, 4) * np.arange(n) / sample_rate))
                ph = phase + np.cumsum(f0) / sample_rate
                phase = ph[-1] % 1.0
                pulses = np.diff(np.floor(ph), prepend=np.floor(ph[0])).astype(float)
                source = lfilter([1.0], [1.0, -speaker.tilt], pulses)
                source += speaker.breath * rng.standard_normal(n)
                seg = np.zeros(n)
                for b in range(0, n, 160):
                    e = min(n, b + 160)
                    block = source[max(0, b - 320):e]
                    y = np.zeros_like(block)
                    for k in range(3):
                        y += _resonator(block, formants[b, k], _BANDWIDTHS[k], sample_rate) / (k + 1)
                    seg[b:e] = y[-(e - b):]
                seg *= _envelope(n, sample_rate, 0.03)
            end = min(n_total, pos + seg.shape[0])
            out[pos:end] += seg[:end - pos] * rng.uniform(0.5, 1.0)
            pos = end
            if pos >= n_total:
                break
        pos += int(rng.uniform(0.08, 0.35) * sample_rate)
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= 0.5 / peak
    out += 10 ** (noise_db / 20.0) * rng.standard_normal(n_total)
    return Waveform(np.clip(out, -1.0, 1.0), sample_rate)


def synthetic_corpus(n: int, seed: int = 0, speakers: int = 20, seconds=(5.0, 8.0),
                     sample_rate: int = 16000, start_index: int = 0) -> Corpus:
    """In-memory corpus of ``n`` speech-like utterances spread over ``speakers``
    voices. Utterance i depends only on (seed, i), so corpora with the same
    seed share a prefix."""
    spk_rng = np.random.default_rng([seed, 0])
    voices = [make_speaker(spk_rng) for _ in range(speakers)]
    utts = []
    for i in range(start_index, start_index + n):
        rng = np.random.default_rng([seed, 1, i])
        s = i % speakers
        dur = float(rng.uniform(*seconds))
        w = synth_utterance(rng, voices[s], dur, sample_rate)
        utts.append(Utterance(uid=f"syn{seed}_{i:04d}", speaker_id=f"spk{s:02d}",
                              duration=w.duration_seconds, _waveform=w))
    return Corpus(utts)


def write_corpus(corpus: Corpus, directory, manifest_name: str = "manifest.jsonl") -> str:
    os.makedirs(directory, exist_ok=True)
    for u in corpus.utterances:
        w = u.load()
        path = os.path.join(directory, f"{u.uid}.wav")
        write_wav(w, path, "16")
        u.path = path
        u.duration = w.duration_seconds
    manifest = os.path.join(directory, manifest_name)
    write_manifest(corpus, manifest)
    return manifest
