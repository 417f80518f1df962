"""Evaluation protocol, quality metrics and the two motivation studies
(feature similarity and cryptographic hashing)."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .audio import Waveform, wav_bytes
from .corpus import Corpus
from .errors import InvalidArgument, SpeechIntegrityError
from .features import MfccConfig, mfcc
from .metrics import ConfusionCounts, eer, lsd, rates, roc_auc, si_snr
from .ops import (BenignKind, BenignOp, Level, MaliciousKind, MaliciousOp, NEEDS_DONOR,
                  apply_benign, apply_malicious)
from .verify import VerifierConfig, hamming, sign, verify
from .watermark import WatermarkConfig

SCHEMA_VERSION = 1
SWEEP_RATIOS = (0.1, 0.25, 0.5, 0.75, 0.9)
LEVELED = (MaliciousKind.DELETION, MaliciousKind.SPLICING, MaliciousKind.SUBSTITUTION,
           MaliciousKind.SILENCING)


@dataclass(frozen=True)
class OpEntry:
    """One row of the operation matrix."""
    family: str
    kind: str
    level: str | None = None
    target_rate: int | None = None
    ratio: float | None = None

    @property
    def name(self) -> str:
        return self.kind if self.ratio is None else f"{self.kind}@{self.ratio:g}"

    @property
    def benign(self) -> bool:
        return self.family == "benign"


def default_op_matrix() -> list:
    rows = [OpEntry("benign", BenignKind.COMPRESSION.value),
            OpEntry("benign", BenignKind.REENCODING.value),
            OpEntry("benign", BenignKind.RESAMPLING.value, target_rate=8000),
            OpEntry("benign", BenignKind.NOISE_SUPPRESSION.value)]
    for kind in LEVELED:
        rows.extend(OpEntry("malicious", kind.value, lv.value) for lv in Level)
    rows.append(OpEntry("malicious", MaliciousKind.REORDERING.value, Level.SEVERE.value))
    rows.append(OpEntry("malicious", MaliciousKind.VOICE_CONVERSION.value))
    return rows


def sweep_op_matrix(ratios=SWEEP_RATIOS) -> list:
    return [OpEntry("malicious", MaliciousKind.TTS_PROXY.value, Level.SEVERE.value, ratio=float(r))
            for r in ratios]


def _op_seed(seed: int, utt: int, op_index: int) -> int:
    return int(np.random.default_rng([seed, utt, op_index, 3]).integers(0, 2 ** 31))


def apply_entry(entry: OpEntry, waveform: Waveform, corpus: Corpus, index: int,
                seed: int) -> Waveform:
    """Run one matrix entry on ``waveform`` (the signed version of
    ``corpus[index]``). Donors are unsigned corpus utterances: same speaker
    for splicing and substitution, a different speaker for the TTS proxy."""
    if entry.benign:
        op = BenignOp(entry.kind, target_rate=entry.target_rate or 8000)
        return apply_benign(waveform, op)
    kind = MaliciousKind(entry.kind)
    rng = np.random.default_rng([seed, index, 5])
    donor = None
    if kind in NEEDS_DONOR:
        j = corpus.donor_index(index, rng, same_speaker=kind is not MaliciousKind.TTS_PROXY)
        donor = corpus[j].load(waveform.sample_rate)
    op = MaliciousOp(kind, entry.level or Level.MINOR, seed, donor, entry.ratio)
    return apply_malicious(waveform, op).output


# ---------------------------------------------------------------------------
# Protocol
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Score:
    uid: str
    op: OpEntry
    distance: int | None
    accepted: bool
    error: str | None = None


def _score_utterance(args) -> tuple[list, dict]:
    corpus, index, config, watermark, matrix, seed = args
    utt = corpus[index]
    sr = config.checkpoint.feature_config.sample_rate
    x = utt.load(sr)
    signed, _ = sign(x, config.checkpoint, watermark)
    quality = {"uid": utt.uid, "si_snr": si_snr(x.samples, signed.samples),
               "lsd": lsd(x.samples, signed.samples)}
    vc = VerifierConfig(config.theta, config.checkpoint, watermark)
    scores = []
    for k, entry in enumerate(matrix):
        op_seed = _op_seed(seed, index, k)
        try:
            out = apply_entry(entry, signed, corpus, index, op_seed)
            res = verify(out, vc)
            scores.append(Score(utt.uid, entry, res.distance, res.accepted))
        except SpeechIntegrityError as exc:
            # a file the verifier cannot process is never accepted
            scores.append(Score(utt.uid, entry, None, False, type(exc).__name__))
    return scores, quality


def _rate_row(name, level, scores, pooled_other, benign: bool) -> dict:
    dists = [s.distance for s in scores]
    counts = ConfusionCounts()
    for s in scores:
        if benign:
            counts += ConfusionCounts(tp=int(s.accepted), fn=int(not s.accepted))
        else:
            counts += ConfusionCounts(fp=int(s.accepted), tn=int(not s.accepted))
    row = {"op": name, "level": level, "n": len(scores), **rates(counts),
           "mean_distance": _mean([d for d in dists if d is not None]),
           "errors": sum(s.error is not None for s in scores), "AUC": None, "EER": None}
    mine = [d for d in dists if d is not None]
    other = [d for d in pooled_other if d is not None]
    if mine and other:
        labels = [benign] * len(mine) + [not benign] * len(other)
        row["AUC"] = roc_auc(mine + other, labels)
        row["EER"] = eer(mine + other, labels)
    return row


def _mean(values):
    return float(np.mean(values)) if len(values) else None


@dataclass
class EvalReport:
    rows: list
    overall: dict
    quality: dict
    config: dict = field(default_factory=dict)
    scores: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "rows": self.rows, "overall": self.overall,
                "quality": self.quality, "config": self.config}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        cols = ["op", "level", "n", "TPR", "FPR", "TNR", "FNR", "AUC", "EER",
                "mean_distance", "errors"]
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in self.rows + [self.overall]:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in cols})
        return buf.getvalue()

    def scores_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["uid", "family", "op", "level", "distance", "accepted", "error"])
        for s in self.scores:
            w.writerow([s.uid, s.op.family, s.op.name, s.op.level or "",
                        "" if s.distance is None else s.distance, int(s.accepted), s.error or ""])
        return buf.getvalue()

    def distances(self, benign: bool) -> list:
        return [s.distance for s in self.scores if s.op.benign == benign and s.distance is not None]


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def run_protocol(corpus: Corpus, config: VerifierConfig, op_matrix=None, seed: int = 0,
                 watermark: WatermarkConfig | None = None, jobs: int = 1) -> EvalReport:
    """Sign every utterance, run every matrix entry on the signed audio and
    verify the result. Benign entries should Accept, malicious ones Reject.

    Per-row AUC/EER compare that row's distances with the pooled distances
    of the opposite class. A row's tampered file that cannot be processed
    (for example too short to verify) counts as a Reject.
    """
    if config.checkpoint is None:
        raise InvalidArgument("the protocol needs a trained checkpoint")
    if len(corpus) < 2:
        raise InvalidArgument("the protocol needs at least two utterances (donors)")
    matrix = list(op_matrix) if op_matrix is not None else default_op_matrix()
    mc = config.checkpoint.model_config
    watermark = watermark or config.watermark or WatermarkConfig(
        fingerprint_bits=mc.fingerprint_bits, segments=mc.segments)
    results = _map(_score_utterance,
                   [(corpus, i, config, watermark, matrix, seed) for i in range(len(corpus))],
                   jobs)
    scores = [s for r in results for s in r[0]]
    quality_rows = [r[1] for r in results]
    pooled = {True: [s.distance for s in scores if s.op.benign],
              False: [s.distance for s in scores if not s.op.benign]}
    rows = []
    for entry in matrix:
        mine = [s for s in scores if s.op == entry]
        rows.append(_rate_row(entry.name, entry.level, mine, pooled[not entry.benign],
                              entry.benign))
    counts = ConfusionCounts()
    for s in scores:
        if s.op.benign:
            counts += ConfusionCounts(tp=int(s.accepted), fn=int(not s.accepted))
        else:
            counts += ConfusionCounts(fp=int(s.accepted), tn=int(not s.accepted))
    overall = {"op": "overall", "level": None, "n": len(scores), **rates(counts),
               "mean_distance": _mean([s.distance for s in scores if s.distance is not None]),
               "errors": sum(s.error is not None for s in scores), "AUC": None, "EER": None}
    b = [d for d in pooled[True] if d is not None]
    m = [d for d in pooled[False] if d is not None]
    if b and m:
        overall["AUC"] = roc_auc(b + m, [True] * len(b) + [False] * len(m))
        overall["EER"] = eer(b + m, [True] * len(b) + [False] * len(m))
    overall["benign_mean"] = _mean(b)
    overall["malicious_mean"] = _mean(m)
    overall["gap_bits"] = None if not (b and m) else float(np.mean(m) - np.mean(b))
    si = [q["si_snr"] for q in quality_rows]
    ls = [q["lsd"] for q in quality_rows]
    quality = {"si_snr_mean": _mean(si), "si_snr_min": min(si), "lsd_mean": _mean(ls),
               "lsd_max": max(ls), "per_utterance": quality_rows}
    cfg = {"theta": int(config.theta), "seed": seed, "watermark": watermark.to_dict(),
           "checkpoint_id": config.checkpoint.checkpoint_id,
           "config_hash": config.checkpoint.meta.get("config_hash")}
    return EvalReport(rows, overall, quality, cfg, scores)


def substitution_sweep(corpus: Corpus, config: VerifierConfig, ratios=SWEEP_RATIOS,
                       seed: int = 0, watermark: WatermarkConfig | None = None,
                       jobs: int = 1) -> EvalReport:
    """Cross-speaker substitution at increasing fractions; every row should Reject."""
    return run_protocol(corpus, config, sweep_op_matrix(ratios), seed, watermark, jobs)


def dev_scores(report: EvalReport) -> list:
    """(distance, is_benign) pairs for threshold calibration; unprocessable
    files are left out."""
    return [(s.distance, s.op.benign) for s in report.scores if s.distance is not None]


# ---------------------------------------------------------------------------
# Motivation studies
# ---------------------------------------------------------------------------

STUDY_CATEGORIES = ("benign", "minor", "moderate", "severe", "cross")


def _study_variants(corpus: Corpus, index: int, seed: int, sr: int):
    """(category, waveform) pairs for one utterance."""
    x = corpus[index].load(sr)
    out = []
    for entry in default_op_matrix()[:4]:
        out.append(("benign", apply_entry(entry, x, corpus, index, seed)))
    for k, kind in enumerate(LEVELED):
        for level in Level:
            e = OpEntry("malicious", kind.value, level.value)
            out.append((level.value, apply_entry(e, x, corpus, index,
                                                 _op_seed(seed, index, 10 + k))))
    rng = np.random.default_rng([seed, index, 11])
    other = corpus.donor_index(index, rng, same_speaker=False)
    out.append(("cross", corpus[other].load(sr)))
    return x, out


@dataclass
class StudyReport:
    kind: str
    values: dict
    bin_edges: np.ndarray

    @property
    def summary(self) -> dict:
        return {c: {"n": len(v), "mean": _mean(v), "std": float(np.std(v)) if v else None,
                    "min": float(min(v)) if v else None, "max": float(max(v)) if v else None}
                for c, v in self.values.items()}

    def means(self) -> dict:
        return {c: _mean(v) for c, v in self.values.items()}

    def histogram_rows(self) -> list:
        rows = []
        for c, v in self.values.items():
            counts, _ = np.histogram(v, bins=self.bin_edges)
            for lo, hi, n in zip(self.bin_edges[:-1], self.bin_edges[1:], counts):
                rows.append({"bin_left": float(lo), "bin_right": float(hi), "count": int(n),
                             "category": c})
        return rows

    def histogram_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["bin_left", "bin_right", "count", "category"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(self.histogram_rows())
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"schema_version": SCHEMA_VERSION, "study": self.kind,
                           "summary": self.summary}, indent=2, sort_keys=True)


STUDY_MFCC = MfccConfig(deltas=False, cmn=False, high_hz=4000.0)


def pooled_mfcc(waveform: Waveform, config: MfccConfig = STUDY_MFCC,
                active_quantile: float = 0.3) -> np.ndarray:
    """Utterance-level vector: c1..c12 averaged over the active frames.

    Frames whose c0 sits at or below the utterance's ``active_quantile``
    are skipped, c0 itself is dropped (level, not content) and the
    filterbank stops at 4 kHz so band-limiting benign ops do not register.
    No cepstral mean normalization, which would zero the average.
    """
    m = mfcc(waveform, config).matrix
    energy = m[:, 0]
    keep = energy > np.quantile(energy, active_quantile)
    if not keep.any():
        keep[:] = True
    return m[keep, 1:].mean(axis=0)


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise InvalidArgument("cosine similarity of a zero vector")
    return float(a @ b / (na * nb))


def similarity_study(corpus: Corpus, feature_kind: str = "mfcc", seed: int = 0,
                     bins: int = 40) -> StudyReport:
    if feature_kind != "mfcc":
        raise InvalidArgument(f"unsupported feature kind {feature_kind!r}")
    if len(corpus.speakers) < 2:
        raise InvalidArgument("the similarity study needs at least two speakers")
    values = {c: [] for c in STUDY_CATEGORIES}
    for i in range(len(corpus)):
        x, variants = _study_variants(corpus, i, seed, 16000)
        ref = pooled_mfcc(x)
        for cat, w in variants:
            values[cat].append(cosine(ref, pooled_mfcc(w)))
    lo = min(min(v) for v in values.values())
    hi = max(max(v) for v in values.values())
    # rounding can push a cosine a hair above 1
    edges = np.linspace(min(lo, 0.0), max(hi, 1.0), bins + 1)
    return StudyReport("similarity", values, edges)


def digest_bits(data: bytes) -> np.ndarray:
    return np.unpackbits(np.frombuffer(hashlib.sha256(data).digest(), dtype=np.uint8))


def audio_digest(waveform: Waveform) -> np.ndarray:
    """SHA-256 bits of the file a publisher would hash: the WAV serialization
    at 32-bit float, so no quantization hides small edits."""
    return digest_bits(wav_bytes(waveform, "32f"))


def sha256_study(corpus: Corpus, seed: int = 0) -> StudyReport:
    values = {c: [] for c in STUDY_CATEGORIES}
    for i in range(len(corpus)):
        x, variants = _study_variants(corpus, i, seed, 16000)
        ref = audio_digest(x)
        for cat, w in variants:
            values[cat].append(hamming(ref, audio_digest(w)))
    values["malicious"] = values["minor"] + values["moderate"] + values["severe"]
    return StudyReport("sha256", values, np.arange(0, 257 + 8, 8, dtype=float))


# ---------------------------------------------------------------------------
# Embedding export
# ---------------------------------------------------------------------------

def export_embeddings(corpus: Corpus, checkpoint, seed: int = 0) -> str:
    """CSV of utterance-level network outputs for each original and its
    benign and malicious variants, for projection with an external tool."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    bits = checkpoint.model_config.fingerprint_bits
    w.writerow(["uid", "category"] + [f"e{k}" for k in range(bits)])
    sr = checkpoint.feature_config.sample_rate
    for i in range(len(corpus)):
        x, variants = _study_variants(corpus, i, seed, sr)
        for cat, wav in [("original", x)] + variants:
            v = checkpoint.fingerprint_vector(wav)
            w.writerow([corpus[i].uid, cat] + [f"{float(e):.8g}" for e in v])
    return buf.getvalue()
