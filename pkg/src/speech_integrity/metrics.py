"""Detection and audio-quality metrics. Hamming distance is the score
everywhere: low means benign."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import frame_matrix
from .errors import InvalidArgument

SI_SNR_CAP_DB = 100.0


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise InvalidArgument("confusion counts must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


def _ratio(num, den):
    return None if den == 0 else num / den


def rates(counts: ConfusionCounts) -> dict:
    """TPR/FPR/TNR/FNR with benign as the positive class. A rate whose
    denominator is zero is None."""
    c = counts
    return {"TPR": _ratio(c.tp, c.tp + c.fn), "FPR": _ratio(c.fp, c.fp + c.tn),
            "TNR": _ratio(c.tn, c.tn + c.fp), "FNR": _ratio(c.fn, c.fn + c.tp)}


def confusion(distances, labels, theta) -> ConfusionCounts:
    """labels: True for benign. Accept iff distance <= theta."""
    d = np.asarray(distances)
    y = np.asarray(labels, dtype=bool)
    acc = d <= theta
    return ConfusionCounts(tp=int(np.sum(acc & y)), fp=int(np.sum(acc & ~y)),
                           tn=int(np.sum(~acc & ~y)), fn=int(np.sum(~acc & y)))


def _split(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape:
        raise InvalidArgument("scores and labels differ in length")
    pos, neg = s[y], s[~y]
    if pos.size == 0 or neg.size == 0:
        raise InvalidArgument("both benign and malicious samples are required")
    return pos, neg


def roc_auc(scores, labels) -> float:
    """Probability that a benign score lies below a malicious one, ties
    counting one half (normalized Mann-Whitney U)."""
    pos, neg = _split(scores, labels)
    allv = np.concatenate([pos, neg])
    order = np.argsort(allv, kind="mergesort")
    ranks = np.empty(allv.shape[0])
    sorted_v = allv[order]
    i = 0
    while i < sorted_v.shape[0]:
        j = i
        while j + 1 < sorted_v.shape[0] and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_neg = ranks[pos.size:].sum()
    u = rank_neg - neg.size * (neg.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def error_rates_at(pos, neg, theta):
    """(FPR, FNR) when accepting scores <= theta."""
    return float(np.mean(neg <= theta)), float(np.mean(pos > theta))


def _thresholds(pos, neg):
    values = np.unique(np.concatenate([pos, neg]))
    return np.concatenate([[values[0] - 1.0], values])


def eer(scores, labels) -> float:
    """Sweep every distinct threshold (plus one below all scores) and return
    (FPR + FNR) / 2 where |FPR - FNR| is smallest; the first such threshold
    in ascending order wins ties."""
    pos, neg = _split(scores, labels)
    best = None
    for theta in _thresholds(pos, neg):
        fpr, fnr = error_rates_at(pos, neg, theta)
        gap = abs(fpr - fnr)
        if best is None or gap < best[0]:
            best = (gap, 0.5 * (fpr + fnr))
    return best[1]


def si_snr(reference, test) -> float:
    r = np.asarray(reference, dtype=np.float64)
    t = np.asarray(test, dtype=np.float64)
    if r.shape != t.shape:
        raise InvalidArgument("si_snr needs equal-length signals")
    rr = float(r @ r)
    if rr <= 0.0:
        raise InvalidArgument("si_snr reference is silent")
    target = (float(t @ r) / rr) * r
    err = t - target
    ee = float(err @ err)
    tt = float(target @ target)
    if ee <= tt * 10 ** (-SI_SNR_CAP_DB / 10.0):
        return SI_SNR_CAP_DB
    return 10.0 * np.log10(tt / ee)


def lsd(reference, test, n_fft: int = 2048, hop: int = 512, floor: float = 1e-8) -> float:
    r = np.asarray(reference, dtype=np.float64)
    t = np.asarray(test, dtype=np.float64)
    if r.shape != t.shape:
        raise InvalidArgument("lsd needs equal-length signals")
    if r.shape[0] < n_fft:
        pad = n_fft - r.shape[0]
        r, t = np.pad(r, (0, pad)), np.pad(t, (0, pad))
    w = np.hanning(n_fft + 1)[:n_fft]
    sr_ = np.abs(np.fft.rfft(frame_matrix(r, n_fft, hop) * w, axis=1))
    st = np.abs(np.fft.rfft(frame_matrix(t, n_fft, hop) * w, axis=1))
    gap = np.log10(np.maximum(sr_, floor)) - np.log10(np.maximum(st, floor))
    return float(np.mean(np.sqrt(np.mean(gap * gap, axis=1))))
