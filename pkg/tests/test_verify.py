import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from speech_integrity.errors import ConfigMismatch, InvalidArgument, TooShort
from speech_integrity.ops import Level, MaliciousKind, MaliciousOp, apply_malicious
from speech_integrity.verify import (REFERENCE_THETA, Decision, VerifierConfig,
                                     calibrate_threshold, check_compatible, decide, hamming,
                                     sign, verify)
from speech_integrity.watermark import WatermarkConfig

from conftest import tone
from oracles import brute_theta

codes = st.lists(st.sampled_from([-1, 1]), min_size=256, max_size=256).map(np.array)


def test_hamming_examples():
    a = np.where(np.random.default_rng(0).random(256) < 0.5, 1, -1)
    assert hamming(a, a) == 0
    assert hamming(a, -a) == 256
    with pytest.raises(InvalidArgument):
        hamming(a, a[:-1])


def test_hamming_random_pairs_near_half():
    rng = np.random.default_rng(1)
    for _ in range(50):
        a, b = (np.where(rng.random(256) < 0.5, 1, -1) for _ in range(2))
        assert 96 <= hamming(a, b) <= 160


@settings(max_examples=100, deadline=None)
@given(codes, codes, codes)
def test_hamming_is_a_metric(a, b, c):
    assert hamming(a, b) == hamming(b, a)
    assert (hamming(a, b) == 0) == np.array_equal(a, b)
    assert hamming(a, c) <= hamming(a, b) + hamming(b, c)


@given(st.integers(0, 256), st.integers(0, 256), st.integers(0, 256))
def test_decision_monotone(da, db, theta):
    lo, hi = sorted((da, db))
    if decide(hi, theta) is Decision.ACCEPT:
        assert decide(lo, theta) is Decision.ACCEPT
    assert decide(theta, theta) is Decision.ACCEPT
    assert decide(theta + 1, theta) is Decision.REJECT


def test_calibration_examples():
    separated = [(d, "benign") for d in (0, 4, 10)] + [(d, "malicious") for d in (100, 180)]
    cal = calibrate_threshold(separated)
    assert cal.theta == 10 and cal.fpr == 0.0 and cal.fnr == 0.0
    overlap = [(1, True), (2, True), (3, True), (2, False), (3, False), (4, False)]
    cal = calibrate_threshold(overlap)
    theta, fpr, fnr = brute_theta([d for d, _ in overlap], [y for _, y in overlap])
    assert (cal.theta, cal.fpr, cal.fnr) == (theta, fpr, fnr)
    with pytest.raises(InvalidArgument):
        calibrate_threshold([(3, "benign"), (5, "benign")])
    with pytest.raises(InvalidArgument):
        calibrate_threshold([(3, "benign"), (5, "unsure")])


labelled = st.lists(st.tuples(st.integers(0, 256), st.booleans()), min_size=2, max_size=30).filter(
    lambda xs: 0 < sum(y for _, y in xs) < len(xs))


@settings(max_examples=150, deadline=None)
@given(labelled)
def test_calibration_matches_exhaustive_sweep(pairs):
    cal = calibrate_threshold(pairs)
    assert (cal.theta, cal.fpr, cal.fnr) == brute_theta([d for d, _ in pairs],
                                                        [y for _, y in pairs])


def test_reference_threshold():
    assert REFERENCE_THETA == 42
    assert VerifierConfig().theta == 42
    with pytest.raises(InvalidArgument):
        VerifierConfig(theta=257)


def test_config_mismatch(untrained_checkpoint, speech_waves):
    with pytest.raises(ConfigMismatch):
        check_compatible(untrained_checkpoint, WatermarkConfig(fingerprint_bits=128))
    with pytest.raises(ConfigMismatch):
        check_compatible(untrained_checkpoint, WatermarkConfig(segments=8))
    with pytest.raises(ConfigMismatch):
        verify(speech_waves[0], VerifierConfig(42, untrained_checkpoint,
                                               WatermarkConfig(segments=8)))
    with pytest.raises(InvalidArgument):
        verify(speech_waves[0], VerifierConfig(42))


def test_too_short_propagates(untrained_checkpoint):
    with pytest.raises(TooShort):
        verify(tone(200, 1.5), VerifierConfig(42, untrained_checkpoint))


def test_verify_is_deterministic(untrained_checkpoint, speech_waves):
    wm = WatermarkConfig()
    signed, bits = sign(speech_waves[0], untrained_checkpoint, wm)
    before = signed.samples.copy()
    cfg = VerifierConfig(42, untrained_checkpoint, wm)
    a, b = verify(signed, cfg), verify(signed, cfg)
    assert np.array_equal(signed.samples, before)
    assert a.to_dict() == b.to_dict()
    assert np.array_equal(a.extracted, bits)
    assert sum(a.per_segment_errors) == a.distance == hamming(a.regenerated, a.extracted)
    assert len(a.to_dict()["regenerated"]) == 64


def test_unsigned_audio_is_rejected(untrained_checkpoint, speech_waves):
    cfg = VerifierConfig(42, untrained_checkpoint)
    for w in speech_waves[:4]:
        result = verify(w, cfg)
        assert 96 <= result.distance <= 160
        assert result.decision is Decision.REJECT


def test_desk_sign_then_verify(desk_model, speech_waves):
    cfg = desk_model.verifier()
    for w in speech_waves[:4]:
        signed, _ = sign(w, cfg.checkpoint, cfg.watermark)
        result = verify(signed, cfg)
        assert result.accepted and result.distance <= cfg.theta


def test_desk_silencing_is_rejected(desk_model, speech_waves):
    cfg = desk_model.verifier()
    for i, w in enumerate(speech_waves[:4]):
        signed, _ = sign(w, cfg.checkpoint, cfg.watermark)
        rec = apply_malicious(signed, MaliciousOp(MaliciousKind.SILENCING, Level.MINOR, i))
        assert verify(rec.output, cfg).decision is Decision.REJECT
