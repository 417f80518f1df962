import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from speech_integrity.audio import Waveform
from speech_integrity.checkpoint import ModelCheckpoint
from speech_integrity.errors import EmptyInput, InvalidArgument, ParseError, ShapeError, TooShort
from speech_integrity.features import MfccConfig
from speech_integrity.model import layers
from speech_integrity.model.gradcheck import OP_NAMES, gradient_check
from speech_integrity.model.network import (ModelConfig, binarize, bits_to_hex, forward,
                                            hex_to_bits, init_params, pack_bits, unpack_bits)


def _sig(a):
    return 1.0 / (1.0 + math.exp(-a))


def _scalar_lstm(xs, w_x, w_h, b):
    """Unit-by-unit LSTM reference with explicit sigmoid/tanh."""
    hidden = w_h.shape[0]
    h = [0.0] * hidden
    c = [0.0] * hidden
    out = []
    for x in xs:
        pre = [b[j] + sum(x[i] * w_x[i, j] for i in range(len(x)))
               + sum(h[i] * w_h[i, j] for i in range(hidden)) for j in range(4 * hidden)]
        new_h, new_c = [], []
        for k in range(hidden):
            ig = _sig(pre[k])
            fg = _sig(pre[hidden + k])
            gg = math.tanh(pre[2 * hidden + k])
            og = _sig(pre[3 * hidden + k])
            ck = fg * c[k] + ig * gg
            new_c.append(ck)
            new_h.append(og * math.tanh(ck))
        h, c = new_h, new_c
        out.append(list(h))
    return np.array(out)


def _bilstm_params(rng, d, hidden, scale=0.4):
    return {"w_x": rng.normal(0, scale, (2, d, 4 * hidden)),
            "w_h": rng.normal(0, scale, (2, hidden, 4 * hidden)),
            "b": rng.normal(0, 0.1, (2, 4 * hidden))}


def test_bilstm_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 3, 4))
    p = _bilstm_params(rng, 4, 3)
    y, _ = layers.bilstm_layer_forward(x, [3], p)
    fwd = _scalar_lstm(x[0], p["w_x"][0], p["w_h"][0], p["b"][0])
    bwd = _scalar_lstm(x[0][::-1], p["w_x"][1], p["w_h"][1], p["b"][1])[::-1]
    assert np.allclose(y[0], np.concatenate([fwd, bwd], axis=1), atol=1e-10)


def test_bilstm_padding_does_not_leak():
    rng = np.random.default_rng(1)
    p = _bilstm_params(rng, 2, 3)
    short = rng.normal(size=(1, 4, 2))
    padded = np.concatenate([short, np.zeros((1, 3, 2))], axis=1)
    both = np.concatenate([padded, rng.normal(size=(1, 7, 2))], axis=0)
    alone, _ = layers.bilstm_layer_forward(short, [4], p)
    batched, _ = layers.bilstm_layer_forward(both, [4, 7], p)
    assert np.allclose(batched[0, :4], alone[0], atol=1e-12)


def test_zero_weights_give_zero_states():
    cfg = ModelConfig(input_dim=3, lstm_hidden=4)
    params = {k: np.zeros_like(v) for k, v in init_params(cfg, np.random.default_rng(0)).items()}
    from speech_integrity.model.network import bilstm_forward
    h, _ = bilstm_forward(np.ones((1, 5, 3)), [5], params, cfg)
    assert np.array_equal(h, np.zeros((1, 5, 8)))


def test_single_frame_both_directions_see_it():
    rng = np.random.default_rng(2)
    p = _bilstm_params(rng, 3, 2)
    x = rng.normal(size=(1, 1, 3))
    y, _ = layers.bilstm_layer_forward(x, [1], p)
    fwd = _scalar_lstm(x[0], p["w_x"][0], p["w_h"][0], p["b"][0])
    bwd = _scalar_lstm(x[0], p["w_x"][1], p["w_h"][1], p["b"][1])
    assert np.allclose(y[0, 0], np.concatenate([fwd[0], bwd[0]]), atol=1e-12)


def test_empty_and_mismatched_input():
    cfg = ModelConfig(input_dim=3, lstm_hidden=4)
    params = init_params(cfg, np.random.default_rng(0))
    with pytest.raises(EmptyInput):
        forward([np.zeros((0, 3))], params, cfg)
    with pytest.raises(ShapeError):
        forward([np.zeros((5, 4))], params, cfg)
    with pytest.raises(EmptyInput):
        forward([], params, cfg)


def test_pool_counts_reference_example():
    assert layers.pool_counts(100, (20, 50, 100), 10) == [9, 6, 1]
    h = np.random.default_rng(0).normal(size=(100, 3))
    pooled, _ = layers.multiscale_pool_forward(h, (20, 50, 100), 10)
    assert pooled.shape == (16, 3)
    assert np.allclose(pooled[0], h[:20].mean(axis=0))
    assert np.allclose(pooled[9], h[:50].mean(axis=0))
    assert np.allclose(pooled[-1], h.mean(axis=0))


def test_short_sequence_edge_padding():
    assert layers.pool_counts(20, (20, 50, 100), 10) == [1, 0, 0]
    h = np.arange(40.0).reshape(20, 2)
    pooled, _ = layers.multiscale_pool_forward(h, (20, 50, 100), 10)
    assert pooled.shape[0] == 16
    padded = np.concatenate([h, np.repeat(h[-1:], 80, axis=0)])
    assert np.allclose(pooled[-1], padded.mean(axis=0))


def test_constant_hidden_pools_to_itself():
    h = np.tile([0.3, -1.2], (137, 1))
    pooled, _ = layers.multiscale_pool_forward(h, (20, 50, 100), 10)
    assert np.allclose(pooled, [0.3, -1.2])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 250), st.integers(1, 20))
def test_pool_count_property(steps, stride):
    windows = (5, 12, 30)
    h = np.random.default_rng(steps).normal(size=(steps, 2))
    pooled, _ = layers.multiscale_pool_forward(h, windows, stride)
    t = max(steps, max(windows))
    brute = sum(1 for w in windows for s in range(0, t, stride) if s + w <= t)
    assert pooled.shape[0] == brute
    if steps >= max(windows):
        assert brute == sum((steps - w) // stride + 1 for w in windows)


def test_attentive_pool_examples():
    rng = np.random.default_rng(0)
    h = rng.normal(size=(5, 3))
    v, _ = layers.attentive_pool_forward(h, np.zeros((3, 4)), np.zeros(4), rng.normal(size=4))
    assert np.allclose(v, h.mean(axis=0))
    # identity W: scores u . tanh(h) come out as (ln 2, ln 1)
    w = np.eye(2)
    target = np.array([math.atanh(0.5), math.atanh(0.25)])
    h2 = np.array([[target[0], 0.0], [target[1], 0.0]])
    u = np.array([math.log(2) / 0.25, 0.0])
    _, cache = layers.attentive_pool_forward(h2, w, np.zeros(2), u)
    weights = cache[-1]
    assert np.allclose(weights, [2 / 3, 1 / 3])
    one = rng.normal(size=(1, 3))
    v, _ = layers.attentive_pool_forward(one, rng.normal(size=(3, 2)), np.zeros(2), np.ones(2))
    assert np.allclose(v, one[0])


def test_projection_matches_matrix_oracle():
    rng = np.random.default_rng(3)
    v = rng.normal(size=(2, 6))
    w1, b1 = rng.normal(size=(6, 5)), rng.normal(size=5)
    w2, b2 = rng.normal(size=(5, 4)), rng.normal(size=4)
    out, _ = layers.projection_forward(v, w1, b1, w2, b2)
    for i in range(2):
        hidden = [max(0.0, sum(v[i, a] * w1[a, j] for a in range(6)) + b1[j]) for j in range(5)]
        u = [sum(hidden[a] * w2[a, j] for a in range(5)) + b2[j] for j in range(4)]
        norm = math.sqrt(sum(x * x for x in u))
        assert np.allclose(out[i], [math.tanh(x / norm) for x in u], atol=1e-10)
    zero, _ = layers.projection_forward(v, np.zeros((6, 5)), np.zeros(5), np.zeros((5, 4)),
                                        np.zeros(4))
    assert np.array_equal(zero, np.zeros((2, 4)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 16), st.floats(1e-3, 1e3))
def test_projection_output_bounded(seed, scale):
    rng = np.random.default_rng(seed)
    out, _ = layers.projection_forward(rng.normal(size=(3, 4)) * scale, rng.normal(size=(4, 5)),
                                       rng.normal(size=5), rng.normal(size=(5, 6)),
                                       rng.normal(size=6))
    assert np.all(np.abs(out) < 1.0)


def test_binarize_tie_rule_and_oddness():
    assert binarize([0.3, -0.2, 0.0]).tolist() == [1, -1, 1]
    with pytest.raises(InvalidArgument):
        binarize([np.nan])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False).filter(lambda x: x != 0), min_size=1,
                max_size=64))
def test_binarize_properties(values):
    v = np.array(values)
    b = binarize(v)
    assert np.array_equal(binarize(-v), -b)
    assert np.array_equal(binarize(b.astype(float)), b)
    assert np.array_equal(b, [1 if x >= 0 else -1 for x in values])


def test_bit_packing_layout():
    bits = np.array([1, -1, -1, -1, -1, -1, -1, -1, -1, 1, -1, -1, -1, -1, -1, 1])
    assert pack_bits(bits) == bytes([0x80, 0x41])
    assert bits_to_hex(bits) == "8041"
    assert np.array_equal(hex_to_bits("8041"), bits)
    with pytest.raises(InvalidArgument):
        unpack_bits(b"\x00", 9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from([-1, 1]), min_size=1, max_size=300))
def test_pack_round_trip(bits):
    assert np.array_equal(unpack_bits(pack_bits(bits), len(bits)), bits)


def test_model_config_validation():
    with pytest.raises(InvalidArgument):
        ModelConfig(pool_windows=(50, 20, 100))
    with pytest.raises(InvalidArgument):
        ModelConfig(fingerprint_bits=250, segments=16)
    ref = ModelConfig.reference_scale()
    assert (ref.input_dim, ref.lstm_hidden, ref.proj_hidden) == (768, 256, 512)


@pytest.mark.parametrize("op,tol", [("attentive_pool", 1e-5), ("bilstm", 1e-4),
                                    ("projection", 1e-6), ("multiscale_pool", 1e-6),
                                    ("info_nce", 1e-5), ("triplet", 1e-5)])
def test_gradient_check(op, tol):
    assert op in OP_NAMES
    for seed in range(3):
        assert gradient_check(op, seed=seed) < tol


def test_gradient_check_reference_sizes():
    assert gradient_check("attentive_pool", k=3, dim=4) < 1e-5
    assert gradient_check("bilstm", steps=3, dim=2) < 1e-4
    with pytest.raises(InvalidArgument):
        gradient_check("conv")


def test_full_network_gradient():
    from speech_integrity.model.gradcheck import check
    cfg = ModelConfig(input_dim=3, lstm_hidden=2, attention_hidden=3, proj_hidden=4,
                      fingerprint_bits=4, segments=2, pool_windows=(2, 4), pool_stride=2)
    rng = np.random.default_rng(4)
    params = init_params(cfg, rng)
    # nonzero biases keep some ReLUs live so the L2 norm stays off its floor
    for k in ("proj.b1", "proj.b2", "attn.b"):
        params[k] = rng.normal(0, 0.5, params[k].shape)
    feats = [rng.normal(size=(5, 3)), rng.normal(size=(3, 3))]
    probe = rng.normal(size=(2, 4))

    def run():
        from speech_integrity.model.network import backward
        out, cache = forward(feats, params, cfg)
        return float(np.sum(probe * out)), backward(probe, cache, params, cfg)
    errors = check(run, params, 1e-6)
    assert max(errors.values()) < 1e-4


def test_eval_determinism_and_order_sensitivity(untrained_checkpoint, speech_waves):
    w = speech_waves[0]
    a = untrained_checkpoint.fingerprint_vector(w)
    b = untrained_checkpoint.fingerprint_vector(w)
    assert np.array_equal(a, b)
    feats = untrained_checkpoint.features(w)
    perm = np.random.default_rng(0).permutation(feats.shape[0])
    shuffled = untrained_checkpoint.embed_features([feats[perm]])[0]
    assert not np.allclose(shuffled, a)


def test_untrained_fingerprints_differ(untrained_checkpoint, speech_waves):
    prints = [untrained_checkpoint.fingerprint(w) for w in speech_waves]
    pairs = list(itertools.combinations(range(len(prints)), 2))[:20]
    assert len(pairs) == 20
    assert all(np.sum(prints[i] != prints[j]) > 0 for i, j in pairs)


def test_fingerprint_needs_two_seconds(untrained_checkpoint):
    with pytest.raises(TooShort):
        untrained_checkpoint.fingerprint(Waveform(np.zeros(31999), 16000))


def test_checkpoint_round_trip(untrained_checkpoint, tmp_path, speech_waves):
    path = tmp_path / "m.svck"
    untrained_checkpoint.save(path)
    back = ModelCheckpoint.load(path)
    assert back.checkpoint_id == untrained_checkpoint.checkpoint_id
    assert back.model_config == untrained_checkpoint.model_config
    assert np.array_equal(back.fingerprint(speech_waves[1]),
                          untrained_checkpoint.fingerprint(speech_waves[1]))
    assert len(untrained_checkpoint.fingerprint_hex(speech_waves[1])) == 64


def test_checkpoint_corruption(tmp_path):
    with pytest.raises(ParseError):
        ModelCheckpoint.from_bytes(b"NOPE" + bytes(20))
    cfg = ModelConfig(input_dim=3, lstm_hidden=2, proj_hidden=4, attention_hidden=2)
    good = ModelCheckpoint(cfg, MfccConfig(), init_params(cfg, np.random.default_rng(0)), np.zeros(3), np.ones(3))
    with pytest.raises(ParseError):
        ModelCheckpoint.from_bytes(good.to_bytes()[:-8])
