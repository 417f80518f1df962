import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from speech_integrity.audio import read_wav, write_wav
from speech_integrity.cli import main
from speech_integrity.config import ToolkitConfig, dump_config, load_config
from speech_integrity.errors import InvalidArgument, IoError, ParseError
from speech_integrity.training import TrainingConfig

import desk
from conftest import tone

SMALL_TOML = """
seed = 3
output_dir = "run"

[training]
batch_size = 4
positives = 2
epochs = 2
optimizer = "adam"
lr_max = 0.003
dev_size = 2

[corpus]
train = "corpus/manifest.jsonl"
dev = "corpus/manifest.jsonl"
test = "corpus/manifest.jsonl"
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_config_hash_is_canonical(tmp_path):
    base = ToolkitConfig()
    assert len(base.config_hash) == 16
    assert base.config_hash == ToolkitConfig().config_hash
    # verifier settings and paths are not part of the hash
    assert base.with_theta(20).config_hash == base.config_hash
    assert replace(base, training=TrainingConfig(epochs=3)).config_hash != base.config_hash
    for name in ("c.toml", "c.json"):
        dump_config(base, str(tmp_path / name))
        assert load_config(str(tmp_path / name)).config_hash == base.config_hash
    text = (tmp_path / "c.toml").read_text()
    assert text.startswith("#") and "42" in text.splitlines()[0]


def test_config_errors(tmp_path, monkeypatch):
    bad = tmp_path / "bad.toml"
    bad.write_text("colour = 3\n")
    with pytest.raises(ParseError):
        load_config(str(bad))
    bad.write_text("[training\n")
    with pytest.raises(ParseError):
        load_config(str(bad))
    with pytest.raises(IoError):
        load_config(str(tmp_path / "nope.toml"))
    with pytest.raises(InvalidArgument):
        ToolkitConfig.from_dict({"watermark": {"segments": 8}})
    good = tmp_path / "good.toml"
    good.write_text("seed = 9\n")
    monkeypatch.setenv("SPEECHVERIFIER_CONFIG", str(good))
    assert load_config().seed == 9


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "speechverifier.toml").write_text(SMALL_TOML)
    assert main(["synth", str(root / "corpus"), "--count", "16", "--seed", "21",
                 "--speakers", "4", "--min-seconds", "3", "--max-seconds", "4"]) == 0
    return root


def test_train_writes_checkpoint_and_log(workspace, capsys):
    cfg = workspace / "speechverifier.toml"
    code, out, _ = run(capsys, "--config", cfg, "train")
    assert code == 0
    first = json.loads(out)
    assert first["epochs"] == 2 and first["config_hash"] == load_config(str(cfg)).config_hash
    with open(workspace / "run" / "training_log.csv") as f:
        assert len(list(csv.DictReader(f))) == 2
    ckpt_bytes = (workspace / "run" / "checkpoint.svck").read_bytes()
    code, out, _ = run(capsys, "--config", cfg, "train", "--out", workspace / "again")
    assert code == 0
    assert (workspace / "again" / "checkpoint.svck").read_bytes() == ckpt_bytes


def test_missing_manifest_exit_code(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text('[corpus]\ntrain = "nowhere/manifest.jsonl"\n')
    code, _, err = run(capsys, "--config", cfg, "train")
    assert code == 2
    assert "nowhere/manifest.jsonl" in json.loads(err)["message"]


def test_reference_theta_needs_opt_in(workspace, capsys):
    cfg = workspace / "speechverifier.toml"
    wav = workspace / "corpus" / "syn21_0000.wav"
    code, _, err = run(capsys, "--config", cfg, "verify", wav)
    assert code == 2 and "calibrate" in json.loads(err)["message"]
    code, out, _ = run(capsys, "--config", cfg, "verify", wav, "--allow-reference-theta")
    report = json.loads(out)
    assert code == 1 and report["decision"] == "Reject"
    assert 96 <= report["distance"] <= 160
    assert set(report) == {"path", "distance", "theta", "decision", "per_segment_errors",
                           "checkpoint_id", "config_hash"}


def test_sign_short_file_exit_3(workspace, capsys, tmp_path):
    short = tmp_path / "short.wav"
    write_wav(tone(300, 1.0), str(short))
    code, _, err = run(capsys, "--config", workspace / "speechverifier.toml", "sign", short,
                       tmp_path / "o.wav")
    assert code == 3 and json.loads(err)["error"] == "TooShort"


def test_calibrate_from_scores(workspace, capsys, tmp_path):
    scores = tmp_path / "scores.csv"
    scores.write_text("distance,label\n3,benign\n8,benign\n70,malicious\n90,malicious\n")
    out_cfg = tmp_path / "calibrated.toml"
    code, out, _ = run(capsys, "--config", workspace / "speechverifier.toml", "calibrate",
                       "--scores", scores, "--write", out_cfg)
    assert code == 0 and json.loads(out)["theta"] == 8
    updated = load_config(str(out_cfg))
    assert updated.verifier.theta == 8 and updated.verifier.calibrated
    scores.write_text("3,benign\n8,benign\n")
    code, _, _ = run(capsys, "--config", workspace / "speechverifier.toml", "calibrate",
                     "--scores", scores, "--write", out_cfg)
    assert code == 2


def test_simulate(workspace, capsys, tmp_path):
    src = tmp_path / "ten.wav"
    from speech_integrity.corpus import synthetic_corpus
    write_wav(synthetic_corpus(1, seed=8, speakers=1, seconds=(10.0, 10.0))[0].load(), str(src),
              "32f")
    out = tmp_path / "re.wav"
    assert run(capsys, "simulate", src, "benign:reencoding", out)[0] == 0
    assert np.max(np.abs(read_wav(str(out)).samples - read_wav(str(src)).samples)) <= 2 ** -15
    a, b = tmp_path / "a.wav", tmp_path / "b.wav"
    for target in (a, b):
        assert run(capsys, "simulate", src, "malicious:deletion:severe", target, "--seed", "4")[0] == 0
    assert a.read_bytes() == b.read_bytes()
    assert abs(read_wav(str(a)).duration_seconds - 5.0) <= 0.5
    sidecar = json.loads((tmp_path / "a.wav.json").read_text())
    assert sidecar["edited_intervals"]
    assert run(capsys, "simulate", src, "malicious:teleport", tmp_path / "x.wav")[0] == 2


def test_study_writes_histogram_csv(workspace, capsys, tmp_path):
    code, out, _ = run(capsys, "--config", workspace / "speechverifier.toml", "study", "sha256",
                       "--out", tmp_path)
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "sha256_histogram.csv")))
    assert {r["category"] for r in rows} >= {"benign", "malicious", "cross"}


@pytest.fixture(scope="module")
def desk_workspace(desk_model, tmp_path_factory):
    """The desk checkpoint under a config file stamped with its hash."""
    root = tmp_path_factory.mktemp("desk_cli")
    config = ToolkitConfig(training=desk.TRAINING, features=desk.FEATURES,
                           checkpoint="checkpoint.svck")
    config = config.with_theta(desk_model.theta)
    cfg = root / "speechverifier.toml"
    dump_config(config, str(cfg))
    ckpt = replace(desk_model.checkpoint, meta={**desk_model.checkpoint.meta,
                                                "config_hash": config.config_hash})
    ckpt.save(str(root / "checkpoint.svck"))
    return root, cfg


def test_sign_then_verify_end_to_end(desk_workspace, speech_waves, capsys):
    root, cfg = desk_workspace
    src = root / "in.wav"
    write_wav(speech_waves[3], str(src), "32f")
    signed = root / "signed.wav"
    code, out, _ = run(capsys, "--config", cfg, "sign", src, signed)
    assert code == 0 and len(out.strip()) == 64
    assert read_wav(str(signed)).duration_seconds == read_wav(str(src)).duration_seconds
    code, out, _ = run(capsys, "--config", cfg, "verify", signed)
    assert code == 0 and json.loads(out)["decision"] == "Accept"
    tampered = root / "tampered.wav"
    assert run(capsys, "simulate", signed, "malicious:deletion:minor", tampered)[0] == 0
    code, out, _ = run(capsys, "--config", cfg, "verify", tampered)
    assert code == 1 and json.loads(out)["decision"] == "Reject"
    code, out, _ = run(capsys, "--config", cfg, "verify", src)
    assert code == 1 and json.loads(out)["distance"] > 64


def test_signed_file_hash_mismatch(desk_workspace, speech_waves, capsys, tmp_path):
    root, cfg = desk_workspace
    src, signed = tmp_path / "in.wav", tmp_path / "signed.wav"
    write_wav(speech_waves[0], str(src), "32f")
    assert run(capsys, "--config", cfg, "sign", src, signed)[0] == 0
    base = load_config(str(cfg))
    other = tmp_path / "other.toml"
    dump_config(replace(base, training=replace(base.training, lr_min=2e-5)), str(other))
    ckpt = root / "checkpoint.svck"
    code, _, err = run(capsys, "--config", other, "verify", signed, "--checkpoint", ckpt)
    assert code == 2 and json.loads(err)["error"] == "ConfigMismatch"
    # --force skips both the checkpoint and the file hash checks
    code, _, _ = run(capsys, "--config", other, "verify", signed, "--checkpoint", ckpt, "--force")
    assert code == 0
