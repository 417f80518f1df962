import csv
import io
import json

import numpy as np
import pytest

from speech_integrity.audio import Waveform
from speech_integrity.corpus import Corpus
from speech_integrity.errors import InvalidArgument
from speech_integrity.evaluation import (OpEntry, audio_digest, cosine, default_op_matrix,
                                         dev_scores, digest_bits, export_embeddings,
                                         pooled_mfcc, run_protocol, sha256_study,
                                         similarity_study, sweep_op_matrix)
from speech_integrity.verify import VerifierConfig, hamming


@pytest.fixture(scope="module")
def report(speech, untrained_checkpoint):
    small = Corpus(speech.utterances[:3])
    return run_protocol(small, VerifierConfig(42, untrained_checkpoint), seed=4)


def test_op_matrix_shape():
    rows = default_op_matrix()
    benign = [r for r in rows if r.benign]
    assert len(benign) == 4
    assert len(rows) == 4 + 4 * 3 + 2
    assert len({(r.kind, r.level) for r in rows}) == len(rows)
    assert [r.ratio for r in sweep_op_matrix()] == [0.1, 0.25, 0.5, 0.75, 0.9]


def test_report_rows(report):
    assert len(report.rows) == 18
    for row in report.rows:
        assert row["n"] == 3
        for k in ("TPR", "FPR", "TNR", "FNR"):
            assert row[k] is None or 0.0 <= row[k] <= 1.0
    benign = report.rows[0]
    assert benign["FPR"] is None and benign["TPR"] is not None
    assert report.overall["n"] == 54
    assert len(report.scores) == 54
    assert len(dev_scores(report)) == 54 - report.overall["errors"]


def test_report_serializations(report):
    data = json.loads(report.to_json())
    assert data["schema_version"] == 1 and len(data["rows"]) == 18
    assert data["config"]["checkpoint_id"]
    rows = list(csv.DictReader(io.StringIO(report.to_csv())))
    assert len(rows) == 19 and rows[-1]["op"] == "overall"
    scores = list(csv.DictReader(io.StringIO(report.scores_csv())))
    assert len(scores) == 54


def test_protocol_is_reproducible(speech, untrained_checkpoint, report):
    small = Corpus(speech.utterances[:3])
    again = run_protocol(small, VerifierConfig(42, untrained_checkpoint), seed=4)
    assert again.to_json() == report.to_json()


def test_protocol_needs_checkpoint(speech):
    with pytest.raises(InvalidArgument):
        run_protocol(speech, VerifierConfig(42))


def test_cosine_and_pooling(speech_waves):
    w = speech_waves[0]
    v = pooled_mfcc(w)
    assert v.shape == (12,)
    assert cosine(v, v) == pytest.approx(1.0)
    with pytest.raises(InvalidArgument):
        cosine(v, np.zeros(12))


def test_digest_examples(speech_waves):
    w = speech_waves[0]
    assert hamming(audio_digest(w), audio_digest(w)) == 0
    assert digest_bits(b"").size == 256
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = w.samples.copy()
        x[int(rng.integers(0, len(x)))] += 1e-3
        assert 96 <= hamming(audio_digest(w), audio_digest(Waveform(x, w.sample_rate))) <= 160


def test_study_outputs(speech):
    small = Corpus(speech.utterances[:2])
    sim = similarity_study(small)
    assert set(sim.values) == {"benign", "minor", "moderate", "severe", "cross"}
    assert len(sim.values["benign"]) == 8 and len(sim.values["cross"]) == 2
    rows = list(csv.DictReader(io.StringIO(sim.histogram_csv())))
    assert set(rows[0]) == {"bin_left", "bin_right", "count", "category"}
    assert sum(int(r["count"]) for r in rows if r["category"] == "benign") == 8
    assert json.loads(sim.to_json())["study"] == "similarity"
    sha = sha256_study(small)
    assert len(sha.values["malicious"]) == 24
    with pytest.raises(InvalidArgument):
        similarity_study(Corpus(speech.utterances[:1]))


def test_embedding_export(speech, untrained_checkpoint):
    text = export_embeddings(Corpus(speech.utterances[:2]), untrained_checkpoint)
    rows = list(csv.reader(io.StringIO(text)))
    assert len(rows[0]) == 2 + 256
    assert len(rows) == 1 + 2 * (1 + 4 + 12 + 1)
