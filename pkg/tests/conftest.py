import numpy as np
import pytest

from speech_integrity.audio import Waveform
from speech_integrity.checkpoint import ModelCheckpoint
from speech_integrity.corpus import synthetic_corpus
from speech_integrity.features import MfccConfig, encode
from speech_integrity.model.network import ModelConfig, init_params
from speech_integrity.training import feature_statistics

import desk


def tone(freq, seconds=1.0, sr=16000, amp=0.5, phase=0.0):
    t = np.arange(int(round(seconds * sr))) / sr
    return Waveform(amp * np.sin(2 * np.pi * freq * t + phase), sr)


def dominant_hz(w: Waveform) -> float:
    x = w.samples * np.hanning(len(w))
    spec = np.abs(np.fft.rfft(x))
    return float(np.argmax(spec) * w.sample_rate / len(w))


@pytest.fixture(scope="session")
def speech():
    """Eight speech-like fixtures of 4.2 to 6 s across four voices."""
    corpus = synthetic_corpus(8, seed=3, speakers=4, seconds=(4.2, 6.0))
    return corpus


@pytest.fixture(scope="session")
def speech_waves(speech):
    return [u.load() for u in speech.utterances]


@pytest.fixture(scope="session")
def untrained_checkpoint(speech):
    """Randomly initialised desk-width network with real feature statistics."""
    mc = ModelConfig()
    fc = MfccConfig()
    mean, scale = feature_statistics([encode(w.load(), fc).matrix for w in speech.utterances])
    return ModelCheckpoint(mc, fc, init_params(mc, np.random.default_rng(5)), mean, scale)


@pytest.fixture(scope="session")
def desk_model(tmp_path_factory):
    """The acceptance-scale trained checkpoint (trained once per session)."""
    return desk.trained_model(tmp_path_factory.mktemp("desk"))
