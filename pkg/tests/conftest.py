from pathlib import Path

import numpy as np
import pytest

from paraclap.cli import extract_multiple
from paraclap.corpus import ClassProfile, UtteranceRecord, Waveform, synthesize_corpus
from paraclap.features import FeatureVector, write_feature_cache

SR = 16000

# (emotion, gender, pitch_mu, intensity_db) centres for feature-level corpora
FEATURE_CLASSES = (
    ("anger", "male", 275.0, -6.0),
    ("happiness", "female", 360.0, -12.0),
    ("sadness", "female", 125.0, -28.0),
    ("neutral", "male", 190.0, -18.0),
)

SMALL_PROFILES = (
    ClassProfile("anger", (250.0, 300.0), (0.5, 0.7), (0.5, 0.7), "male"),
    ClassProfile("sadness", (110.0, 140.0), (0.04, 0.08), (0.6, 0.8), "female"),
    ClassProfile("happiness", (330.0, 390.0), (0.3, 0.45), (0.5, 0.7), "female"),
    ClassProfile("neutral", (170.0, 210.0), (0.12, 0.2), (0.5, 0.7), "male"),
)


def sine(f0: float, amplitude: float = 0.5, seconds: float = 1.0) -> Waveform:
    t = np.arange(int(round(seconds * SR))) / SR
    return Waveform(amplitude * np.sin(2.0 * np.pi * f0 * t), SR)


def make_feature_pairs(n_per_class: int, seed: int, classes=FEATURE_CLASSES, prefix: str = "utt"):
    """Records with directly drawn feature vectors, no audio behind them."""
    rng = np.random.default_rng(seed)
    pairs = []
    for emotion, gender, pitch, level in classes:
        for k in range(n_per_class):
            record = UtteranceRecord(f"{prefix}_{emotion}_{k:03d}", Path(f"{emotion}_{k}.wav"),
                                     emotion=emotion, gender=gender)
            fv = FeatureVector(
                pitch_mu=pitch * rng.uniform(0.95, 1.05),
                pitch_sigma=abs(rng.normal(2.0, 0.5)),
                intensity_db=level + rng.normal(0.0, 0.5),
                jitter=abs(rng.normal(0.003, 0.001)),
                shimmer=abs(rng.normal(0.01, 0.003)),
                duration_s=rng.uniform(1.0, 1.6),
            )
            pairs.append((record, fv))
    return pairs


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def synth_corpus(tmp_path_factory):
    """Small 4-class synthetic corpus on disk with its extracted feature cache."""
    out_dir = tmp_path_factory.mktemp("synth")
    records, _ = synthesize_corpus(SMALL_PROFILES, 6, np.random.default_rng(7), out_dir)
    results = extract_multiple(records, workers=2)
    write_feature_cache([(r.id, fv) for r, fv in zip(records, results)], out_dir / "features.csv")
    return {
        "dir": out_dir,
        "manifest": out_dir / "manifest.jsonl",
        "features": out_dir / "features.csv",
        "records": records,
        "pairs": list(zip(records, results)),
    }
