"""Corpus ingestion: manifests, PCM WAV decoding, length normalization,
distribution binning and synthetic corpora for end-to-end runs.

Manifest format (one JSON object per line)::

    {"id": "u1", "audio": "u1.wav", "emotion": "anger", "gender": "male",
     "arousal": 0.8, "valence": 0.2, "dominance": 0.7}

Only ``id`` and ``audio`` are required. ``audio`` is resolved relative to
the manifest's directory.
"""
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.io import wavfile

from paraclap.errors import (DuplicateIdError, InsufficientDataError, ManifestError,
                             UnsupportedFormatError)

logger = logging.getLogger(__name__)

DEFAULT_SAMPLE_RATE = 16000
DEFAULT_CLIP_SECONDS = 5.0
DEFAULT_PROPORTIONS = (0.3, 0.4, 0.3)
DIMENSIONS = ("arousal", "valence", "dominance")
GENDERS = ("male", "female")

# peak level of the additive noise in synthetic files
SYNTH_NOISE_STD = 0.002
SYNTH_HARMONICS = 3


@dataclass(frozen=True)
class UtteranceRecord:
    id: str
    audio_path: Path
    emotion: Optional[str] = None
    gender: Optional[str] = None
    arousal: Optional[float] = None
    valence: Optional[float] = None
    dominance: Optional[float] = None

    def dimension(self, name: str) -> Optional[float]:
        return getattr(self, name)


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise InsufficientDataError("waveform must be a non-empty mono signal")
        if self.sample_rate <= 0:
            raise UnsupportedFormatError("sample rate", f"{self.sample_rate} Hz")

    def __len__(self) -> int:
        return int(self.samples.size)

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate


class BinLabel(Enum):
    LOW = "Low"
    MID = "Mid"
    HIGH = "High"


@dataclass(frozen=True)
class BinThresholds:
    attribute: str
    t_lo: float
    t_hi: float

    def __post_init__(self):
        if self.t_lo > self.t_hi:
            raise ValueError(f"{self.attribute}: t_lo {self.t_lo} > t_hi {self.t_hi}")

    def to_dict(self) -> dict:
        return {"attribute": self.attribute, "t_lo": self.t_lo, "t_hi": self.t_hi}

    @classmethod
    def from_dict(cls, data: dict) -> "BinThresholds":
        return cls(data["attribute"], float(data["t_lo"]), float(data["t_hi"]))


def _optional_real(raw: dict, key: str, line_no: int) -> Optional[float]:
    value = raw.get(key)
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ManifestError(f"{key} must be a number, got {value!r}", line_no)
    if not math.isfinite(value):
        raise ManifestError(f"{key} must be finite, got {value!r}", line_no)
    return float(value)


def _parse_manifest_line(line: bytes, line_no: int, base_dir: Path) -> UtteranceRecord:
    try:
        text = line.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ManifestError(f"not valid UTF-8 at byte {exc.start}", line_no) from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"malformed record: {exc.msg}", line_no) from exc
    if not isinstance(raw, dict):
        raise ManifestError("record must be an object", line_no)
    for key in ("id", "audio"):
        if not isinstance(raw.get(key), str) or not raw[key]:
            raise ManifestError(f"missing or empty '{key}'", line_no)

    gender = raw.get("gender")
    if gender is not None:
        gender = str(gender).lower()
        if gender not in GENDERS:
            raise ManifestError(f"gender must be one of {GENDERS}, got {raw['gender']!r}", line_no)
    emotion = raw.get("emotion")
    if emotion is not None:
        emotion = str(emotion)

    audio_path = Path(raw["audio"])
    if not audio_path.is_absolute():
        audio_path = base_dir / audio_path
    return UtteranceRecord(
        id=raw["id"],
        audio_path=audio_path,
        emotion=emotion,
        gender=gender,
        **{dim: _optional_real(raw, dim, line_no) for dim in DIMENSIONS},
    )


def load_manifest(path) -> List[UtteranceRecord]:
    path = Path(path)
    records: List[UtteranceRecord] = []
    seen: Dict[str, int] = {}
    with path.open("rb") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            record = _parse_manifest_line(line, line_no, path.parent)
            if record.id in seen:
                raise DuplicateIdError(
                    f"duplicate id {record.id!r} on lines {seen[record.id]} and {line_no}")
            seen[record.id] = line_no
            records.append(record)
    logger.info("Loaded %d records from %s", len(records), path)
    return records


def write_manifest(records: Sequence[UtteranceRecord], path) -> None:
    """Write records as line-delimited JSON, audio paths relative to the manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for record in records:
        audio = Path(os.path.relpath(record.audio_path, path.parent)).as_posix()
        raw = {"id": record.id, "audio": audio, "emotion": record.emotion, "gender": record.gender}
        raw.update({dim: record.dimension(dim) for dim in DIMENSIONS})
        lines.append(json.dumps({k: v for k, v in raw.items() if v is not None}))
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def decode_wav(path) -> Waveform:
    try:
        rate, data = wavfile.read(str(path))
    except (ValueError, EOFError, struct.error) as exc:
        # truncated headers surface from scipy as struct.error
        raise UnsupportedFormatError("container", f"{path}: {exc or type(exc).__name__}") from exc

    if rate != DEFAULT_SAMPLE_RATE:
        raise UnsupportedFormatError("sample rate", f"{path}: {rate} Hz, expected {DEFAULT_SAMPLE_RATE} Hz")
    if data.ndim != 1:
        raise UnsupportedFormatError("channels", f"{path}: {data.shape[1]} channels, expected mono")
    if data.dtype != np.int16:
        raise UnsupportedFormatError("bit depth", f"{path}: {data.dtype} samples, expected 16-bit PCM")
    if data.size == 0:
        raise UnsupportedFormatError("length", f"{path}: no samples")
    return Waveform(data.astype(np.float64) / 32768.0, rate)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype(np.int16)
    wavfile.write(str(path), w.sample_rate, pcm)


def compute_bin_thresholds(values: Sequence[float], proportions: Tuple[float, float, float] = DEFAULT_PROPORTIONS,
                           attribute: str = "value") -> BinThresholds:
    """Fit Low/Mid/High cut points so that the bins hold the given shares of ``values``."""
    array = np.asarray(values, dtype=np.float64)
    if array.size == 0:
        raise InsufficientDataError(f"{attribute}: cannot fit thresholds on no values")
    if not np.all(np.isfinite(array)):
        raise ValueError(f"{attribute}: values must be finite")
    if len(proportions) != 3 or min(proportions) < 0 or not math.isclose(sum(proportions), 1.0):
        raise ValueError(f"proportions must be three non-negative shares summing to 1, got {proportions}")

    q_lo = 100.0 * proportions[0]
    q_hi = 100.0 * (proportions[0] + proportions[1])
    t_lo, t_hi = np.percentile(array, [q_lo, q_hi], method="linear")
    return BinThresholds(attribute, float(t_lo), float(t_hi))


def assign_bin(value: float, thresholds: BinThresholds) -> BinLabel:
    if value < thresholds.t_lo:
        return BinLabel.LOW
    if value > thresholds.t_hi:
        return BinLabel.HIGH
    return BinLabel.MID


def clip_or_pad(w: Waveform, target_seconds: float = DEFAULT_CLIP_SECONDS,
                rng: np.random.Generator = None) -> Waveform:
    if rng is None:
        rng = np.random.default_rng(0)
    target = int(round(target_seconds * w.sample_rate))
    n = len(w)
    if n == target:
        return w
    if n > target:
        start = int(rng.integers(0, n - target + 1))
        return Waveform(w.samples[start:start + target].copy(), w.sample_rate)
    offset = int(rng.integers(0, target - n + 1))
    padded = np.zeros(target, dtype=np.float64)
    padded[offset:offset + n] = w.samples
    return Waveform(padded, w.sample_rate)


@dataclass(frozen=True)
class ClassProfile:
    name: str
    f0_range: Tuple[float, float]
    amp_range: Tuple[float, float]
    dur_range: Tuple[float, float]
    gender: Optional[str] = None
    dims: Dict[str, Tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        for label, (lo, hi) in (("f0", self.f0_range), ("amplitude", self.amp_range),
                                ("duration", self.dur_range), *self.dims.items()):
            if lo > hi:
                raise ValueError(f"profile {self.name}: {label} range ({lo}, {hi}) is reversed")
        if self.f0_range[0] <= 0 or self.dur_range[0] <= 0:
            raise ValueError(f"profile {self.name}: f0 and duration must be positive")
        if not 0 < self.amp_range[1] <= 1.0:
            raise ValueError(f"profile {self.name}: amplitude must lie in (0, 1]")
        if self.gender is not None and self.gender not in GENDERS:
            raise ValueError(f"profile {self.name}: gender must be one of {GENDERS}")

    @classmethod
    def from_dict(cls, raw: dict) -> "ClassProfile":
        return cls(
            name=raw["name"],
            f0_range=tuple(raw["f0"]),
            amp_range=tuple(raw["amplitude"]),
            dur_range=tuple(raw["duration"]),
            gender=raw.get("gender"),
            dims={dim: tuple(raw[dim]) for dim in DIMENSIONS if dim in raw},
        )


DEFAULT_CLASS_PROFILES = (
    ClassProfile("anger", (250.0, 300.0), (0.5, 0.7), (1.0, 1.6), "male",
                 {"arousal": (0.7, 0.95), "valence": (0.05, 0.3), "dominance": (0.6, 0.9)}),
    ClassProfile("happiness", (330.0, 390.0), (0.3, 0.45), (1.0, 1.6), "female",
                 {"arousal": (0.6, 0.85), "valence": (0.7, 0.95), "dominance": (0.5, 0.7)}),
    ClassProfile("sadness", (110.0, 140.0), (0.04, 0.08), (1.4, 2.0), "female",
                 {"arousal": (0.05, 0.3), "valence": (0.05, 0.3), "dominance": (0.1, 0.35)}),
    ClassProfile("neutral", (170.0, 210.0), (0.12, 0.2), (1.0, 1.6), "male",
                 {"arousal": (0.4, 0.6), "valence": (0.4, 0.6), "dominance": (0.4, 0.6)}),
)


def _parse_range(text: str) -> Tuple[float, float]:
    lo, sep, hi = text.partition("-")
    if not sep:
        return float(lo), float(lo)
    return float(lo), float(hi)


def parse_class_spec(spec: str) -> List[ClassProfile]:
    """Parse class profiles from a JSON file path, a JSON list, or the compact form
    ``name:f0lo-f0hi:amplo-amphi:durlo-durhi[:gender],...``."""
    if os.path.isfile(spec):
        return [ClassProfile.from_dict(raw) for raw in json.loads(Path(spec).read_text(encoding="utf-8"))]
    if spec.lstrip().startswith("["):
        return [ClassProfile.from_dict(raw) for raw in json.loads(spec)]

    profiles = []
    for chunk in filter(None, (part.strip() for part in spec.split(","))):
        fields = chunk.split(":")
        if len(fields) not in (4, 5):
            raise ValueError(f"bad class profile {chunk!r}: expected name:f0:amplitude:duration[:gender]")
        profiles.append(ClassProfile(
            name=fields[0],
            f0_range=_parse_range(fields[1]),
            amp_range=_parse_range(fields[2]),
            dur_range=_parse_range(fields[3]),
            gender=fields[4] if len(fields) == 5 else None,
        ))
    if not profiles:
        raise ValueError("class spec names no classes")
    return profiles


def synth_tone(f0: float, amplitude: float, duration_s: float, rng: np.random.Generator,
               sample_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Harmonic tone (1/h harmonic weights, random phases) peaking near ``amplitude``, plus noise."""
    t = np.arange(int(round(duration_s * sample_rate))) / sample_rate
    weights = 1.0 / np.arange(1, SYNTH_HARMONICS + 1)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=SYNTH_HARMONICS)
    tone = sum(wt * np.sin(2.0 * np.pi * h * f0 * t + ph)
               for h, (wt, ph) in enumerate(zip(weights, phases), start=1))
    tone *= amplitude / weights.sum()
    tone += rng.normal(0.0, SYNTH_NOISE_STD, size=t.size)
    return Waveform(np.clip(tone, -1.0, 32767 / 32768), sample_rate)


def synthesize_corpus(profiles: Sequence[ClassProfile], n_per_class: int, rng: np.random.Generator,
                      out_dir) -> Tuple[List[UtteranceRecord], List[Path]]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records, paths = [], []
    for profile in profiles:
        for k in range(n_per_class):
            f0 = rng.uniform(*profile.f0_range)
            amplitude = rng.uniform(*profile.amp_range)
            duration = rng.uniform(*profile.dur_range)
            dims = {dim: float(rng.uniform(*profile.dims[dim])) for dim in DIMENSIONS if dim in profile.dims}
            wave = synth_tone(f0, amplitude, duration, rng)

            utt_id = f"{profile.name}_{k:04d}"
            wav_path = out_dir / f"{utt_id}.wav"
            write_wav(wav_path, wave)
            paths.append(wav_path)
            records.append(UtteranceRecord(utt_id, wav_path, emotion=profile.name,
                                           gender=profile.gender, **dims))
    write_manifest(records, out_dir / "manifest.jsonl")
    logger.info("Synthesized %d utterances over %d classes into %s", len(records), len(profiles), out_dir)
    return records, paths
