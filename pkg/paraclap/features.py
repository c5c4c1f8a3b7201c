"""Interpretable acoustic parameters: pitch mean/std, intensity, jitter,
shimmer and duration.

Pitch comes from a frame-wise normalized autocorrelation tracker; jitter
and shimmer are computed on the frame-level period and peak-amplitude
sequences of voiced frames.
"""
import csv
import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from paraclap.corpus import Waveform
from paraclap.errors import InsufficientDataError, NoVoicingError

logger = logging.getLogger(__name__)

FEATURE_NAMES = ("pitch_mu", "pitch_sigma", "intensity_db", "jitter", "shimmer", "duration_s")
INTENSITY_FLOOR_DB = -120.0


@dataclass(frozen=True)
class FeatureConfig:
    frame_len: int = 640
    hop: int = 160
    f0_min: float = 60.0
    f0_max: float = 500.0
    voicing_threshold: float = 0.5
    rms_gate_db: float = -40.0
    # a later autocorrelation peak must beat the first by more than this to win
    octave_guard: float = 0.9


DEFAULT_FEATURE_CONFIG = FeatureConfig()


@dataclass(frozen=True)
class FeatureVector:
    pitch_mu: Optional[float]
    pitch_sigma: Optional[float]
    intensity_db: float
    jitter: Optional[float]
    shimmer: Optional[float]
    duration_s: float

    def as_array(self) -> np.ndarray:
        """Feature values in FEATURE_NAMES order, NaN where absent."""
        return np.array([np.nan if v is None else v for v in (getattr(self, n) for n in FEATURE_NAMES)],
                        dtype=np.float64)

    def get(self, name: str) -> Optional[float]:
        return getattr(self, name)


@dataclass
class F0Track:
    frame_hz: np.ndarray
    frame_len: int
    hop: int

    @classmethod
    def from_values(cls, values: Iterable[Optional[float]], frame_len: int = 640, hop: int = 160) -> "F0Track":
        return cls(np.array([np.nan if v is None else v for v in values], dtype=np.float64), frame_len, hop)

    @property
    def voiced(self) -> np.ndarray:
        return ~np.isnan(self.frame_hz)


def frame_signal(w: Waveform, frame_len: int, hop: int) -> np.ndarray:
    if hop < 1:
        raise ValueError(f"hop must be >= 1, got {hop}")
    if frame_len > len(w):
        raise InsufficientDataError(f"frame length {frame_len} exceeds signal length {len(w)}")
    return sliding_window_view(w.samples, frame_len)[::hop]


def _normalized_autocorrelation(frames: np.ndarray, lags: np.ndarray) -> np.ndarray:
    n_frames, frame_len = frames.shape
    energy = np.zeros((n_frames, frame_len + 1))
    np.cumsum(frames ** 2, axis=1, out=energy[:, 1:])

    nacf = np.zeros((n_frames, lags.size))
    for k, lag in enumerate(lags):
        num = np.einsum("ij,ij->i", frames[:, :frame_len - lag], frames[:, lag:])
        denom = np.sqrt(energy[:, frame_len - lag] * (energy[:, frame_len] - energy[:, lag]))
        np.divide(num, denom, out=nacf[:, k], where=denom > 0)
    return nacf


def _pick_peak(r: np.ndarray, band: range, guard: float) -> Optional[int]:
    peaks = [i for i in band if r[i] > r[i - 1] and r[i] >= r[i + 1]]
    if not peaks:
        return None
    best = max(r[i] for i in peaks)
    return next(i for i in peaks if r[i] >= guard * best)


def estimate_f0(w: Waveform, config: FeatureConfig = DEFAULT_FEATURE_CONFIG) -> F0Track:
    if len(w) < config.frame_len:
        return F0Track(np.zeros(0), config.frame_len, config.hop)

    sr = w.sample_rate
    frames = frame_signal(w, config.frame_len, config.hop)
    lag_min = int(math.ceil(sr / config.f0_max))
    lag_max = int(math.floor(sr / config.f0_min))
    # one extra lag on each side so every in-band lag has both neighbours
    lags = np.arange(lag_min - 1, lag_max + 2)
    nacf = _normalized_autocorrelation(frames, lags)
    rms = np.sqrt(np.mean(frames ** 2, axis=1))
    rms_gate = 10.0 ** (config.rms_gate_db / 20.0)

    band = range(1, lags.size - 1)
    frame_hz = np.full(frames.shape[0], np.nan)
    for j in range(frames.shape[0]):
        if rms[j] < rms_gate:
            continue
        r = nacf[j]
        i = _pick_peak(r, band, config.octave_guard)
        if i is None or r[i] < config.voicing_threshold:
            continue
        curvature = r[i - 1] - 2.0 * r[i] + r[i + 1]
        shift = 0.5 * (r[i - 1] - r[i + 1]) / curvature if curvature < 0 else 0.0
        f0 = sr / (lags[i] + shift)
        if config.f0_min <= f0 <= config.f0_max:
            frame_hz[j] = f0
    return F0Track(frame_hz, config.frame_len, config.hop)


def pitch_stats(track: F0Track) -> Tuple[float, float]:
    voiced = track.frame_hz[track.voiced]
    if voiced.size == 0:
        raise NoVoicingError("no voiced frames in pitch track")
    return float(np.mean(voiced)), float(np.std(voiced))


def intensity(w: Waveform) -> float:
    rms = math.sqrt(float(np.mean(w.samples ** 2)))
    if rms == 0.0:
        return INTENSITY_FLOOR_DB
    return max(20.0 * math.log10(rms), INTENSITY_FLOOR_DB)


def _relative_perturbation(values: Sequence[float], what: str) -> float:
    array = np.asarray(values, dtype=np.float64)
    if array.size < 2:
        raise InsufficientDataError(f"{what} needs at least 2 values, got {array.size}")
    if np.any(array <= 0):
        raise ValueError(f"{what} values must be positive")
    return float(np.mean(np.abs(np.diff(array))) / np.mean(array))


def jitter(periods: Sequence[float]) -> float:
    return _relative_perturbation(periods, "jitter")


def shimmer(peak_amps: Sequence[float]) -> float:
    return _relative_perturbation(peak_amps, "shimmer")


def extract_features(w: Waveform, config: FeatureConfig = DEFAULT_FEATURE_CONFIG) -> FeatureVector:
    track = estimate_f0(w, config)
    voiced = track.voiced
    pitch_mu = pitch_sigma = jitter_value = shimmer_value = None

    if voiced.any():
        pitch_mu, pitch_sigma = pitch_stats(track)
        if voiced.sum() >= 2:
            frames = frame_signal(w, config.frame_len, config.hop)
            jitter_value = jitter(1.0 / track.frame_hz[voiced])
            shimmer_value = shimmer(np.max(np.abs(frames[voiced]), axis=1))

    return FeatureVector(
        pitch_mu=pitch_mu,
        pitch_sigma=pitch_sigma,
        intensity_db=intensity(w),
        jitter=jitter_value,
        shimmer=shimmer_value,
        duration_s=w.duration_s,
    )


def _format_cell(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def write_feature_cache(rows: Sequence[Tuple[str, FeatureVector]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(("id",) + FEATURE_NAMES)
        for utt_id, fv in rows:
            writer.writerow([utt_id] + [_format_cell(fv.get(name)) for name in FEATURE_NAMES])


def load_feature_cache(path) -> Dict[str, FeatureVector]:
    cache: Dict[str, FeatureVector] = {}
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        missing = set(("id",) + FEATURE_NAMES) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: feature cache lacks columns {sorted(missing)}")
        for row in reader:
            values = {name: (float(row[name]) if row[name] != "" else None) for name in FEATURE_NAMES}
            cache[row["id"]] = FeatureVector(**values)
    logger.info("Loaded %d feature rows from %s", len(cache), path)
    return cache
