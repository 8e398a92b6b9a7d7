"""Radar/station ingestion, alignment, filtering, standardization and splitting."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from nowcast.constants import (
    CROP_SIZE,
    GRID_SIZE,
    LEAD_STEPS,
    N_LAGS,
    N_STATIONS,
    N_VARIABLES,
    PRECIP_MAX_MM,
    RADAR_SCALE,
    RADAR_STEP_MIN,
    RAIN_FRACTION,
    STATION_IDS,
    STATION_STEP_MIN,
    TEST_YEARS,
    TRAIN_YEARS,
    VAL_FRACTION,
    VARIABLES,
)
from nowcast.storage import dump_json, load_arrays, save_arrays

logger = logging.getLogger(__name__)

RADAR_STEP_S = RADAR_STEP_MIN * 60
STATION_STEP_S = STATION_STEP_MIN * 60


class PipelineError(ValueError):
    """Invalid input data or an unusable split."""


# ---------------------------------------------------------------- radar frames


def _area_weights(n_in, n_out):
    """(n_out, n_in) matrix of fractional source-pixel coverage per output cell."""
    scale = n_in / n_out
    w = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        for k in range(int(math.floor(lo)), min(int(math.ceil(hi)), n_in)):
            w[i, k] = max(0.0, min(k + 1, hi) - max(k, lo))
    return w / scale


_WEIGHTS = {}


def crop_and_resize(raw, crop=CROP_SIZE, size=GRID_SIZE):
    """Centre-crop ``crop`` x ``crop`` pixels and area-average down to ``size`` x ``size``.

    Each output cell is the coverage-weighted mean of the source pixels it
    overlaps, so constants and the mean rain rate are preserved.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2 or raw.shape[0] < crop or raw.shape[1] < crop:
        raise PipelineError(f"raw grid {raw.shape} is smaller than the {crop}x{crop} crop window")
    if np.any(raw < 0):
        raise PipelineError("raw precipitation contains negative values")
    r0 = (raw.shape[0] - crop) // 2
    c0 = (raw.shape[1] - crop) // 2
    window = raw[r0 : r0 + crop, c0 : c0 + crop]
    key = (crop, size)
    if key not in _WEIGHTS:
        _WEIGHTS[key] = _area_weights(crop, size)
    w = _WEIGHTS[key]
    return w @ window @ w.T


def normalize_precip(grid, max_mm=PRECIP_MAX_MM):
    """Scale mm to [0, 1] by the corpus maximum; larger values are clamped with a warning."""
    grid = np.asarray(grid, dtype=float)
    n_over = int(np.count_nonzero(grid > max_mm))
    if n_over:
        logger.warning("%d pixel(s) above %.2f mm clamped before normalization", n_over, max_mm)
        grid = np.minimum(grid, max_mm)
    return grid / max_mm


def denormalize_precip(grid, max_mm=PRECIP_MAX_MM):
    return np.asarray(grid) * max_mm


def rain_fraction(grid):
    return float(np.count_nonzero(np.asarray(grid) > 0)) / np.asarray(grid).size


def rain_fraction_filter(frames, min_fraction=RAIN_FRACTION):
    """Keep flags for a sequence of frames: strictly-positive pixel fraction >= ``min_fraction``."""
    return np.array([rain_fraction(f) >= min_fraction for f in frames], dtype=bool)


@dataclass(frozen=True)
class RadarFrame:
    timestamp: int
    grid: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        if self.timestamp % RADAR_STEP_S:
            raise PipelineError(f"radar timestamp {self.timestamp} is not on a 5-minute boundary")
        if np.any(self.grid < 0):
            raise PipelineError("radar frame contains negative values")
        if self.normalized and np.any(self.grid > 1):
            raise PipelineError("normalized radar frame exceeds 1")


# ------------------------------------------------------------- station records


def floor_to_station_step(ts):
    return ts - ts % STATION_STEP_S


def load_station_registry(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    ids = [r["station_id"] for r in rows]
    coords = np.array([[float(r["lat"]), float(r["lon"])] for r in rows])
    return ids, coords


def _parse_time(s):
    return int(datetime.strptime(s, "%Y-%m-%dT%H:%M").replace(tzinfo=timezone.utc).timestamp())


def load_station_observations(path, station_ids=STATION_IDS):
    """Read the observation table into {timestamp: (stations, variables)} with NaN gaps."""
    index = {sid: i for i, sid in enumerate(station_ids)}
    records = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if tuple(header[2:]) != VARIABLES:
            raise PipelineError(f"unexpected station columns {header[2:]}")
        for row in reader:
            ts = _parse_time(row[0])
            if row[1] not in index:
                raise PipelineError(f"unknown station id {row[1]!r}")
            rec = records.get(ts)
            if rec is None:
                rec = records[ts] = np.full((len(station_ids), N_VARIABLES), np.nan)
            rec[index[row[1]]] = [float(v) if v != "" else np.nan for v in row[2:]]
    return records


def align_station_records(radar_timestamps, station_series):
    """Station tensor (stations, variables, lags) for one window, or None if incomplete.

    Lag ``i`` takes the record at the input timestamp floored to 10 minutes,
    so the :05 frame reuses the :00 record. Any missing record or missing
    value in a used record excludes the window.
    """
    lags = []
    for ts in radar_timestamps:
        rec = station_series.get(floor_to_station_step(int(ts)))
        if rec is None:
            return None
        if rec.shape != (N_STATIONS, N_VARIABLES):
            raise PipelineError(f"station record has shape {rec.shape}, expected ({N_STATIONS}, {N_VARIABLES})")
        if not np.all(np.isfinite(rec)):
            return None
        lags.append(rec)
    return np.stack(lags, axis=-1)


@dataclass
class StationStats:
    mean: np.ndarray
    std: np.ndarray
    zero_std: list = field(default_factory=list)

    @classmethod
    def fit(cls, records):
        """Per-variable mean/std over an iterable of (stations, variables) records."""
        data = np.concatenate([np.asarray(r).reshape(-1, N_VARIABLES) for r in records], axis=0)
        mean = data.mean(axis=0)
        std = data.std(axis=0)
        zero = [VARIABLES[i] for i in np.flatnonzero(std < 1e-12)]
        if zero:
            logger.warning("zero variance for %s; standardized to zeros", ", ".join(zero))
        return cls(mean, std, zero)

    def to_dict(self):
        return {
            "variables": list(VARIABLES),
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
            "zero_std": list(self.zero_std),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"]), np.array(d["std"]), list(d.get("zero_std", [])))


def standardize_station(values, stats: StationStats, axis=-2):
    """z-score along the variable axis (default: (..., variables, lags) layout)."""
    values = np.asarray(values, dtype=float)
    shape = [1] * values.ndim
    shape[axis] = N_VARIABLES
    mean = stats.mean.reshape(shape)
    std = stats.std.reshape(shape)
    safe = np.where(std < 1e-12, 1.0, std)
    out = (values - mean) / safe
    return np.where(std < 1e-12, 0.0, out)


# --------------------------------------------------------------------- samples


def sample_id(ts):
    return datetime.fromtimestamp(int(ts), tz=timezone.utc).strftime("%Y%m%dT%H%M")


def window_starts(timestamps):
    """Indices i where frames i..i+11 are 5-minute contiguous and the +30 min target exists."""
    pos = {int(t): i for i, t in enumerate(timestamps)}
    starts = []
    for i, t in enumerate(timestamps):
        t = int(t)
        need = [t + k * RADAR_STEP_S for k in range(N_LAGS)] + [t + (N_LAGS - 1 + LEAD_STEPS) * RADAR_STEP_S]
        if all(n in pos for n in need):
            starts.append(i)
    return starts


@dataclass
class AlignedSample:
    sample_id: str
    input_times: np.ndarray
    target_time: int
    inputs: np.ndarray
    target: np.ndarray
    stations: np.ndarray

    def __post_init__(self):
        d = np.diff(self.input_times)
        if len(self.input_times) != N_LAGS or np.any(d != RADAR_STEP_S):
            raise PipelineError("input timestamps must be 12 frames at 5-minute spacing")
        if self.target_time != int(self.input_times[-1]) + LEAD_STEPS * RADAR_STEP_S:
            raise PipelineError("target must be 30 minutes after the last input")
        if self.stations.shape != (N_STATIONS, N_VARIABLES, N_LAGS):
            raise PipelineError(f"station tensor shape {self.stations.shape}")


@dataclass(frozen=True)
class PreprocessConfig:
    rain_fraction: float = RAIN_FRACTION
    # "target" or "last_input"
    filter_frame: str = "target"
    val_fraction: float = VAL_FRACTION
    seed: int = 0
    train_years: tuple = TRAIN_YEARS
    test_years: tuple = TEST_YEARS

    def __post_init__(self):
        if self.filter_frame not in ("target", "last_input"):
            raise PipelineError("filter_frame must be 'target' or 'last_input'")
        if not 0 <= self.rain_fraction <= 1:
            raise PipelineError("rain_fraction must be in [0, 1]")
        if not 0 < self.val_fraction < 1:
            raise PipelineError("val_fraction must be in (0, 1)")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def config_hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def load_radar_day(path):
    """(timestamps, frames in mm) from one day container."""
    z = load_arrays(path)
    return z["timestamps"].astype(np.int64), z["frames"].astype(np.float64) * RADAR_SCALE


def corpus_hash(corpus_root):
    root = Path(corpus_root)
    h = hashlib.sha256()
    files = sorted(root.glob("radar/*.npz")) + sorted(root.glob("radar/*.json")) + sorted(root.glob("stations/*.csv"))
    for p in files:
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def validation_count(n_train, fraction=VAL_FRACTION):
    return int(math.floor(n_train * fraction + 0.5))


def split_validation(ids, fraction, seed):
    """Random ``fraction`` of ``ids`` (rounded half up) as validation; returns (train, val)."""
    n_val = validation_count(len(ids), fraction)
    perm = np.random.default_rng(seed).permutation(len(ids))
    val_idx = set(perm[:n_val].tolist())
    train = [x for i, x in enumerate(ids) if i not in val_idx]
    val = [x for i, x in enumerate(ids) if i in val_idx]
    return train, val


def season(ts):
    m = datetime.fromtimestamp(int(ts), tz=timezone.utc).month
    return {12: "winter", 1: "winter", 2: "winter", 3: "spring", 4: "spring", 5: "spring",
            6: "summer", 7: "summer", 8: "summer"}.get(m, "autumn")


def collect_samples(corpus_root, config: PreprocessConfig):
    """Walk the radar days, build windows, filter and align. Returns (samples, counts)."""
    root = Path(corpus_root)
    day_files = sorted((root / "radar").glob("*.npz"))
    if not day_files:
        raise FileNotFoundError(f"no radar containers under {root / 'radar'}")
    stations = load_station_observations(root / "stations" / "observations.csv")
    counts = {"windows": 0, "dropped_rain_filter": 0, "dropped_station_missing": 0,
              "clamped_pixels": 0, "kept": 0}
    samples = []
    for path in day_files:
        times, frames_mm = load_radar_day(path)
        small = []
        for f in frames_mm:
            g = crop_and_resize(f)
            counts["clamped_pixels"] += int(np.count_nonzero(g > PRECIP_MAX_MM))
            small.append(normalize_precip(g))
        small = np.stack(small).astype(np.float32)
        for i in window_starts(times):
            counts["windows"] += 1
            target_idx = i + N_LAGS - 1 + LEAD_STEPS
            probe = small[target_idx] if config.filter_frame == "target" else small[i + N_LAGS - 1]
            if rain_fraction(probe) < config.rain_fraction:
                counts["dropped_rain_filter"] += 1
                continue
            in_times = times[i : i + N_LAGS]
            st = align_station_records(in_times, stations)
            if st is None:
                counts["dropped_station_missing"] += 1
                continue
            samples.append(
                AlignedSample(
                    sample_id=sample_id(in_times[-1]),
                    input_times=in_times,
                    target_time=int(times[target_idx]),
                    inputs=small[i : i + N_LAGS],
                    target=small[target_idx][None],
                    stations=st,
                )
            )
    counts["kept"] = len(samples)
    return samples, counts


@dataclass
class DatasetManifest:
    splits: dict
    stats: StationStats
    config: PreprocessConfig
    counts: dict
    corpus_hash: str = ""
    seasons: dict = field(default_factory=dict)

    @property
    def preprocess_hash(self):
        blob = json.dumps({"corpus": self.corpus_hash, "config": self.config.to_dict()}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_dict(self):
        return {
            "config": self.config.to_dict(),
            "corpus_hash": self.corpus_hash,
            "preprocess_hash": self.preprocess_hash,
            "counts": self.counts,
            "sizes": {k: len(v) for k, v in self.splits.items()},
            "splits": self.splits,
            "station_stats": self.stats.to_dict(),
            "test_seasons": self.seasons,
        }

    @classmethod
    def from_dict(cls, d):
        cfg = d["config"]
        cfg = PreprocessConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()})
        return cls(d["splits"], StationStats.from_dict(d["station_stats"]), cfg, d["counts"],
                   d["corpus_hash"], d.get("test_seasons", {}))


def build_manifest(samples, config: PreprocessConfig, counts=None, corpus_hash_value=""):
    """Year-based train/test split, seeded validation carve-out, train-only station statistics."""
    train_all = [s for s in samples if _year(s.input_times[-1]) in config.train_years]
    test = [s for s in samples if _year(s.input_times[-1]) in config.test_years]
    train_ids, val_ids = split_validation([s.sample_id for s in train_all], config.val_fraction, config.seed)
    splits = {"train": train_ids, "validation": val_ids, "test": [s.sample_id for s in test]}
    for name, ids in splits.items():
        if not ids:
            raise PipelineError(f"{name} split is empty")
    train_set = set(train_ids)
    # each 10-minute record counted once, however many windows reuse it
    used = {}
    for s in train_all:
        if s.sample_id in train_set:
            for lag, ts in enumerate(s.input_times):
                used.setdefault(floor_to_station_step(int(ts)), s.stations[:, :, lag])
    stats = StationStats.fit([used[k] for k in sorted(used)])
    seasons = {}
    for s in test:
        seasons[season(s.input_times[-1])] = seasons.get(season(s.input_times[-1]), 0) + 1
    return DatasetManifest(splits, stats, config, dict(counts or {}), corpus_hash_value, seasons)


def _year(ts):
    return datetime.fromtimestamp(int(ts), tz=timezone.utc).year


def preprocess(corpus_root, out_dir, config: PreprocessConfig):
    """Full preprocessing: writes manifest.json and one array container per split."""
    samples, counts = collect_samples(corpus_root, config)
    manifest = build_manifest(samples, config, counts, corpus_hash(corpus_root))
    by_id = {s.sample_id: s for s in samples}
    out = Path(out_dir)
    for split, ids in manifest.splits.items():
        chosen = [by_id[i] for i in ids]
        save_arrays(
            out / f"{split}.npz",
            ids=np.array(ids),
            inputs=np.stack([s.inputs for s in chosen]).astype(np.float32),
            target=np.stack([s.target for s in chosen]).astype(np.float32),
            stations=standardize_station(np.stack([s.stations for s in chosen]), manifest.stats).astype(np.float32),
            stations_raw=np.stack([s.stations for s in chosen]).astype(np.float32),
            input_times=np.stack([s.input_times for s in chosen]).astype(np.int64),
        )
    dump_json(out / "manifest.json", manifest.to_dict())
    return manifest


def load_manifest(path):
    from nowcast.storage import load_json

    return DatasetManifest.from_dict(load_json(path))


def load_split(prep_dir, split):
    return load_arrays(Path(prep_dir) / f"{split}.npz")
