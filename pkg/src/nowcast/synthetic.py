"""Deterministic synthetic corpus: advecting Gaussian rain blobs plus station series.

Radar days are written as raw (unsized) grids so the full preprocessing chain
runs on them; the station series are sampled from smooth latent fields that
are coupled to the rain field and the advection velocity.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from nowcast.constants import (
    BOUNDS,
    CROP_SIZE,
    PRECIP_MAX_MM,
    RADAR_SCALE,
    RADAR_STEP_MIN,
    STATION_STEP_MIN,
    STATIONS,
    TEST_YEARS,
    TRAIN_YEARS,
    VARIABLES,
)
from nowcast.errors import ConfigError
from nowcast.storage import dump_json, save_arrays, write_text_atomic

logger = logging.getLogger(__name__)

# raw pixel edge length in km (2.44 deg of longitude at ~52 N over 288 px)
PIXEL_KM = 0.58
RAIN_CUTOFF_MM = 0.01


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    blobs: int = 7
    # mean advection in raw pixels per 5-minute step (x east, y south)
    velocity: tuple = (3.0, 1.5)
    velocity_jitter: float = 0.3
    station_noise: float = 0.1
    years: tuple = TRAIN_YEARS + TEST_YEARS
    days_per_year: int = 2
    hours_per_day: int = 3
    raw_size: int = CROP_SIZE
    sigma_px: tuple = (20.0, 50.0)
    amplitude_mm: tuple = (0.3, 2.5)
    margin_px: int = 120
    station_missing_rate: float = 0.0

    def __post_init__(self):
        if self.blobs < 0:
            raise ConfigError("blobs must be >= 0")
        for name in ("days_per_year", "hours_per_day"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.raw_size < CROP_SIZE:
            raise ConfigError(f"raw_size must be >= {CROP_SIZE}")
        if not 0 <= self.station_missing_rate < 1:
            raise ConfigError("station_missing_rate must be in [0, 1)")
        if self.station_noise < 0 or self.velocity_jitter < 0:
            raise ConfigError("noise and jitter must be non-negative")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class Blob:
    x0: float
    y0: float
    vx: float
    vy: float
    sigma: float
    amplitude: float
    phase: float
    period_steps: float


@dataclass
class DayTruth:
    date: str
    t0: int
    n_frames: int
    domain: float
    offset: float
    blobs: list = field(default_factory=list)

    def to_dict(self):
        d = asdict(self)
        return d


def blob_center(blob, step, domain, offset):
    """Raw-grid pixel centre of ``blob`` after ``step`` 5-minute steps (periodic domain)."""
    x = (blob.x0 + blob.vx * step) % domain - offset
    y = (blob.y0 + blob.vy * step) % domain - offset
    return x, y


def rain_field(day: DayTruth, step, xs, ys):
    """Precipitation depth (mm per 5 min) at raw pixel coordinates ``xs``, ``ys``."""
    out = np.zeros(np.broadcast(xs, ys).shape)
    for b in day.blobs:
        cx, cy = blob_center(b, step, day.domain, day.offset)
        dx = (xs - cx + day.domain / 2) % day.domain - day.domain / 2
        dy = (ys - cy + day.domain / 2) % day.domain - day.domain / 2
        amp = b.amplitude * (1.0 + 0.3 * math.sin(2 * math.pi * step / b.period_steps + b.phase))
        out += amp * np.exp(-(dx**2 + dy**2) / (2 * b.sigma**2))
    out[out < RAIN_CUTOFF_MM] = 0.0
    return np.minimum(out, PRECIP_MAX_MM)


def station_pixels(raw_size=CROP_SIZE):
    off = (raw_size - CROP_SIZE) / 2
    lat = np.array([s[1] for s in STATIONS])
    lon = np.array([s[2] for s in STATIONS])
    px = off + (lon - BOUNDS["lon_min"]) / (BOUNDS["lon_max"] - BOUNDS["lon_min"]) * CROP_SIZE
    py = off + (BOUNDS["lat_max"] - lat) / (BOUNDS["lat_max"] - BOUNDS["lat_min"]) * CROP_SIZE
    return px, py


def _day_dates(cfg):
    dates = []
    for year in cfg.years:
        for k in range(cfg.days_per_year):
            doy = 15 + int(k * 365 / cfg.days_per_year)
            day = datetime(year, 1, 1, tzinfo=timezone.utc) + timedelta(days=doy - 1)
            dates.append(day.replace(hour=10))
    return dates


def _make_day(cfg, start, rng):
    domain = cfg.raw_size + 2 * cfg.margin_px
    n_frames = cfg.hours_per_day * 60 // RADAR_STEP_MIN
    angle = rng.uniform(-1, 1) * cfg.velocity_jitter * math.pi / 2
    scale = 1.0 + rng.uniform(-1, 1) * cfg.velocity_jitter
    c, s = math.cos(angle), math.sin(angle)
    vx = scale * (c * cfg.velocity[0] - s * cfg.velocity[1])
    vy = scale * (s * cfg.velocity[0] + c * cfg.velocity[1])
    blobs = [
        Blob(
            x0=float(rng.uniform(0, domain)),
            y0=float(rng.uniform(0, domain)),
            vx=float(vx),
            vy=float(vy),
            sigma=float(rng.uniform(*cfg.sigma_px)),
            amplitude=float(rng.uniform(*cfg.amplitude_mm)),
            phase=float(rng.uniform(0, 2 * math.pi)),
            period_steps=float(rng.uniform(24, 72)),
        )
        for _ in range(cfg.blobs)
    ]
    return DayTruth(
        date=start.strftime("%Y%m%d"),
        t0=int(start.timestamp()),
        n_frames=n_frames,
        domain=float(domain),
        offset=float(cfg.margin_px),
        blobs=blobs,
    )


def _station_rows(cfg, day, rng):
    px, py = station_pixels(cfg.raw_size)
    start = datetime.fromtimestamp(day.t0, tz=timezone.utc)
    doy = start.timetuple().tm_yday
    n_steps = day.n_frames * RADAR_STEP_MIN // STATION_STEP_MIN
    # large-scale pressure wave, fixed per day
    p_phase = rng.uniform(0, 2 * math.pi)
    vx, vy = (day.blobs[0].vx, day.blobs[0].vy) if day.blobs else (cfg.velocity[0], cfg.velocity[1])
    speed = math.hypot(vx, vy) * PIXEL_KM * 1000 / (RADAR_STEP_MIN * 60)
    # meteorological convention: direction the wind blows from, clockwise from north
    toward = math.degrees(math.atan2(vx, -vy))
    from_dir = (toward + 180.0) % 360.0
    noise = cfg.station_noise
    rows = []
    for k in range(n_steps):
        step = k * STATION_STEP_MIN // RADAR_STEP_MIN
        ts = day.t0 + k * STATION_STEP_MIN * 60
        hour = (start.hour + k * STATION_STEP_MIN / 60) % 24
        rain = rain_field(day, step, px, py)
        ahead = rain_field(day, step + 6, px, py)
        n = rng.normal(size=(len(px), len(VARIABLES)))
        temp = (10 + 8 * math.sin(2 * math.pi * (doy - 110) / 365) + 3 * math.sin(2 * math.pi * (hour - 9) / 24)
                - 0.01 * (py - 144) - 1.5 * rain + 0.5 * noise * n[:, 0])
        humid = np.clip(70 + 12 * np.tanh(2 * rain) + 10 * np.tanh(2 * ahead) + 3 * noise * n[:, 1], 0, 100)
        press = (1013 + 6 * math.sin(2 * math.pi * doy / 30 + p_phase) + 0.005 * (px - 144)
                 - 3 * ahead + 0.3 * noise * n[:, 2])
        wspd = np.maximum(speed * (1 + 0.2 * np.tanh(rain)) + noise * n[:, 3], 0)
        wdir = (from_dir + 10 * noise * n[:, 4]) % 360
        sdir = np.maximum(12 + 6 * np.tanh(rain) + 2 * noise * n[:, 5], 0)
        sspd = np.maximum(0.15 * wspd + 0.2 * noise * n[:, 6], 0)
        wmax = np.maximum(1.4 * wspd + noise * n[:, 7], wspd)
        vals = np.stack([temp, humid, press, wspd, wdir, sdir, sspd, wmax], axis=1)
        drop = rng.uniform(size=len(px)) < cfg.station_missing_rate
        for i, (sid, _, _) in enumerate(STATIONS):
            if drop[i]:
                continue
            rows.append((ts, sid, vals[i]))
    return rows


def _format_time(ts):
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M")


def generate_synthetic_corpus(cfg: SynthConfig, out_dir):
    """Write a synthetic corpus under ``out_dir``; returns a summary dict.

    Layout::

        corpus.json                 generator config
        radar/YYYYMMDD.npz          timestamps (int64 s), frames (uint16, 0.01 mm)
        radar/YYYYMMDD.json         sidecar metadata incl. blob ground truth
        stations/stations.csv       station_id, lat, lon
        stations/observations.csv   timestamp, station_id, 8 variables
    """
    out = Path(out_dir)
    (out / "radar").mkdir(parents=True, exist_ok=True)
    (out / "stations").mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(cfg.seed).spawn(len(cfg.years) * cfg.days_per_year)
    yy, xx = np.mgrid[0 : cfg.raw_size, 0 : cfg.raw_size].astype(float) + 0.5
    all_rows = []
    days = []
    for start, ss in zip(_day_dates(cfg), seeds):
        rng = np.random.default_rng(ss)
        day = _make_day(cfg, start, rng)
        frames = np.empty((day.n_frames, cfg.raw_size, cfg.raw_size), dtype=np.uint16)
        for step in range(day.n_frames):
            mm = rain_field(day, step, xx, yy)
            frames[step] = np.round(mm / RADAR_SCALE).astype(np.uint16)
        ts = day.t0 + np.arange(day.n_frames, dtype=np.int64) * RADAR_STEP_MIN * 60
        save_arrays(out / "radar" / f"{day.date}.npz", timestamps=ts, frames=frames)
        dump_json(
            out / "radar" / f"{day.date}.json",
            {
                "date": day.date,
                "cadence_min": RADAR_STEP_MIN,
                "scale_mm": RADAR_SCALE,
                "unit": "mm per 5-minute accumulation",
                "shape": list(frames.shape),
                "bounds": BOUNDS,
                "truth": day.to_dict(),
            },
        )
        all_rows.extend(_station_rows(cfg, day, rng))
        days.append(day.date)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["station_id", "lat", "lon"])
    for sid, lat, lon in STATIONS:
        w.writerow([sid, f"{lat:.3f}", f"{lon:.3f}"])
    write_text_atomic(out / "stations" / "stations.csv", buf.getvalue())

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["timestamp", "station_id", *VARIABLES])
    for ts, sid, vals in all_rows:
        w.writerow([_format_time(ts), sid, *(f"{v:.3f}" for v in vals)])
    write_text_atomic(out / "stations" / "observations.csv", buf.getvalue())

    dump_json(out / "corpus.json", {"generator": "synthetic", "config": cfg.to_dict(), "days": days})
    return {"days": days, "station_rows": len(all_rows)}


def load_truth(corpus_dir, date):
    from nowcast.storage import load_json

    meta = load_json(Path(corpus_dir) / "radar" / f"{date}.json")["truth"]
    blobs = [Blob(**b) for b in meta.pop("blobs")]
    return DayTruth(blobs=blobs, **meta)
