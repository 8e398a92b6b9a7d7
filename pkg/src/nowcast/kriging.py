"""Ordinary kriging of station observations onto the 64x64 radar grid.

Distances are great-circle kilometres. A spherical variogram is fitted per
(variable, timestep) and the ordinary-kriging system is solved through a
truncated pseudo-inverse.
"""
from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import least_squares

from nowcast.constants import BOUNDS, EARTH_RADIUS_KM, GRID_SIZE, N_LAGS, N_VARIABLES

logger = logging.getLogger(__name__)

PINV_RCOND = 1e-10


class KrigingError(RuntimeError):
    """Raised when a kriging system cannot be solved or has no data."""

    def __init__(self, message, condition=None):
        super().__init__(message if condition is None else f"{message} (condition number {condition:.3e})")
        self.condition = condition


def great_circle_distance(a, b, radius=EARTH_RADIUS_KM):
    """Haversine distance in km between (lat, lon) points given in degrees.

    ``a`` and ``b`` broadcast against each other; the trailing axis holds
    (lat, lon).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    for p in (a, b):
        if np.any(np.abs(p[..., 0]) > 90) or np.any(np.abs(p[..., 1]) > 180):
            raise ValueError("coordinates out of range: lat must be in [-90, 90], lon in [-180, 180]")
    lat1, lon1 = np.radians(a[..., 0]), np.radians(a[..., 1])
    lat2, lon2 = np.radians(b[..., 0]), np.radians(b[..., 1])
    h = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    return 2 * radius * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def pairwise_distances(sites):
    sites = np.asarray(sites, dtype=float)
    return great_circle_distance(sites[:, None, :], sites[None, :, :])


@dataclass(frozen=True)
class VariogramModel:
    """Spherical variogram with nugget, partial sill and range (km)."""

    nugget: float
    sill: float
    range: float
    residual: float = 0.0
    n_bins: int = 0

    def __post_init__(self):
        if self.nugget < 0 or self.sill < 0:
            raise ValueError("nugget and partial sill must be non-negative")
        if not self.range > 0:
            raise ValueError("range must be positive")

    @property
    def is_constant(self):
        return self.nugget == 0.0 and self.sill == 0.0

    def __call__(self, h):
        return spherical(np.asarray(h, dtype=float), self.nugget, self.sill, self.range)


def spherical(h, nugget, sill, rng):
    r = np.minimum(h / rng, 1.0)
    return nugget + sill * (1.5 * r - 0.5 * r**3)


def empirical_variogram(sites, values, n_bins=8):
    """Binned semivariance: mean of 0.5 * (v_i - v_j)**2 over the pairs in each bin.

    Bins split [0, max pairwise distance] evenly; empty bins are dropped.
    Returns (lag centres, semivariances).
    """
    sites = np.asarray(sites, dtype=float)
    values = np.asarray(values, dtype=float)
    if len(np.unique(sites, axis=0)) < 2:
        raise ValueError("empirical variogram needs at least two distinct sites")
    d = pairwise_distances(sites)
    iu = np.triu_indices(len(sites), k=1)
    dist = d[iu]
    semi = 0.5 * (values[:, None] - values[None, :])[iu] ** 2
    edges = np.linspace(0.0, dist.max(), n_bins + 1)
    idx = np.clip(np.digitize(dist, edges[1:-1], right=True), 0, n_bins - 1)
    lags, gammas = [], []
    for b in range(n_bins):
        sel = idx == b
        if sel.any():
            lags.append(dist[sel].mean())
            gammas.append(semi[sel].mean())
    return np.array(lags), np.array(gammas)


def fit_spherical(lags, semivariances, variance=None):
    """Bounded least-squares fit of a spherical model to binned semivariances.

    Starts from nugget = min semivariance, sill = ``variance`` (or the
    semivariance spread) and range = half the largest lag. When the fitted
    range falls below the shortest lag, nugget and sill cannot be told apart
    and the total is reported as nugget.
    """
    lags = np.asarray(lags, dtype=float)
    gam = np.asarray(semivariances, dtype=float)
    max_lag = float(lags.max())
    if np.all(np.abs(gam) < 1e-12):
        return VariogramModel(0.0, 0.0, max_lag, 0.0, len(lags))

    sill0 = float(variance) if variance is not None and variance > 0 else float(gam.max() - gam.min())
    x0 = np.array([max(gam.min(), 0.0), max(sill0, 1e-12), 0.5 * max_lag])
    upper = np.array([np.inf, np.inf, 1.5 * max_lag])
    lower = np.array([0.0, 0.0, 1e-9 * max_lag])
    x0 = np.clip(x0, lower, upper - 1e-12 * max_lag)

    if len(lags) < 3:
        logger.warning("only %d lag bins; using the moment-based initial model", len(lags))
        return VariogramModel(float(x0[0]), float(x0[1]), float(x0[2]), np.nan, len(lags))

    def resid(p):
        return spherical(lags, *p) - gam

    res = least_squares(resid, x0, bounds=(lower, upper), method="trf", x_scale="jac",
                        xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000)
    p = res.x
    if not res.success:
        # budget exhausted: keep the last iterate if it beats the start
        if 0.5 * np.sum(resid(x0) ** 2) < res.cost or not np.all(np.isfinite(res.x)):
            logger.warning("variogram fit did not converge (%s); using the initial model", res.message)
            p = x0
        else:
            logger.debug("variogram fit stopped early: %s", res.message)
    nugget, sill, rng = (float(v) for v in p)
    if rng < lags.min():
        nugget, sill = nugget + sill, 0.0
    resnorm = float(np.linalg.norm(resid([nugget, sill, rng])))
    return VariogramModel(max(nugget, 0.0), max(sill, 0.0), rng, resnorm, len(lags))


@dataclass
class KrigingWeights:
    weights: np.ndarray
    multiplier: float


def _system_matrix(sites, model):
    m = len(sites)
    a = np.ones((m + 1, m + 1))
    a[:m, :m] = model(pairwise_distances(sites))
    np.fill_diagonal(a[:m, :m], 0.0)
    a[m, m] = 0.0
    return a


def _rhs(sites, model, queries):
    d = great_circle_distance(np.asarray(sites)[None, :, :], np.asarray(queries)[:, None, :])
    g = model(d)
    # exact interpolation at a site: zero semivariance to itself
    g[d < 1e-10] = 0.0
    return np.concatenate([g, np.ones((len(queries), 1))], axis=1).T


def _solve(a, b):
    """Pseudo-inverse solve of a @ x = b with the residual checked."""
    pinv = np.linalg.pinv(a, rcond=PINV_RCOND)
    x = pinv @ b
    r = np.abs(a @ x - b).max()
    scale = max(np.abs(b).max(), 1.0)
    if not np.isfinite(r) or r > 1e-6 * scale:
        s = np.linalg.svd(a, compute_uv=False)
        raise KrigingError("kriging system is inconsistent beyond the pseudo-inverse tolerance",
                           condition=float(s[0] / max(s[-1], np.finfo(float).tiny)))
    return x


def solve_ordinary_kriging(sites, values, model, query):
    """Weights and estimate at a single (lat, lon) query point.

    ``sites`` must not contain duplicate coordinates (see ``merge_coincident``).
    """
    sites = np.asarray(sites, dtype=float)
    values = np.asarray(values, dtype=float)
    a = _system_matrix(sites, model)
    b = _rhs(sites, model, np.asarray(query, dtype=float)[None, :])
    x = _solve(a, b)[:, 0]
    lam = x[:-1]
    return KrigingWeights(lam, float(x[-1])), float(lam @ values)


def krige_points(sites, values, model, queries):
    """Kriging estimates at many query points with one factorization."""
    sites = np.asarray(sites, dtype=float)
    values = np.asarray(values, dtype=float)
    a = _system_matrix(sites, model)
    x = _solve(a, _rhs(sites, model, queries))
    return values @ x[:-1]


def merge_coincident(sites, values):
    """Average observations that share a coordinate; drops NaN values."""
    sites = np.asarray(sites, dtype=float)
    values = np.asarray(values, dtype=float)
    ok = np.isfinite(values)
    sites, values = sites[ok], values[ok]
    uniq, inverse = np.unique(sites, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    sums = np.bincount(inverse, weights=values, minlength=len(uniq))
    counts = np.bincount(inverse, minlength=len(uniq))
    return uniq, sums / counts


def grid_coordinates(size=GRID_SIZE, bounds=BOUNDS):
    """(size*size, 2) array of (lat, lon) cell centres, row 0 at the northern edge."""
    lons = bounds["lon_min"] + (np.arange(size) + 0.5) * (bounds["lon_max"] - bounds["lon_min"]) / size
    lats = bounds["lat_max"] - (np.arange(size) + 0.5) * (bounds["lat_max"] - bounds["lat_min"]) / size
    la, lo = np.meshgrid(lats, lons, indexing="ij")
    return np.stack([la.ravel(), lo.ravel()], axis=1)


@dataclass(frozen=True)
class KrigeConfig:
    n_bins: int = 8
    grid_size: int = GRID_SIZE
    # krige standardized station values (True) or raw values (False)
    standardized: bool = True

    def config_hash(self):
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def rasterize_variable(sites, values, grid=None, n_bins=8, model=None):
    """Krige one variable at one timestep onto the grid; returns (map, model)."""
    sites, values = merge_coincident(sites, values)
    if len(values) == 0:
        raise KrigingError("no observations to rasterize")
    grid = grid_coordinates() if grid is None else grid
    size = int(round(np.sqrt(len(grid))))
    if len(values) == 1:
        return np.full((size, size), values[0]), None
    if model is None:
        lags, gam = empirical_variogram(sites, values, n_bins)
        model = fit_spherical(lags, gam, variance=float(np.var(values)))
    est = krige_points(sites, values, model, grid)
    return est.reshape(size, size), model


@dataclass
class KrigeStack:
    """Kriged station maps of one sample, shaped (lags, variables, H, W)."""

    maps: np.ndarray
    config_hash: str = ""
    models: list = field(default_factory=list)

    def __post_init__(self):
        if self.maps.shape[:2] != (N_LAGS, N_VARIABLES):
            raise ValueError(f"kriging stack must be ({N_LAGS}, {N_VARIABLES}, H, W), got {self.maps.shape}")

    def flatten(self):
        """Channels ordered lag-major, variable-minor: channel = lag * 8 + variable."""
        l, v, h, w = self.maps.shape
        return self.maps.reshape(l * v, h, w)


def variable_channels(variable_index):
    """Channel indices of one variable in the flattened stack."""
    return [lag * N_VARIABLES + variable_index for lag in range(N_LAGS)]


def krige_record(sites, record, config=KrigeConfig()):
    """Rasterize all variables of one station record (stations, variables) -> (variables, H, W)."""
    grid = grid_coordinates(config.grid_size)
    out = np.empty((record.shape[1], config.grid_size, config.grid_size))
    for v in range(record.shape[1]):
        out[v], _ = rasterize_variable(sites, record[:, v], grid, config.n_bins)
    return out


def build_krige_stack(sites, station_tensor, config=KrigeConfig(), cache=None):
    """Krige every (lag, variable) of a (stations, variables, lags) tensor.

    ``cache`` maps a record's bytes to its kriged maps so lags that reuse the
    same 10-minute record are only kriged once.
    """
    station_tensor = np.asarray(station_tensor, dtype=float)
    maps = np.empty((station_tensor.shape[2], station_tensor.shape[1], config.grid_size, config.grid_size))
    for lag in range(station_tensor.shape[2]):
        record = station_tensor[:, :, lag]
        key = record.tobytes()
        if cache is not None and key in cache:
            maps[lag] = cache[key]
            continue
        maps[lag] = krige_record(sites, record, config)
        if cache is not None:
            cache[key] = maps[lag]
    return KrigeStack(maps.astype(np.float32), config.config_hash())


def _krige_many(args):
    sites, tensors, config = args
    cache = {}
    out = []
    for t in tensors:
        try:
            out.append(build_krige_stack(sites, t, config, cache).maps)
        except KrigingError as exc:
            logger.warning("kriging failed: %s", exc)
            out.append(None)
    return out


def build_krige_stacks(sites, station_tensors, config=KrigeConfig(), workers=1):
    """Kriging stacks for a batch of samples, optionally across processes.

    Failed samples come back as None. Results do not depend on ``workers``:
    every map is computed by the same pure function.
    """
    tensors = list(station_tensors)
    if workers <= 1 or len(tensors) < 2:
        return _krige_many((sites, tensors, config))
    chunks = np.array_split(np.arange(len(tensors)), workers)
    jobs = [(sites, [tensors[i] for i in c], config) for c in chunks if len(c)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_krige_many, jobs))
    return [m for part in parts for m in part]
