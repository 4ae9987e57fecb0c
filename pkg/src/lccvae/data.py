"""Ensemble container, ENSB binary format, normalization and coverage masks.

The synthetic generator is a desk-scale stand-in for a reanalysis ensemble:

    y_r(x, t) = base(x) + trend * t / 120
                + amp(x) * sin(2 pi t / 12 + phase(x)) + eta_r(x, t)

with, for latitude ``phi`` and longitude ``lam`` in radians,

    base(x)  = 258.15 + 35 cos(phi)^2 + 3 sin(lam) cos(phi)
    amp(x)   = seasonal_amp * (0.3 + 0.7 |sin(phi)|) * (1 + 0.2 cos(lam))
    phase(x) = pi/2 * (1 - tanh(lat_deg / 15)) + 0.3 sin(lam)

``eta_r`` is built from white noise smoothed on the grid by a Gaussian
kernel of width ``spatial_corr_len`` grid cells (wrapping in longitude):

    eta_r(x, t) = noise_sigma * ( sqrt(1 - w) * sum_j a_rj(x) psi_j(t)
                                  + sqrt(w) * e_r(x, t) )

``a_rj`` are ``n_modes`` smoothed unit-variance fields per realization,
``psi(t)`` is a unit vector drifting slowly in time and shared by all
realizations, and ``e_r`` is
smoothed noise drawn afresh every month (fraction ``w = white_fraction`` of
the variance).  The variance of ``eta_r`` at every (x, t) is
``noise_sigma**2``.  Every realization shares the
deterministic part; only ``eta_r`` differs.
"""
from __future__ import annotations

import csv
import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, gaussian_filter1d

MAGIC = b"ENSB"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIi")

__all__ = [
    "EnsembleFormatError",
    "EnsembleDataset",
    "SyntheticConfig",
    "NormStats",
    "CoverageMask",
    "generate_synthetic",
    "synthetic_deterministic_part",
    "location_features",
    "save_ensemble",
    "load_ensemble",
    "import_csv",
    "normalize",
    "denormalize",
    "make_coverage_mask",
    "coverage_count",
]


class EnsembleFormatError(ValueError):
    """Malformed ENSB/CSV input or an ensemble violating its invariants."""


@dataclass(frozen=True)
class EnsembleDataset:
    """R realizations x L locations x T months.

    ``values`` is stored as float32 (the on-disk precision) so that a
    save/load round trip is exact.  ``coords`` holds (lat, lon) in degrees.
    """

    coords: np.ndarray
    values: np.ndarray
    start_year: int = 1940

    def __post_init__(self):
        coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        values = np.ascontiguousarray(self.values, dtype=np.float32)
        if values.ndim != 3 or min(values.shape) < 1:
            raise EnsembleFormatError(f"values must be a non-empty R x L x T array, got {values.shape}")
        if coords.shape != (values.shape[1], 2):
            raise EnsembleFormatError(f"coords shape {coords.shape} does not match L={values.shape[1]}")
        bad = np.argwhere(~np.isfinite(values))
        if bad.size:
            r, l, t = (int(i) for i in bad[0])
            raise EnsembleFormatError(f"non-finite value at (r={r}, l={l}, t={t})")
        lat, lon = coords[:, 0], coords[:, 1]
        if np.any(np.abs(lat) > 90) or np.any(lon < -180) or np.any(lon >= 180):
            raise EnsembleFormatError("coordinates out of range: lat in [-90, 90], lon in [-180, 180)")
        if len(np.unique(coords, axis=0)) != len(coords):
            raise EnsembleFormatError("duplicate location coordinates")
        std = values.astype(np.float64).transpose(1, 0, 2).reshape(values.shape[1], -1).std(axis=1)
        if np.any(std == 0):
            raise EnsembleFormatError(f"constant series at location {int(np.argmin(std))}")
        coords.flags.writeable = False
        values.flags.writeable = False
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "values", values)

    @property
    def R(self) -> int:
        return self.values.shape[0]

    @property
    def L(self) -> int:
        return self.values.shape[1]

    @property
    def T(self) -> int:
        return self.values.shape[2]

    @property
    def meta(self) -> dict:
        return {"R": self.R, "L": self.L, "T": self.T, "start_year": self.start_year}

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.coords.tobytes())
        h.update(self.values.tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class SyntheticConfig:
    R: int = 10
    L_grid: int = 16
    T: int = 240
    seed: int = 0
    trend_per_decade: float = 0.2
    seasonal_amp: float = 10.0
    noise_sigma: float = 1.0
    spatial_corr_len: float = 1.5
    n_modes: int = 3
    white_fraction: float = 0.2
    mode_corr_months: float = 6.0
    start_year: int = 1940


def _grid(n: int) -> np.ndarray:
    lats = np.linspace(60.0, -60.0, n) if n > 1 else np.zeros(1)
    lons = -180.0 + (np.arange(n) + 0.5) * 360.0 / n
    la, lo = np.meshgrid(lats, lons, indexing="ij")
    return np.column_stack([la.ravel(), lo.ravel()])


def synthetic_deterministic_part(cfg: SyntheticConfig, coords: np.ndarray | None = None) -> np.ndarray:
    """The shared (noise-free) component, shape (L, T), float64."""
    if coords is None:
        coords = _grid(cfg.L_grid)
    lat = coords[:, 0:1]
    phi = np.deg2rad(lat)
    lam = np.deg2rad(coords[:, 1:2])
    t = np.arange(cfg.T)[None, :]
    base = 258.15 + 35.0 * np.cos(phi) ** 2 + 3.0 * np.sin(lam) * np.cos(phi)
    amp = cfg.seasonal_amp * (0.3 + 0.7 * np.abs(np.sin(phi))) * (1.0 + 0.2 * np.cos(lam))
    phase = 0.5 * np.pi * (1.0 - np.tanh(lat / 15.0)) + 0.3 * np.sin(lam)
    return base + cfg.trend_per_decade * t / 120.0 + amp * np.sin(2 * np.pi * t / 12.0 + phase)


def _smoothing_gain(sigma: float, n_lat: int, n_lon: int) -> np.ndarray:
    """Per-latitude-row std of Gaussian-filtered unit white noise, shape (n_lat, 1).

    The filter is separable, so each axis' gain comes from filtering the
    identity (one impulse per column) with that axis' boundary mode.
    """
    g_lat = gaussian_filter1d(np.eye(n_lat), sigma, axis=0, mode="reflect")
    g_lon = gaussian_filter1d(np.eye(n_lon), sigma, axis=0, mode="wrap")
    return np.sqrt((g_lat ** 2).sum(axis=1) * (g_lon ** 2).sum(axis=1)[0])[:, None]


def _smooth(field: np.ndarray, s: float) -> np.ndarray:
    """Gaussian-smooth the trailing (lat, lon) axes, rescaled to unit variance per cell."""
    if s <= 0:
        return field
    sig = (0,) * (field.ndim - 2) + (s, s)
    modes = ("nearest",) * (field.ndim - 2) + ("reflect", "wrap")
    return gaussian_filter(field, sigma=sig, mode=modes) / _smoothing_gain(s, *field.shape[-2:])


def _mode_directions(rng: np.random.Generator, n_modes: int, T: int, corr: float) -> np.ndarray:
    # unit vectors u(t) in R^n_modes, drifting smoothly with t
    raw = rng.standard_normal((T, n_modes))
    if corr > 0:
        raw = gaussian_filter(raw, sigma=(corr, 0), mode=("nearest", "nearest"))
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def generate_synthetic(cfg: SyntheticConfig = SyntheticConfig()) -> EnsembleDataset:
    if cfg.R < 1 or cfg.L_grid < 1 or cfg.T < 2:
        raise ValueError(f"need R >= 1, L_grid >= 1, T >= 2; got {cfg.R}, {cfg.L_grid}, {cfg.T}")
    if cfg.noise_sigma < 0 or cfg.spatial_corr_len < 0 or cfg.n_modes < 0:
        raise ValueError("noise_sigma, spatial_corr_len and n_modes must be non-negative")
    if not 0.0 <= cfg.white_fraction <= 1.0 or (cfg.n_modes == 0 and cfg.white_fraction < 1.0):
        raise ValueError("white_fraction must lie in [0, 1] (and be 1 when n_modes is 0)")
    n = cfg.L_grid
    coords = _grid(n)
    det = synthetic_deterministic_part(cfg, coords)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    s = cfg.spatial_corr_len
    eta = np.zeros((cfg.R, cfg.T, n, n))
    if cfg.n_modes > 0:
        u = _mode_directions(rng, cfg.n_modes, cfg.T, cfg.mode_corr_months)
        loadings = _smooth(rng.standard_normal((cfg.R, cfg.n_modes, n, n)), s)
        eta += math.sqrt(1.0 - cfg.white_fraction) * np.einsum("tj,rjab->rtab", u, loadings)
    if cfg.white_fraction > 0:
        eta += math.sqrt(cfg.white_fraction) * _smooth(rng.standard_normal((cfg.R, cfg.T, n, n)), s)
    eta = eta.reshape(cfg.R, cfg.T, n * n).transpose(0, 2, 1)
    values = det[None, :, :] + cfg.noise_sigma * eta
    return EnsembleDataset(coords, values.astype(np.float32), cfg.start_year)


def location_features(coords: np.ndarray) -> np.ndarray:
    """(lat/90, sin lon, cos lon): bounded, and continuous across the dateline."""
    coords = np.asarray(coords, dtype=np.float64)
    lam = np.deg2rad(coords[..., 1])
    return np.stack([coords[..., 0] / 90.0, np.sin(lam), np.cos(lam)], axis=-1)


# --- ENSB file format -------------------------------------------------------

def save_ensemble(ds: EnsembleDataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, ds.R, ds.L, ds.T, ds.start_year))
        fh.write(ds.coords.astype("<f8").tobytes())
        fh.write(ds.values.astype("<f4").tobytes())


def load_ensemble(path) -> EnsembleDataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise EnsembleFormatError(
            f"truncated header: expected {_HEADER.size} bytes, got {len(raw)} (offset 0)")
    magic, version, R, L, T, start_year = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise EnsembleFormatError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    if version != VERSION:
        raise EnsembleFormatError(f"unsupported version {version} at offset 4")
    off = _HEADER.size
    n_coords = L * 2 * 8
    n_values = R * L * T * 4
    expected = off + n_coords + n_values
    if len(raw) != expected:
        raise EnsembleFormatError(
            f"file length mismatch: expected {expected} bytes, got {len(raw)} "
            f"(payload starts at offset {off})")
    coords = np.frombuffer(raw, "<f8", L * 2, off).reshape(L, 2)
    values = np.frombuffer(raw, "<f4", R * L * T, off + n_coords).reshape(R, L, T)
    return EnsembleDataset(coords.astype(np.float64), values.astype(np.float32), start_year)


def import_csv(path, start_year: int = 1940) -> EnsembleDataset:
    """Read rows ``realization,lat,lon,month_index,value`` into a dataset.

    Location ids follow first appearance in the file.  Every
    (realization, location, month) cell must be present exactly once.
    """
    cells: dict[tuple[int, int, int], float] = {}
    loc_index: dict[tuple[float, float], int] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["realization", "lat", "lon", "month_index", "value"]:
            raise EnsembleFormatError(f"bad CSV header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            try:
                r, lat, lon, t, v = int(row[0]), float(row[1]), float(row[2]), int(row[3]), float(row[4])
            except (ValueError, IndexError) as exc:
                raise EnsembleFormatError(f"line {lineno}: {exc}") from None
            key = (lat, lon)
            if key not in loc_index:
                loc_index[key] = len(loc_index)
            cell = (r, loc_index[key], t)
            if cell in cells:
                raise EnsembleFormatError(f"line {lineno}: duplicate cell {cell}")
            cells[cell] = v
    if not cells:
        raise EnsembleFormatError("CSV has no data rows")
    R = max(c[0] for c in cells) + 1
    T = max(c[2] for c in cells) + 1
    L = len(loc_index)
    if len(cells) != R * L * T:
        raise EnsembleFormatError(f"incomplete cube: {len(cells)} cells, expected {R}x{L}x{T}")
    values = np.empty((R, L, T))
    for (r, l, t), v in cells.items():
        values[r, l, t] = v
    coords = np.array(list(loc_index.keys()))
    return EnsembleDataset(coords, values.astype(np.float32), start_year)


# --- normalization ----------------------------------------------------------

@dataclass(frozen=True)
class NormStats:
    """Per-location offset and scale.

    ``mean`` is (L, 1) for plain z-scoring or (L, 12) for the climatology
    anomaly mode, indexed by month-of-year.
    """

    mean: np.ndarray
    std: np.ndarray
    mode: str = "zscore"
    train_ids: tuple[int, ...] = ()

    def offset(self, T: int) -> np.ndarray:
        if self.mode == "zscore":
            return np.broadcast_to(self.mean, (self.mean.shape[0], T))
        return self.mean[:, np.arange(T) % 12]


def normalize(ds: EnsembleDataset, train_ids, mode: str = "zscore") -> tuple[np.ndarray, NormStats]:
    """Normalize every realization with statistics from ``train_ids`` only."""
    train_ids = tuple(int(i) for i in train_ids)
    if not train_ids:
        raise ValueError("need at least one training realization")
    v = ds.values.astype(np.float64)
    tr = v[list(train_ids)]
    if mode == "zscore":
        mean = tr.mean(axis=(0, 2))[:, None]
    elif mode == "anomaly":
        months = np.arange(ds.T) % 12
        mean = np.stack([tr[:, :, months == m].mean(axis=(0, 2)) for m in range(12)], axis=1)
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    stats = NormStats(mean, np.empty(0), mode, train_ids)
    resid = tr - stats.offset(ds.T)[None]
    std = resid.std(axis=(0, 2))
    if np.any(std == 0):
        raise ValueError(f"zero std at location {int(np.argmin(std))}")
    stats = NormStats(mean, std, mode, train_ids)
    return (v - stats.offset(ds.T)[None]) / std[None, :, None], stats


def denormalize(z: np.ndarray, stats: NormStats, location_ids=None) -> np.ndarray:
    """Map normalized series (..., L', T) back to data units."""
    z = np.asarray(z, dtype=np.float64)
    T = z.shape[-1]
    off = stats.offset(T)
    std = stats.std
    if location_ids is not None:
        idx = np.asarray(location_ids, dtype=int)
        off, std = off[idx], std[idx]
    return z * std[:, None] + off


# --- coverage masks ---------------------------------------------------------

@dataclass(frozen=True)
class CoverageMask:
    alpha: float
    observed_ids: tuple[int, ...]
    ordering_policy: str = "seeded_random"
    L: int = field(default=0, compare=False)

    @property
    def unobserved_ids(self) -> tuple[int, ...]:
        obs = set(self.observed_ids)
        return tuple(i for i in range(self.L) if i not in obs)


def coverage_count(alpha: float, L: int) -> int:
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    # guard against alpha*L landing a hair above an integer
    return min(L, max(1, math.ceil(round(alpha * L, 9))))


def make_coverage_mask(L: int, alpha: float, policy: str = "seeded_random", seed: int = 0,
                       latent_map: np.ndarray | None = None, anchor_ids=None, k: int = 3,
                       required_ids=()) -> CoverageMask:
    """Choose ceil(alpha * L) observed location ids.

    ``required_ids`` are always observed (as long as the budget allows) and
    the rest is filled according to ``policy``:

    * ``seeded_random`` - uniform without replacement.
    * ``neighbor_distance_rank`` - rank locations by mean latent distance to
      their ``k`` nearest anchors in ``latent_map`` (L x d_z) and observe
      the closest first.
    """
    n = coverage_count(alpha, L)
    required = [int(i) for i in dict.fromkeys(required_ids)][:n]
    rest = [i for i in range(L) if i not in set(required)]
    need = n - len(required)
    if policy == "seeded_random":
        rng = np.random.Generator(np.random.PCG64(seed))
        chosen = [rest[i] for i in rng.permutation(len(rest))[:need]]
    elif policy == "neighbor_distance_rank":
        if latent_map is None or anchor_ids is None or len(anchor_ids) == 0:
            raise ValueError("neighbor_distance_rank needs a latent map and anchor ids")
        score = _anchor_latent_distance(np.asarray(latent_map, dtype=np.float64), list(anchor_ids), k)
        order = sorted(rest, key=lambda i: (score[i], i))
        chosen = order[:need]
    else:
        raise ValueError(f"unknown ordering policy {policy!r}")
    return CoverageMask(alpha, tuple(sorted(required + chosen)), policy, L)


def _anchor_latent_distance(latents: np.ndarray, anchor_ids: list[int], k: int) -> np.ndarray:
    A = latents[anchor_ids]
    d = np.linalg.norm(latents[:, None, :] - A[None, :, :], axis=2)
    out = np.empty(len(latents))
    anchors = np.asarray(anchor_ids)
    for i in range(len(latents)):
        row = d[i][anchors != i]
        kk = min(k, len(row))
        out[i] = np.sort(row)[:kk].mean() if kk else 0.0
    return out
