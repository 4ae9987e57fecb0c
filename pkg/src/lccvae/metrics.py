"""Reconstruction error, latent-space diagnostics and evaluation reports."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import spearmanr

from .completion import nearest_observed
from .cvae import CvaeModel, encode

__all__ = [
    "EvalReport",
    "mse",
    "avg_neighbor_distance",
    "fragmentation_score",
    "encode_all",
    "moment_check",
    "spearman_above_threshold",
    "pooled_spearman",
    "config_hash",
]


def _as_map(series) -> dict[int, np.ndarray]:
    if isinstance(series, Mapping):
        return {int(k): np.asarray(v, dtype=np.float64) for k, v in series.items()}
    arr = np.asarray(series, dtype=np.float64)
    return {i: arr[i] for i in range(len(arr))}


def mse(y_true, y_pred) -> tuple[dict[int, float], float]:
    """Per-location mean over time of squared error, and their mean.

    Accepts mappings id -> series or (L, T) arrays.
    """
    a, b = _as_map(y_true), _as_map(y_pred)
    if set(a) != set(b):
        raise ValueError(f"location sets differ: {sorted(set(a) ^ set(b))[:5]}...")
    if not a:
        raise ValueError("mse of an empty series set")
    per = {}
    for i in sorted(a):
        if a[i].shape != b[i].shape:
            raise ValueError(f"series length mismatch at location {i}: {a[i].shape} vs {b[i].shape}")
        per[i] = float(np.mean((a[i] - b[i]) ** 2))
    return per, float(np.mean(list(per.values())))


def avg_neighbor_distance(latent_means: Mapping[int, np.ndarray], observed_ids, coords, k: int,
                          target_ids=None) -> dict[int, float]:
    """Mean latent distance from each target to its k nearest observed neighbours.

    Neighbours are chosen geographically, as for completion features; an
    observed target does not count itself.
    """
    observed = sorted(int(i) for i in observed_ids)
    if len(observed) < k:
        raise ValueError(f"need at least k={k} observed locations, have {len(observed)}")
    targets = sorted(latent_means) if target_ids is None else [int(i) for i in target_ids]
    nbrs = nearest_observed(targets, observed, coords, k)
    return {t: float(np.mean([np.linalg.norm(latent_means[t] - latent_means[j]) for j in nb]))
            for t, nb in nbrs.items()}


def encode_all(models: Sequence[CvaeModel], data: np.ndarray, X: np.ndarray, probe_ids=None) -> np.ndarray:
    """Encoder means, shape (R, P, d_z).  A single model is applied to every
    realization in ``data``; a list is applied by ``realization_id``."""
    ids = list(range(len(X))) if probe_ids is None else list(probe_ids)
    if isinstance(models, CvaeModel):
        return np.stack([encode(models, X[ids], data[r][ids]).mu for r in range(len(data))])
    return np.stack([encode(m, X[ids], data[m.realization_id][ids]).mu for m in models])


def fragmentation_score(latents) -> float:
    """Share of latent variance due to realization identity.

    ``latents`` is (R, P, d_z): R realizations embedding the same P probe
    locations.  The numerator is the across-realization variance at each
    location (summed over latent coordinates, averaged over locations); the
    denominator is the total variance of all R * P latents.  0 means every
    realization embeds each location identically; values near 1 mean the
    embedding is organized by realization rather than by location.
    """
    Z = np.asarray(latents, dtype=np.float64)
    if Z.ndim != 3 or Z.shape[0] < 2:
        raise ValueError("fragmentation needs latents of shape (R >= 2, P, d_z)")
    within = float(Z.var(axis=0).sum(axis=-1).mean())
    total = float(Z.reshape(-1, Z.shape[-1]).var(axis=0).sum())
    if total == 0:
        return 0.0
    return within / total


def moment_check(original, generated) -> dict[int, tuple[float, float]]:
    """Per location (mean(generated) - mean(original), std(generated) - std(original))."""
    a, b = _as_map(original), _as_map(generated)
    out = {}
    for i in sorted(set(a) & set(b)):
        if a[i].shape != b[i].shape:
            raise ValueError(f"series length mismatch at location {i}")
        out[i] = (float(b[i].mean() - a[i].mean()), float(b[i].std() - a[i].std()))
    return out


def spearman_above_threshold(per_loc_mse: Mapping[int, float], nbr_dist: Mapping[int, float],
                             threshold: float | None = None) -> tuple[float, int]:
    """Rank correlation of MSE vs neighbour distance over locations whose
    distance exceeds ``threshold`` (default: the median)."""
    ids = sorted(set(per_loc_mse) & set(nbr_dist))
    d = np.array([nbr_dist[i] for i in ids])
    e = np.array([per_loc_mse[i] for i in ids])
    if threshold is None:
        threshold = float(np.median(d))
    keep = d > threshold
    if keep.sum() < 3:
        return float("nan"), int(keep.sum())
    rho = spearmanr(d[keep], e[keep]).statistic
    return float(rho), int(keep.sum())


def pooled_spearman(reports, threshold: float | None = None) -> tuple[float, int]:
    """Spearman over (neighbour distance, MSE) pairs pooled across reports.

    Only completed locations (unobserved in their cell) enter; cells with
    full coverage contribute nothing.  The threshold defaults to the median
    of the pooled distances.
    """
    d, e = [], []
    for r in reports:
        if r.error or not r.avg_neighbor_distance:
            continue
        seen = set(r.observed_ids)
        for i, dist in r.avg_neighbor_distance.items():
            if i not in seen:
                d.append(dist)
                e.append(r.per_location_mse[i])
    if not d:
        return float("nan"), 0
    ids = range(len(d))
    return spearman_above_threshold(dict(zip(ids, e)), dict(zip(ids, d)), threshold)


def config_hash(cfg) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass
class EvalReport:
    r_train: int
    alpha: float
    policy: str
    seed: int
    config_hash: str
    per_location_mse: dict[int, float] = field(default_factory=dict)
    aggregate_mse: float = float("nan")
    avg_neighbor_distance: dict[int, float] = field(default_factory=dict)
    anchor_dispersion: list[float] = field(default_factory=list)
    frag_score: float = float("nan")
    moments: dict[int, tuple[float, float]] = field(default_factory=dict)
    spearman: float = float("nan")
    realization_ids: list[int] = field(default_factory=list)
    held_out: int = -1
    observed_ids: list[int] = field(default_factory=list)
    baseline_mse: float = float("nan")
    runtime_s: float | None = None
    error: str | None = None

    def __post_init__(self):
        if self.per_location_mse and not math.isclose(
                self.aggregate_mse, float(np.mean(list(self.per_location_mse.values()))), rel_tol=1e-12):
            raise ValueError("aggregate MSE must equal the mean of per-location MSEs")

    @property
    def mean_nbr_dist(self) -> float:
        v = list(self.avg_neighbor_distance.values())
        return float(np.mean(v)) if v else float("nan")

    def to_json(self) -> str:
        d = asdict(self)
        for key in ("per_location_mse", "avg_neighbor_distance", "moments"):
            d[key] = {str(k): v for k, v in d[key].items()}
        return json.dumps(d, indent=1, sort_keys=True, allow_nan=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        d["per_location_mse"] = {int(k): v for k, v in d["per_location_mse"].items()}
        d["avg_neighbor_distance"] = {int(k): v for k, v in d["avg_neighbor_distance"].items()}
        d["moments"] = {int(k): tuple(v) for k, v in d["moments"].items()}
        return cls(**d)
