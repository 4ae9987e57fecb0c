"""Dense latent fields for a sparsely observed realization.

Each location's feature vector is the concatenation of the latent codes of
its ``k`` nearest observed neighbours (great-circle distance, nearest first).
One GP per latent coordinate maps features to that coordinate; predicted
latents are then decoded with the realization's own decoder.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .cvae import CvaeModel, decode, encode
from .data import NormStats, denormalize
from .gp import GpSlice, gp_fit_exact, gp_fit_sparse, gp_predict

EARTH_RADIUS_KM = 6371.0

__all__ = [
    "LatentField",
    "GpCompletionModel",
    "haversine_matrix",
    "nearest_observed",
    "encode_observed",
    "build_features",
    "fit_completion_gps",
    "complete_latent_field",
    "nearest_neighbor_copy",
    "decode_completed",
    "write_latent_field_csv",
    "read_latent_field_csv",
]


def haversine_matrix(A, B) -> np.ndarray:
    """Great-circle distances in km between (lat, lon) degree rows of A and B."""
    A = np.deg2rad(np.atleast_2d(np.asarray(A, dtype=np.float64)))
    B = np.deg2rad(np.atleast_2d(np.asarray(B, dtype=np.float64)))
    dlat = A[:, None, 0] - B[None, :, 0]
    dlon = A[:, None, 1] - B[None, :, 1]
    h = np.sin(dlat / 2) ** 2 + np.cos(A[:, None, 0]) * np.cos(B[None, :, 0]) * np.sin(dlon / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def nearest_observed(target_ids, observed_ids, coords, k: int) -> dict[int, list[int]]:
    """k nearest observed ids per target, excluding the target itself.

    Distances are rounded to the millimetre before sorting so that
    geometrically equidistant points tie exactly; ties go to the lower id.
    """
    obs = np.array(sorted(set(int(i) for i in observed_ids)), dtype=int)
    targets = [int(i) for i in target_ids]
    coords = np.asarray(coords, dtype=np.float64)
    if len(obs) < k:
        raise ValueError(f"need at least k={k} observed neighbours, have {len(obs)} observed locations")
    if not targets:
        return {}
    D = np.round(haversine_matrix(coords[targets], coords[obs]), 6)
    out = {}
    for row, tid in enumerate(targets):
        d = D[row]
        keep = obs != tid
        cand, dist = obs[keep], d[keep]
        if len(cand) < k:
            raise ValueError(f"need at least k={k} observed neighbours for location {tid}, have {len(cand)}")
        order = np.lexsort((cand, dist))[:k]
        out[tid] = cand[order].tolist()
    return out


def encode_observed(model: CvaeModel, data_r: np.ndarray, X: np.ndarray, observed_ids) -> dict[int, np.ndarray]:
    """Encoder means at the observed locations of one realization."""
    ids = [int(i) for i in observed_ids]
    if not ids:
        return {}
    L = len(X)
    bad = [i for i in ids if not 0 <= i < L]
    if bad:
        raise ValueError(f"location ids {bad} are not on the grid of {L} locations")
    mu = encode(model, X[ids], data_r[ids]).mu
    return {i: mu[j] for j, i in enumerate(ids)}


def build_features(target_ids, latents: Mapping[int, np.ndarray], coords, k: int) -> dict[int, np.ndarray]:
    """Feature vector (length k * d_z) per target from the observed latent map."""
    if len(latents) < k:
        raise ValueError(f"need at least k={k} observed latents, got {len(latents)}")
    nbrs = nearest_observed(target_ids, latents.keys(), coords, k)
    return {tid: np.concatenate([latents[j] for j in nb]) for tid, nb in nbrs.items()}


@dataclass
class LatentField:
    mean: dict[int, np.ndarray]
    var: dict[int, np.ndarray]
    clamp_events: int = 0

    @property
    def ids(self) -> list[int]:
        return sorted(self.mean)

    def mean_array(self, ids=None) -> np.ndarray:
        return np.array([self.mean[i] for i in (self.ids if ids is None else ids)])

    def var_array(self, ids=None) -> np.ndarray:
        return np.array([self.var[i] for i in (self.ids if ids is None else ids)])


@dataclass
class GpCompletionModel:
    slices: list[GpSlice]
    k: int
    mode: str
    n_train: int = 0
    info: dict = field(default_factory=dict)

    def predict(self, F: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
        means, vars_, clamps = [], [], 0
        for gp in self.slices:
            m, v, c = gp_predict(gp, F, return_clamps=True)
            means.append(m)
            vars_.append(v)
            clamps += c
        return np.stack(means, 1), np.stack(vars_, 1), clamps


def fit_completion_gps(F: np.ndarray, targets: np.ndarray, k: int, mode: str = "auto",
                       m: int = 64, sparse_threshold: int = 2000, steps: int = 200, lr: float = 0.05,
                       seed: int = 0) -> GpCompletionModel:
    """One independent GP per target column."""
    F = np.asarray(F, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    n = len(F)
    if mode == "auto":
        mode = "sparse_variational" if n > sparse_threshold else "exact"
    if mode in ("sparse", "sparse_variational"):
        mode = "sparse_variational"
        slices = [gp_fit_sparse(F, targets[:, l], min(m, n), seed=seed + l, steps=steps, lr=lr)
                  for l in range(targets.shape[1])]
    elif mode == "exact":
        slices = [gp_fit_exact(F, targets[:, l], steps=steps, lr=lr) for l in range(targets.shape[1])]
    else:
        raise ValueError(f"unknown GP mode {mode!r}")
    return GpCompletionModel(slices, k, mode, n)


def _pairs_for(latents_all: Mapping[int, np.ndarray], observed_ids, target_ids, coords, k):
    obs_map = {i: latents_all[i] for i in observed_ids}
    feats = build_features(target_ids, obs_map, coords, k)
    ids = list(feats)
    return np.array([feats[i] for i in ids]), np.array([latents_all[i] for i in ids])


def complete_latent_field(model: CvaeModel, data_r: np.ndarray, X: np.ndarray, coords, observed_ids,
                          k: int = 4, mode: str = "auto", pool: Sequence[tuple[CvaeModel, np.ndarray]] = (),
                          neighbor_pool: str = "observed", anchor_ids=None, m: int = 64,
                          sparse_threshold: int = 2000, steps: int = 200, lr: float = 0.05,
                          seed: int = 0, return_model: bool = False):
    """Predict latent means/variances at every unobserved location.

    Training pairs are (features, encoder mean) at the observed locations of
    this realization, each built from the other observed locations.  ``pool``
    adds fully observed training realizations as (model, normalized data)
    pairs: their features come from the same observed id set and their
    targets cover every location.  ``neighbor_pool="anchors"`` restricts
    neighbours to observed anchors.
    """
    L = len(X)
    observed = sorted(set(int(i) for i in observed_ids))
    unobserved = [i for i in range(L) if i not in set(observed)]
    latents = encode_observed(model, data_r, X, observed)
    field_ = LatentField({i: latents[i] for i in observed},
                         {i: np.zeros_like(latents[i]) for i in observed})
    if not unobserved:
        return (field_, None) if return_model else field_
    sources = observed
    if neighbor_pool == "anchors":
        if anchor_ids is None:
            raise ValueError("neighbor_pool='anchors' needs anchor_ids")
        sources = [i for i in observed if i in set(int(a) for a in anchor_ids)]
    elif neighbor_pool != "observed":
        raise ValueError(f"unknown neighbour pool {neighbor_pool!r}")
    if len(sources) <= k:
        raise ValueError(f"need more than k={k} observed neighbour sources, have {len(sources)}")
    F_parts, t_parts = [], []
    F, t = _pairs_for(latents, sources, observed, coords, k)
    F_parts.append(F)
    t_parts.append(t)
    for pm, pdata in pool:
        mu = encode(pm, X, pdata).mu
        lat = {i: mu[i] for i in range(L)}
        F, t = _pairs_for(lat, sources, range(L), coords, k)
        F_parts.append(F)
        t_parts.append(t)
    gps = fit_completion_gps(np.concatenate(F_parts), np.concatenate(t_parts), k, mode, m,
                             sparse_threshold, steps, lr, seed)
    qfeat = build_features(unobserved, {i: latents[i] for i in sources}, coords, k)
    mean, var, clamps = gps.predict(np.array([qfeat[i] for i in unobserved]))
    for j, i in enumerate(unobserved):
        field_.mean[i] = mean[j]
        field_.var[i] = var[j]
    field_.clamp_events = clamps
    return (field_, gps) if return_model else field_


def nearest_neighbor_copy(latents: Mapping[int, np.ndarray], target_ids, coords) -> dict[int, np.ndarray]:
    """Baseline: each target takes the latent of its nearest observed location."""
    nb = nearest_observed(target_ids, latents.keys(), coords, 1)
    return {t: np.array(latents[n[0]]) for t, n in nb.items()}


def decode_completed(model: CvaeModel, field_: LatentField, X: np.ndarray, ids=None,
                     stats: NormStats | None = None, emit_noise: bool = False,
                     rng: np.random.Generator | None = None) -> dict[int, np.ndarray]:
    """Decode latent means to series; de-normalized when ``stats`` is given."""
    ids = field_.ids if ids is None else [int(i) for i in ids]
    missing = [i for i in ids if i not in field_.mean]
    if missing:
        raise KeyError(f"latent field has no entry for locations {missing}")
    Y = decode(model, X[ids], field_.mean_array(ids), emit_noise=emit_noise, rng=rng)
    if stats is not None:
        Y = denormalize(Y, stats, ids)
    return {i: Y[j] for j, i in enumerate(ids)}


def write_latent_field_csv(field_: LatentField, coords, path) -> None:
    d_z = len(next(iter(field_.mean.values())))
    header = (["location_id", "lat", "lon"] + [f"z_mean_{l + 1}" for l in range(d_z)]
              + [f"z_var_{l + 1}" for l in range(d_z)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in field_.ids:
            w.writerow([i, repr(float(coords[i][0])), repr(float(coords[i][1]))]
                       + [repr(float(v)) for v in field_.mean[i]] + [repr(float(v)) for v in field_.var[i]])


def read_latent_field_csv(path) -> tuple[LatentField, dict[int, tuple[float, float]]]:
    mean, var, coords = {}, {}, {}
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    d_z = (len(rows[0]) - 3) // 2
    for row in rows[1:]:
        i = int(row[0])
        coords[i] = (float(row[1]), float(row[2]))
        mean[i] = np.array([float(v) for v in row[3:3 + d_z]])
        var[i] = np.array([float(v) for v in row[3 + d_z:]])
    return LatentField(mean, var), coords
