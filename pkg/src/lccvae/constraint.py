"""Cross-realization latent alignment at shared anchor locations.

Each realization gets its own CVAE.  Non-reference realizations are trained
on

    elbo_loss + lambda * mean_anchors( max(0, |mu(x, y_r(x)) - z_fixed(x)|^2 - d_z_max^2) )

which pulls the encoder mean at every anchor into a ball around a shared
fixed latent point.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cvae import CvaeConfig, CvaeModel, elbo_loss, encode, encode_tensors, init_model, train_cvae

__all__ = [
    "AnchorSet",
    "LcTrainPlan",
    "select_anchors",
    "compute_fixed_latents",
    "hinge_penalty",
    "lc_loss",
    "make_anchor_penalty",
    "train_lc_model",
    "train_lc_ensemble",
    "anchor_dispersion",
    "save_anchor_set",
    "load_anchor_set",
]

POLICIES = ("first_realization", "mean_of_trained")
SELECTIONS = ("uniform_grid_stride", "seeded_random")


@dataclass(frozen=True)
class LcTrainPlan:
    reference_policy: str = "first_realization"
    anchor_fraction: float = 0.05
    anchor_selection: str = "uniform_grid_stride"

    def __post_init__(self):
        if not 0.0 < self.anchor_fraction <= 1.0:
            raise ValueError(f"anchor_fraction must lie in (0, 1], got {self.anchor_fraction}")
        if self.reference_policy not in POLICIES:
            raise ValueError(f"unknown reference policy {self.reference_policy!r}")
        if self.anchor_selection not in SELECTIONS:
            raise ValueError(f"unknown anchor selection {self.anchor_selection!r}")


@dataclass(frozen=True)
class AnchorSet:
    anchor_location_ids: tuple[int, ...]
    fixed_latents: np.ndarray
    lam: float = 10.0
    d_z_max: float = 0.5
    policy: str = "first_realization"
    seed: int = 0

    def __post_init__(self):
        ids = tuple(int(i) for i in self.anchor_location_ids)
        z = np.asarray(self.fixed_latents, dtype=np.float64)
        if not ids:
            raise ValueError("anchor set is empty")
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate anchor ids")
        if z.ndim != 2 or z.shape[0] != len(ids):
            raise ValueError(f"need one fixed latent per anchor: {len(ids)} ids, latents {z.shape}")
        if self.lam < 0 or self.d_z_max <= 0:
            raise ValueError(f"need lambda >= 0 and d_z_max > 0, got {self.lam}, {self.d_z_max}")
        object.__setattr__(self, "anchor_location_ids", ids)
        object.__setattr__(self, "fixed_latents", z)

    def validate_grid(self, L: int) -> None:
        bad = [i for i in self.anchor_location_ids if not 0 <= i < L]
        if bad:
            raise ValueError(f"anchor ids {bad} not in a grid of {L} locations")

    def latent_for(self, location_id: int) -> np.ndarray:
        return self.fixed_latents[self.anchor_location_ids.index(location_id)]

    def subset(self, ids) -> "AnchorSet":
        keep = [i for i, a in enumerate(self.anchor_location_ids) if a in set(ids)]
        return AnchorSet(tuple(self.anchor_location_ids[i] for i in keep), self.fixed_latents[keep],
                         self.lam, self.d_z_max, self.policy, self.seed) if keep else None


def select_anchors(L: int, plan: LcTrainPlan, seed: int = 0) -> tuple[int, ...]:
    if L < 1:
        raise ValueError("empty grid")
    if plan.anchor_fraction * L < 1:
        raise ValueError(f"anchor_fraction={plan.anchor_fraction} gives no anchors on {L} locations")
    if plan.anchor_selection == "uniform_grid_stride":
        stride = math.ceil(round(1.0 / plan.anchor_fraction, 9))
        return tuple(range(0, L, stride))
    rng = np.random.Generator(np.random.PCG64(seed))
    n = int(plan.anchor_fraction * L)
    return tuple(sorted(int(i) for i in rng.choice(L, size=n, replace=False)))


def compute_fixed_latents(models: Sequence[CvaeModel], data: np.ndarray, X: np.ndarray,
                          anchor_ids, policy: str = "first_realization",
                          observed: dict[int, set] | None = None) -> np.ndarray:
    """Fixed latent targets at the anchors, shape (|A|, d_z).

    ``data`` is the normalized R x L x T array indexed by each model's
    ``realization_id``.  ``observed`` optionally maps realization id to the
    location ids it observes.
    """
    anchor_ids = list(anchor_ids)
    if policy == "first_realization":
        models = list(models)[:1]
    elif policy != "mean_of_trained":
        raise ValueError(f"unknown reference policy {policy!r}")
    if not models:
        raise ValueError("no reference model")
    mus = []
    for m in models:
        if observed is not None and m.realization_id in observed:
            missing = [a for a in anchor_ids if a not in observed[m.realization_id]]
            if missing:
                raise ValueError(f"anchor location {missing[0]} not observed in realization {m.realization_id}")
        mus.append(encode(m, X[anchor_ids], data[m.realization_id][anchor_ids]).mu)
    return mus[0] if len(mus) == 1 else np.mean(mus, axis=0)


def hinge_penalty(q_mu, z_fixed, d_z_max: float):
    """max(0, |q_mu - z_fixed|^2 - d_z_max^2), row-wise for 2-d input.

    With Tensor ``q_mu`` the result is a tape tensor; otherwise a float (or
    array of floats).
    """
    if isinstance(q_mu, Tensor):
        zf = np.asarray(z_fixed, dtype=np.float64)
        if q_mu.shape != zf.shape:
            raise ad.DimensionError(f"hinge_penalty: shapes {q_mu.shape} and {zf.shape} differ")
        diff = ad.sub(q_mu, Tensor(zf))
        return ad.relu(ad.sub(ad.sum_rows(ad.square(diff)), d_z_max ** 2))
    q = np.asarray(q_mu, dtype=np.float64)
    zf = np.asarray(z_fixed, dtype=np.float64)
    if q.shape != zf.shape:
        raise ad.DimensionError(f"hinge_penalty: shapes {q.shape} and {zf.shape} differ")
    out = np.maximum(np.sum((q - zf) ** 2, axis=-1) - d_z_max ** 2, 0.0)
    return float(out) if out.ndim == 0 else out


def _anchor_term(model, params, Xa, Ya, Za, anchors: AnchorSet) -> Tensor:
    mu, _ = encode_tensors(model, Xa, Ya, params)
    return ad.scale(ad.mean_all(hinge_penalty(mu, Za, anchors.d_z_max)), anchors.lam)


def lc_loss(model: CvaeModel, X, Y, Xa, Ya, Za, anchors: AnchorSet,
            rng: np.random.Generator | None = None, eps=None, params=None) -> Tensor:
    """Regular negated ELBO on (X, Y) plus the weighted anchor hinge on (Xa, Ya, Za)."""
    if params is None:
        params = model.bind()
    loss = elbo_loss(model, X, Y, rng, eps=eps, params=params)
    if anchors.lam == 0:
        return loss
    return ad.add(loss, _anchor_term(model, params, Xa, Ya, Za, anchors))


def make_anchor_penalty(model: CvaeModel, Xa, Ya, Za, anchors: AnchorSet, batch_size: int):
    """Penalty hook for :func:`train_cvae`: one anchor batch, drawn with
    replacement from the anchors, per regular batch."""
    n = len(Xa)
    size = min(batch_size, n)

    def penalty(params, rng):
        idx = rng.integers(0, n, size=size)
        return _anchor_term(model, params, Xa[idx], Ya[idx], Za[idx], anchors)

    return penalty


def train_lc_model(X, Y, cfg: CvaeConfig, realization_id: int, anchors: AnchorSet | None,
                   anchor_pos=None) -> CvaeModel:
    """Train one realization's model; ``anchor_pos`` indexes the anchor rows in X/Y.

    Without anchors (or with lambda = 0) this is plain :func:`train_cvae`.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if anchors is None or anchors.lam == 0:
        return train_cvae(X, Y, cfg, realization_id, phase="plain")
    pos = np.asarray(anchor_pos, dtype=int)
    template = init_model(cfg, realization_id)
    pen = make_anchor_penalty(template, X[pos], Y[pos], anchors.fixed_latents, anchors, cfg.batch_size)
    return train_cvae(X, Y, cfg, realization_id, penalty=pen, init=template, phase="lc")


def _train_job(args):
    return train_lc_model(*args)


def train_lc_ensemble(data: np.ndarray, X: np.ndarray, cfg: CvaeConfig, plan: LcTrainPlan = LcTrainPlan(),
                      lam: float = 10.0, d_z_max: float = 0.5, realizations=None,
                      anchor_ids=None, anchor_seed: int = 0,
                      workers: int = 1) -> tuple[list[CvaeModel], AnchorSet]:
    """Three-stage LC-CVAE training over ``realizations`` (default: all of ``data``).

    1. reference model(s) trained on the plain ELBO;
    2. fixed latents from the reference policy;
    3. every non-reference realization trained with the anchor hinge.

    With ``mean_of_trained`` all realizations are references in stage 1 and
    all are retrained from scratch in stage 3.
    """
    realizations = list(range(data.shape[0])) if realizations is None else list(realizations)
    if not realizations:
        raise ValueError("need at least one realization")
    L = data.shape[1]
    if anchor_ids is None:
        anchor_ids = select_anchors(L, plan, anchor_seed)
    anchor_ids = list(anchor_ids)
    if plan.reference_policy == "first_realization":
        refs = realizations[:1]
    else:
        refs = realizations
    ref_models = _map(workers, [(X, data[r], cfg, r, None, None) for r in refs])
    fixed = compute_fixed_latents(ref_models, data, X, anchor_ids, plan.reference_policy)
    anchors = AnchorSet(tuple(anchor_ids), fixed, lam, d_z_max, plan.reference_policy, anchor_seed)
    if plan.reference_policy == "first_realization":
        rest = realizations[1:]
        jobs = [(X, data[r], cfg, r, anchors, anchor_ids) for r in rest]
        models = ref_models + _map(workers, jobs)
    else:
        if len(realizations) == 1:
            return ref_models, anchors
        jobs = [(X, data[r], cfg, r, anchors, anchor_ids) for r in realizations]
        models = _map(workers, jobs)
    return models, anchors


def _map(workers: int, jobs: list) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [_train_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_train_job, jobs))


def anchor_dispersion(models: Sequence[CvaeModel], data: np.ndarray, X: np.ndarray,
                      anchors: AnchorSet) -> np.ndarray:
    """Per anchor, max over models of |mu_r(x, y_r(x)) - z_fixed(x)|."""
    ids = list(anchors.anchor_location_ids)
    dists = [np.linalg.norm(encode(m, X[ids], data[m.realization_id][ids]).mu - anchors.fixed_latents, axis=1)
             for m in models]
    return np.max(dists, axis=0)


def save_anchor_set(anchors: AnchorSet, path) -> None:
    doc = {
        "anchor_ids": list(anchors.anchor_location_ids),
        "fixed_latents": anchors.fixed_latents.tolist(),
        "lambda": anchors.lam,
        "d_z_max": anchors.d_z_max,
        "policy": anchors.policy,
        "seed": anchors.seed,
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_anchor_set(path, L: int | None = None) -> AnchorSet:
    doc = json.loads(Path(path).read_text())
    missing = {"anchor_ids", "fixed_latents", "lambda", "d_z_max", "policy", "seed"} - doc.keys()
    if missing:
        raise ValueError(f"anchor set file missing keys {sorted(missing)}")
    if doc["policy"] not in POLICIES:
        raise ValueError(f"unknown policy {doc['policy']!r}")
    anchors = AnchorSet(tuple(doc["anchor_ids"]), np.array(doc["fixed_latents"], dtype=np.float64),
                        float(doc["lambda"]), float(doc["d_z_max"]), doc["policy"], int(doc["seed"]))
    if L is not None:
        anchors.validate_grid(L)
    return anchors
