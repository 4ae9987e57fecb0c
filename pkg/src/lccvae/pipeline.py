"""End-to-end runs: train -> constrain -> complete -> decode -> score.

A run trains LC-CVAEs on the first ``r_train`` realizations, observes a
fraction ``alpha`` of the held-out realization, trains its model on those
locations (anchored to the shared fixed latents), completes the latent field
with GPs and decodes every location.
"""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import os
import pickle
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .completion import LatentField, complete_latent_field, decode_completed
from .config import RunConfig
from .constraint import AnchorSet, anchor_dispersion, select_anchors, train_lc_ensemble, train_lc_model
from .cvae import CvaeConfig, CvaeModel, encode, train_cvae
from .data import (CoverageMask, EnsembleDataset, NormStats, generate_synthetic, load_ensemble,
                   location_features, make_coverage_mask, normalize)
from .metrics import (EvalReport, avg_neighbor_distance, config_hash, encode_all, fragmentation_score, moment_check,
                      mse, spearman_above_threshold)

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ["r_train", "alpha", "policy", "seed", "mse", "frag_score", "mean_nbr_dist", "runtime_s"]

__all__ = [
    "SUMMARY_COLUMNS",
    "RunResult",
    "load_dataset",
    "prepare",
    "train_joint_cvae",
    "held_out_model",
    "run_pipeline",
    "evaluate_held_out",
    "run_ablation",
    "summary_csv",
    "DiskCache",
    "make_cache",
]


def load_dataset(cfg: RunConfig) -> EnsembleDataset:
    if cfg.data.source == "synthetic":
        return generate_synthetic(cfg.data.synthetic)
    return load_ensemble(cfg.data.path)


def _held_out(cfg: RunConfig, ds: EnsembleDataset) -> int:
    h = cfg.experiment.held_out
    return ds.R - 1 if h < 0 else h


def _train_pool(cfg: RunConfig, ds: EnsembleDataset) -> list[int]:
    h = _held_out(cfg, ds)
    return [r for r in range(ds.R) if r != h]


def prepare(cfg: RunConfig, ds: EnsembleDataset, r_train: int):
    """Training ids, normalized data and stats for a given ``r_train``."""
    pool = _train_pool(cfg, ds)
    if not 1 <= r_train <= len(pool):
        raise ValueError(f"r_train={r_train} needs between 1 and {len(pool)} training realizations")
    train_ids = pool[:r_train]
    norm_ids = pool if cfg.data.norm_pool == "training_pool" else train_ids
    Z, stats = normalize(ds, norm_ids, cfg.data.norm_mode)
    return train_ids, Z, stats


def _cvae_cfg(cfg: RunConfig, ds: EnsembleDataset, seed: int) -> CvaeConfig:
    return replace(cfg.cvae, T=ds.T, d_x=3, seed=seed)


def train_joint_cvae(Z: np.ndarray, X: np.ndarray, cvae_cfg: CvaeConfig, realizations) -> CvaeModel:
    """One vanilla CVAE on the pooled (x, y_r(x)) pairs of all ``realizations``."""
    realizations = list(realizations)
    Xs = np.tile(X, (len(realizations), 1))
    Ys = np.concatenate([Z[r] for r in realizations])
    return train_cvae(Xs, Ys, cvae_cfg, realization_id=-1, phase="joint")


def held_out_model(cfg: RunConfig, Z, X, r_star: int, mask: CoverageMask, anchors: AnchorSet,
                   seed: int, cvae_cfg: CvaeConfig) -> CvaeModel:
    """Train the held-out realization's LC-CVAE on its observed locations only."""
    obs = list(mask.observed_ids)
    sub = anchors.subset(obs)
    c = replace(cvae_cfg, batch_size=min(cvae_cfg.batch_size, len(obs)))
    pos = [obs.index(a) for a in sub.anchor_location_ids] if sub is not None else None
    return train_lc_model(X[obs], Z[r_star][obs], c, r_star, sub, pos)


@dataclass
class RunResult:
    report: EvalReport
    models: list[CvaeModel]
    star_model: CvaeModel
    anchors: AnchorSet
    mask: CoverageMask
    field: LatentField
    generated: dict[int, np.ndarray]
    stats: NormStats


class _Cache(dict):
    """Memo for trained models within one process (keys include every input)."""


class DiskCache(_Cache):
    """A ``_Cache`` that also persists entries as pickles under ``directory``.

    ``scope`` must capture every setting that the keys leave out (the data,
    model and constraint sections), so entries from other configs never
    collide.
    """

    def __init__(self, directory, scope: str):
        super().__init__()
        self.directory = Path(directory)
        self.scope = scope

    def _path(self, key) -> Path:
        digest = hashlib.sha256(f"{self.scope}|{key!r}".encode()).hexdigest()[:32]
        return self.directory / f"{digest}.pkl"

    def __contains__(self, key) -> bool:
        return super().__contains__(key) or self._path(key).exists()

    def __getitem__(self, key):
        if not super().__contains__(key):
            with open(self._path(key), "rb") as fh:
                super().__setitem__(key, pickle.load(fh))
        return super().__getitem__(key)

    def __setitem__(self, key, value) -> None:
        super().__setitem__(key, value)
        self.directory.mkdir(parents=True, exist_ok=True)
        path = self._path(key)
        tmp = path.with_suffix(f".tmp{os.getpid()}")
        with open(tmp, "wb") as fh:
            pickle.dump(value, fh, protocol=4)
        os.replace(tmp, path)


def cache_scope(cfg: RunConfig) -> str:
    d = cfg.to_dict()
    return config_hash({k: d[k] for k in ("data", "cvae", "constraint")})


def make_cache(cfg: RunConfig, directory=None) -> _Cache:
    return _Cache() if directory is None else DiskCache(directory, cache_scope(cfg))


def _ensemble(cfg, ds, Z, X, train_ids, seed, cache):
    cc = _cvae_cfg(cfg, ds, seed)
    con = cfg.constraint
    norm_key = tuple(train_ids) if cfg.data.norm_pool == "r_train" else "pool"
    if con.reference_policy == "first_realization":
        # model r depends only on (seed, r, reference, normalization)
        models = []
        anchors = None
        for r in train_ids:
            key = ("lc", seed, r, train_ids[0], norm_key)
            if key not in cache:
                if r == train_ids[0]:
                    ms, anchors = train_lc_ensemble(Z, X, cc, con.plan, con.lam, con.d_z_max, [r],
                                                    anchor_seed=seed)
                    cache[("anchors", seed, r, norm_key)] = anchors
                    cache[key] = ms[0]
                else:
                    anchors = cache[("anchors", seed, train_ids[0], norm_key)]
                    cache[key] = train_lc_model(X, Z[r], cc, r, anchors, list(anchors.anchor_location_ids))
            models.append(cache[key])
        anchors = cache[("anchors", seed, train_ids[0], norm_key)]
        return models, anchors
    key = ("lc-mean", seed, tuple(train_ids), norm_key)
    if key not in cache:
        cache[key] = train_lc_ensemble(Z, X, cc, con.plan, con.lam, con.d_z_max, train_ids,
                                       anchor_seed=seed, workers=cfg.workers)
    return cache[key]


def run_pipeline(cfg: RunConfig, ds: EnsembleDataset | None = None, r_train: int | None = None,
                 alpha: float | None = None, policy: str | None = None, seed: int | None = None,
                 cache: dict | None = None) -> RunResult:
    exp = cfg.experiment
    r_train = exp.r_train if r_train is None else r_train
    seed = exp.seed if seed is None else seed
    cache = _Cache() if cache is None else cache
    ds = load_dataset(cfg) if ds is None else ds
    t0 = time.perf_counter()
    train_ids, Z, stats = prepare(cfg, ds, r_train)
    X = location_features(ds.coords)
    log.info("phase=train r_train=%d seed=%d", r_train, seed)
    models, anchors = _ensemble(cfg, ds, Z, X, train_ids, seed, cache)
    return evaluate_held_out(cfg, ds, Z, stats, models, anchors, alpha, policy, seed, cache, t0)


def evaluate_held_out(cfg: RunConfig, ds: EnsembleDataset, Z: np.ndarray, stats: NormStats,
                      models: list[CvaeModel], anchors: AnchorSet, alpha: float | None = None,
                      policy: str | None = None, seed: int | None = None, cache: dict | None = None,
                      t0: float | None = None) -> RunResult:
    """Mask, fit and complete the held-out realization given a trained ensemble."""
    exp = cfg.experiment
    alpha = exp.alpha if alpha is None else alpha
    policy = exp.policy if policy is None else policy
    seed = exp.seed if seed is None else seed
    cache = _Cache() if cache is None else cache
    t0 = time.perf_counter() if t0 is None else t0
    r_star = _held_out(cfg, ds)
    train_ids = [m.realization_id for m in models]
    if r_star in train_ids:
        raise ValueError(f"held-out realization {r_star} is also a training realization")
    X = location_features(ds.coords)
    cc = replace(models[0].config, seed=seed)
    comp = cfg.completion

    if policy == "neighbor_distance_rank":
        ref_lat = encode(models[0], X, Z[models[0].realization_id]).mu
        mask = make_coverage_mask(ds.L, alpha, policy, seed, latent_map=ref_lat,
                                  anchor_ids=anchors.anchor_location_ids, k=comp.k,
                                  required_ids=anchors.anchor_location_ids)
    else:
        mask = make_coverage_mask(ds.L, alpha, policy, seed, required_ids=anchors.anchor_location_ids)
    obs = list(mask.observed_ids)
    if mask.unobserved_ids and len(obs) <= comp.k:
        raise ValueError(f"completion needs more than k={comp.k} observed locations, have {len(obs)}")

    star_key = ("star", seed, r_star, alpha, policy, mask.observed_ids,
                anchors.fixed_latents.tobytes(), stats.train_ids)
    if star_key not in cache:
        log.info("phase=train-held-out alpha=%g observed=%d", alpha, len(obs))
        cache[star_key] = held_out_model(cfg, Z, X, r_star, mask, anchors, seed, cc)
    star = cache[star_key]

    pool = [(m, Z[m.realization_id]) for m in models] if comp.training_pairs == "union" else []
    log.info("phase=complete alpha=%g pool=%d", alpha, len(pool))
    field = complete_latent_field(star, Z[r_star], X, ds.coords, obs, k=comp.k, mode=comp.mode, pool=pool,
                                  neighbor_pool=comp.neighbor_pool, anchor_ids=anchors.anchor_location_ids,
                                  m=comp.m, sparse_threshold=comp.sparse_threshold, steps=comp.steps,
                                  lr=comp.lr, seed=seed)
    generated = decode_completed(star, field, X, stats=stats)
    original = {i: ds.values[r_star, i].astype(np.float64) for i in range(ds.L)}
    per_loc, agg = mse(original, generated)
    ens_mean = ds.values[train_ids].astype(np.float64).mean(axis=0)
    _, baseline = mse(original, ens_mean)

    nbr = avg_neighbor_distance(field.mean, obs, ds.coords, comp.k) if len(obs) > comp.k else {}
    unobs = list(mask.unobserved_ids)
    probes = unobs if unobs else list(range(ds.L))
    rho = float("nan")
    if nbr:
        rho, _ = spearman_above_threshold({i: per_loc[i] for i in probes}, {i: nbr[i] for i in probes},
                                          cfg.ablation.spearman_threshold)
    frag = fragmentation_score(encode_all(models, Z, X)) if len(models) >= 2 else float("nan")
    disp = anchor_dispersion(models, Z, X, anchors).tolist()
    moments = moment_check({i: original[i] for i in probes}, {i: generated[i] for i in probes})
    runtime = time.perf_counter() - t0
    report = EvalReport(
        r_train=len(models), alpha=alpha, policy=policy, seed=seed, config_hash=cfg.hash,
        per_location_mse=per_loc, aggregate_mse=agg, avg_neighbor_distance=nbr, anchor_dispersion=disp,
        frag_score=frag, moments=moments, spearman=rho, realization_ids=list(train_ids), held_out=r_star,
        observed_ids=obs, baseline_mse=baseline,
        runtime_s=runtime if cfg.ablation.record_runtime else None)
    log.info("phase=score r_train=%d alpha=%g seed=%d mse=%.6g", len(models), alpha, seed, agg)
    return RunResult(report, models, star, anchors, mask, field, generated, stats)


def _cell_group(args):
    cfg, r_train, seed, cells, cache_dir = args
    ds = load_dataset(cfg)
    cache = make_cache(cfg, cache_dir)
    out = []
    for alpha, policy in cells:
        out.append(_run_cell(cfg, ds, r_train, alpha, policy, seed, cache))
    return out


def _run_cell(cfg, ds, r_train, alpha, policy, seed, cache) -> EvalReport:
    try:
        return run_pipeline(cfg, ds, r_train, alpha, policy, seed, cache).report
    except Exception as exc:  # a failed cell is recorded, not dropped
        log.warning("cell r_train=%d alpha=%g policy=%s seed=%d failed: %s", r_train, alpha, policy, seed, exc)
        return EvalReport(r_train, alpha, policy, seed, cfg.hash, error=f"{type(exc).__name__}: {exc}")


def run_ablation(cfg: RunConfig, ds: EnsembleDataset | None = None, workers: int | None = None,
                 cache_dir=None) -> list[EvalReport]:
    """Every (r_train, alpha, policy, seed) cell of the suite, in a fixed order.

    Cells sharing a seed reuse trained models through the cache; with
    ``cache_dir`` the models also persist across calls.
    """
    ab = cfg.ablation
    workers = cfg.workers if workers is None else workers
    ds = load_dataset(cfg) if ds is None else ds
    cells = [(rt, a, p, s) for s in ab.seeds for rt in ab.r_train for a in ab.alphas for p in ab.policies]
    if workers <= 1:
        cache = make_cache(cfg, cache_dir)
        reports = [_run_cell(cfg, ds, rt, a, p, s, cache) for rt, a, p, s in cells]
    else:
        groups = [(cfg, rt, s, [(a, p) for a in ab.alphas for p in ab.policies], cache_dir)
                  for s in ab.seeds for rt in ab.r_train]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = [r for grp in pool.map(_cell_group, groups) for r in grp]
    return reports


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def summary_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in reports:
        w.writerow([_fmt(r.r_train), _fmt(float(r.alpha)), r.policy, _fmt(r.seed), _fmt(r.aggregate_mse),
                    _fmt(r.frag_score), _fmt(r.mean_nbr_dist), _fmt(r.runtime_s)])
    return buf.getvalue()
