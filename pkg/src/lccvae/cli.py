"""Command-line entry point: ``lccvae {gen-data,train,complete,ablate,inspect}``.

Machine-readable results go to stdout as JSON; progress goes to stderr as
``key=value`` lines.  Exit codes: 0 success, 2 usage or configuration
error, 3 data or file-format error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .completion import write_latent_field_csv
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .constraint import load_anchor_set, save_anchor_set, train_lc_ensemble
from .cvae import TrainingDivergedError, load_checkpoint, param_count, save_checkpoint
from .data import (EnsembleFormatError, generate_synthetic, load_ensemble, location_features, normalize,
                   save_ensemble)
from .gp import GpNumericalError
from .metrics import EvalReport
from .pipeline import evaluate_held_out, make_cache, run_ablation, summary_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CACHE_ENV = "LCCVAE_CACHE_DIR"

log = logging.getLogger("lccvae")


class UsageError(Exception):
    pass


def _emit(doc) -> None:
    sys.stdout.write(json.dumps(doc, sort_keys=True) + "\n")


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _inside(path: Path, root: Path) -> Path:
    path = Path(path)
    resolved = (root / path).resolve() if not path.is_absolute() else path.resolve()
    if root.resolve() not in (resolved, *resolved.parents):
        raise UsageError(f"refusing to write {path} outside the output directory {root}")
    return resolved


def _load_data(cfg: RunConfig, path: str | None):
    path = path or (cfg.data.path if cfg.data.source == "ensb" else None)
    if path is None:
        return generate_synthetic(cfg.data.synthetic)
    if not Path(path).is_file():
        raise UsageError(f"data file not found: {path}")
    return load_ensemble(path)


def _held_out(cfg: RunConfig, R: int) -> int:
    h = cfg.experiment.held_out
    h = R - 1 if h < 0 else h
    if not 0 <= h < R:
        raise UsageError(f"held-out realization {h} is outside 0..{R - 1}")
    return h


# --- commands ----------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    path = _inside(Path(args.out), out)
    ds = generate_synthetic(cfg.data.synthetic)
    save_ensemble(ds, path)
    log.info("phase=gen-data path=%s R=%d L=%d T=%d", path, ds.R, ds.L, ds.T)
    _emit({"path": str(path), **ds.meta, "checksum": ds.checksum(), "config_hash": cfg.hash})
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    ds = _load_data(cfg, args.data)
    r_star = _held_out(cfg, ds.R)
    pool = [r for r in range(ds.R) if r != r_star]
    r_train = cfg.experiment.r_train
    if not 1 <= r_train <= len(pool):
        raise UsageError(f"experiment.r_train={r_train} must lie in 1..{len(pool)}")
    train_ids = pool[:r_train]
    norm_ids = pool if cfg.data.norm_pool == "training_pool" else train_ids
    Z, stats = normalize(ds, norm_ids, cfg.data.norm_mode)
    X = location_features(ds.coords)
    cc = replace(cfg.cvae, T=ds.T, d_x=X.shape[1])
    con = cfg.constraint
    models, anchors = train_lc_ensemble(Z, X, cc, con.plan, con.lam, con.d_z_max, train_ids,
                                        anchor_seed=cfg.experiment.seed, workers=cfg.workers)
    ckdir = out / "checkpoints"
    ckdir.mkdir(exist_ok=True)
    paths = []
    for m in models:
        p = ckdir / f"r{m.realization_id:03d}.lccv"
        save_checkpoint(m, p)
        paths.append(str(p))
        log.info("phase=train realization=%d epochs=%d loss=%.6g", m.realization_id, len(m.loss_trace),
                 m.loss_trace[-1])
    save_anchor_set(anchors, out / "anchors.json")
    traces = {str(m.realization_id): m.loss_trace for m in models}
    (out / "loss_traces.json").write_text(json.dumps(traces, sort_keys=True))
    meta = {"config": cfg.to_dict(), "config_hash": cfg.hash, "train_ids": train_ids,
            "norm_ids": list(norm_ids), "held_out": r_star, "data_checksum": ds.checksum()}
    (out / "train_meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    _emit({"checkpoints": paths, "anchors": str(out / "anchors.json"), "train_ids": train_ids,
           "final_loss": {str(m.realization_id): m.loss_trace[-1] for m in models}, "config_hash": cfg.hash})
    return EXIT_OK


def cmd_complete(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    ckdir = Path(args.checkpoints) if args.checkpoints else out / "checkpoints"
    run_dir = ckdir.parent
    meta_path = run_dir / "train_meta.json"
    if not meta_path.is_file():
        raise UsageError(f"no train_meta.json next to {ckdir}; run `train` first")
    meta = json.loads(meta_path.read_text())
    ds = _load_data(cfg, args.data)
    if ds.checksum() != meta["data_checksum"]:
        raise EnsembleFormatError("dataset differs from the one the checkpoints were trained on")
    if args.held_out is not None:
        cfg = apply_overrides(cfg, [f"experiment.held_out={args.held_out}"])
    if args.alpha is not None:
        cfg = apply_overrides(cfg, [f"experiment.alpha={args.alpha}"])
    r_star = _held_out(cfg, ds.R)
    if r_star in meta["train_ids"]:
        raise UsageError(f"realization {r_star} was used for training")
    models = [load_checkpoint(ckdir / f"r{r:03d}.lccv") for r in meta["train_ids"]]
    anchors = load_anchor_set(run_dir / "anchors.json", ds.L)
    Z, stats = normalize(ds, meta["norm_ids"], cfg.data.norm_mode)
    alpha = cfg.experiment.alpha
    n_obs = max(len(anchors.anchor_location_ids), int(np.ceil(round(alpha * ds.L, 9))))
    if alpha < 1.0 and cfg.completion.k >= n_obs:
        raise UsageError(f"completion.k={cfg.completion.k} must be smaller than the observed count {n_obs}")
    res = evaluate_held_out(cfg, ds, Z, stats, models, anchors, cache=make_cache(cfg))
    write_latent_field_csv(res.field, ds.coords, out / "latent_field.csv")
    gen = np.array([res.generated[i] for i in range(ds.L)])
    np.savetxt(out / "generated.csv", gen, delimiter=",", fmt="%.9g",
               header=",".join(f"t{t}" for t in range(ds.T)), comments="")
    (out / "report.json").write_text(res.report.to_json())
    log.info("phase=complete held_out=%d alpha=%g mse=%.6g", r_star, alpha, res.report.aggregate_mse)
    _emit({"held_out": r_star, "alpha": alpha, "mse": res.report.aggregate_mse,
           "baseline_mse": res.report.baseline_mse, "observed": len(res.mask.observed_ids),
           "clamp_events": res.field.clamp_events, "report": str(out / "report.json"),
           "config_hash": cfg.hash})
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    ds = _load_data(cfg, args.data)
    cache_dir = os.environ.get(CACHE_ENV) or str(out / "cache")
    reports = run_ablation(cfg, ds, cache_dir=None if args.no_cache else cache_dir)
    rdir = out / "reports"
    rdir.mkdir(exist_ok=True)
    for r in reports:
        name = f"r{r.r_train}_a{r.alpha:g}_{r.policy}_s{r.seed}.json"
        (rdir / name).write_text(r.to_json())
    (out / "summary.csv").write_text(summary_csv(reports))
    failed = [r for r in reports if r.error]
    _emit({"summary": str(out / "summary.csv"), "cells": len(reports), "failed": len(failed),
           "config_hash": cfg.hash})
    return EXIT_NUMERIC if failed and len(failed) == len(reports) else EXIT_OK


def _inspect_one(path: Path) -> dict:
    if not path.is_file():
        raise UsageError(f"file not found: {path}")
    head = path.read_bytes()[:4]
    if head == b"ENSB":
        ds = load_ensemble(path)
        return {"kind": "ensemble", **ds.meta, "checksum": ds.checksum(),
                "value_range": [float(ds.values.min()), float(ds.values.max())]}
    if head == b"LCCV":
        try:
            m = load_checkpoint(path)
        except ValueError as exc:
            raise EnsembleFormatError(str(exc)) from None
        actual = int(sum(p.size for p in m.params))
        expected = param_count(m.config)
        return {"kind": "checkpoint", "realization_id": m.realization_id, "config": m.config.to_dict(),
                "param_count": actual, "param_count_expected": expected, "param_count_ok": actual == expected}
    try:
        doc = json.loads(path.read_text())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise EnsembleFormatError(f"{path}: not an ENSB file, checkpoint or JSON document") from None
    if isinstance(doc, dict) and "anchor_ids" in doc:
        a = load_anchor_set(path)
        return {"kind": "anchors", "count": len(a.anchor_location_ids), "lambda": a.lam,
                "d_z_max": a.d_z_max, "policy": a.policy}
    if isinstance(doc, dict) and "aggregate_mse" in doc:
        r = EvalReport.from_json(path.read_text())
        return {"kind": "report", "r_train": r.r_train, "alpha": r.alpha, "policy": r.policy, "seed": r.seed,
                "mse": r.aggregate_mse, "baseline_mse": r.baseline_mse, "frag_score": r.frag_score,
                "mean_nbr_dist": r.mean_nbr_dist, "spearman": r.spearman, "error": r.error}
    raise EnsembleFormatError(f"{path}: unrecognized JSON document")


def cmd_inspect(cfg: RunConfig, args) -> int:
    _emit([{"path": p, **_inspect_one(Path(p))} for p in args.paths])
    return EXIT_OK


# --- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. cvae.epochs=50 (repeatable)")
    common.add_argument("--workers", type=int, help="parallel worker processes")
    common.add_argument("--output-dir", help="directory for every file the command writes")
    common.add_argument("-v", "--verbose", action="store_true", help="per-epoch progress on stderr")

    p = argparse.ArgumentParser(prog="lccvae", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic ensemble")
    g.add_argument("--out", default="ensemble.ensb", help="file name inside the output directory")
    t = sub.add_parser("train", parents=[common], help="train the LC-CVAE ensemble")
    t.add_argument("--data", help="ENSB file (default: the config's data source)")
    t.add_argument("--lambda", dest="lam", type=float, help="penalty weight (overrides constraint.lam)")
    c = sub.add_parser("complete", parents=[common], help="complete a held-out realization")
    c.add_argument("--data", help="ENSB file (default: the config's data source)")
    c.add_argument("--checkpoints", help="checkpoint directory written by train")
    c.add_argument("--held-out", type=int, help="held-out realization id")
    c.add_argument("--alpha", type=float, help="observed fraction of locations")
    a = sub.add_parser("ablate", parents=[common], help="run the ablation suite")
    a.add_argument("--data", help="ENSB file (default: the config's data source)")
    a.add_argument("--no-cache", action="store_true", help="do not read or write the model cache")
    i = sub.add_parser("inspect", parents=[common], help="summarize ENSB, checkpoint, anchor or report files")
    i.add_argument("paths", nargs="+")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "complete": cmd_complete,
            "ablate": cmd_ablate, "inspect": cmd_inspect}


def _configure(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = list(args.set)
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    if args.output_dir is not None:
        overrides.append(f"output_dir={json.dumps(args.output_dir)}")
    if getattr(args, "lam", None) is not None:
        overrides.append(f"constraint.lam={args.lam}")
    return apply_overrides(cfg, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    root = logging.getLogger("lccvae")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    root.propagate = False
    try:
        cfg = _configure(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, UsageError) as exc:
        log.error("error: %s", exc)
        return EXIT_USAGE
    except (TrainingDivergedError, GpNumericalError, ad.NonFiniteError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (EnsembleFormatError, ValueError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
