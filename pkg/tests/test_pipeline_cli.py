import json
import shutil
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest

from lccvae.cli import main
from lccvae.completion import read_latent_field_csv
from lccvae.config import ConfigError, RunConfig, apply_overrides, load_config
from lccvae.constraint import load_anchor_set
from lccvae.cvae import decode, encode, load_checkpoint, train_cvae
from lccvae.data import denormalize, generate_synthetic, load_ensemble, location_features, normalize
from lccvae.pipeline import evaluate_held_out

SMALL = ["--set", "data.synthetic.R=4", "--set", "data.synthetic.T=48", "--set", "cvae.epochs=60",
         "--set", "experiment.r_train=3", "--set", 'completion.mode="sparse_variational"',
         "--set", "completion.steps=100"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def files_under(root):
    return sorted(p.relative_to(root).as_posix() for p in root.rglob("*") if p.is_file())


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--output-dir", str(out), *SMALL]) == 0
    return out


# --- config -----------------------------------------------------------------------------

def test_default_config_round_trips_through_json(tmp_path):
    cfg = RunConfig()
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    back = load_config(tmp_path / "c.json")
    assert back == cfg and back.hash == cfg.hash


def test_unknown_keys_are_rejected(tmp_path):
    doc = RunConfig().to_dict()
    doc["cvae"]["dropout"] = 0.1
    (tmp_path / "c.json").write_text(json.dumps(doc))
    with pytest.raises(ConfigError, match="dropout"):
        load_config(tmp_path / "c.json")
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["cvae.nope=1"])
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["nosection.key=1"])


def test_overrides_are_typed_and_validated():
    cfg = apply_overrides(RunConfig(), ["cvae.epochs=5", "cvae.hidden_widths=[4,4]", "experiment.alpha=0.25"])
    assert cfg.cvae.epochs == 5 and cfg.cvae.hidden_widths == (4, 4) and cfg.experiment.alpha == 0.25
    assert cfg.hash != RunConfig().hash
    for bad in ("experiment.alpha=0", "completion.mode=\"magic\"", "cvae.epochs=\"many\"", "constraint.lam=-1"):
        with pytest.raises((ConfigError, ValueError)):
            apply_overrides(RunConfig(), [bad])


# --- gen-data ------------------------------------------------------------------------------

def test_gen_data_default(tmp_path, capsys):
    code, out, err = run(capsys, "gen-data", "--output-dir", str(tmp_path))
    assert code == 0
    doc = json.loads(out)
    ds = load_ensemble(tmp_path / "ensemble.ensb")
    assert (ds.R, ds.L, ds.T) == (10, 256, 240) == (doc["R"], doc["L"], doc["T"])
    assert doc["checksum"] == generate_synthetic().checksum()
    assert "phase=gen-data" in err


def test_gen_data_is_reproducible(tmp_path, capsys):
    a = run(capsys, "gen-data", "--output-dir", str(tmp_path / "a"), "--set", "data.synthetic.seed=3")[1]
    b = run(capsys, "gen-data", "--output-dir", str(tmp_path / "b"), "--set", "data.synthetic.seed=3")[1]
    assert json.loads(a)["checksum"] == json.loads(b)["checksum"]
    assert (tmp_path / "a/ensemble.ensb").read_bytes() == (tmp_path / "b/ensemble.ensb").read_bytes()


def test_gen_data_single_realization(tmp_path, capsys):
    code, _, _ = run(capsys, "gen-data", "--output-dir", str(tmp_path), "--set", "data.synthetic.R=1")
    assert code == 0 and load_ensemble(tmp_path / "ensemble.ensb").R == 1


def test_gen_data_refuses_to_write_outside(tmp_path, capsys):
    code, _, err = run(capsys, "gen-data", "--output-dir", str(tmp_path / "o"), "--out", "../escape.ensb")
    assert code == 2 and "outside" in err
    assert not (tmp_path / "escape.ensb").exists()


# --- train -----------------------------------------------------------------------------------

def test_train_outputs(trained_run):
    files = files_under(trained_run)
    assert files == ["anchors.json", "checkpoints/r000.lccv", "checkpoints/r001.lccv", "checkpoints/r002.lccv",
                     "loss_traces.json", "train_meta.json"]
    traces = json.loads((trained_run / "loss_traces.json").read_text())
    assert len(traces) == 3
    for trace in traces.values():
        assert len(trace) == 60 and trace[-1] < trace[0]


def test_train_without_penalty_is_plain_training(tmp_path, capsys):
    argv = ["--set", "data.synthetic.R=3", "--set", "data.synthetic.T=24", "--set", "cvae.epochs=5",
            "--set", "experiment.r_train=2"]
    assert run(capsys, "train", "--output-dir", str(tmp_path), "--lambda", "0", *argv)[0] == 0
    cfg = apply_overrides(RunConfig(), [a for a in argv if a != "--set"])
    ds = generate_synthetic(cfg.data.synthetic)
    Z, _ = normalize(ds, [0, 1])
    X = location_features(ds.coords)
    cc = replace(cfg.cvae, T=ds.T)
    for r in (0, 1):
        plain = train_cvae(X, Z[r], cc, realization_id=r)
        saved = load_checkpoint(tmp_path / f"checkpoints/r{r:03d}.lccv")
        assert all(np.array_equal(a, b) for a, b in zip(saved.params, plain.params))


def test_train_is_byte_reproducible(tmp_path, capsys):
    argv = ["--set", "data.synthetic.R=3", "--set", "data.synthetic.T=24", "--set", "cvae.epochs=3",
            "--set", "experiment.r_train=2"]
    for d in ("a", "b"):
        assert run(capsys, "train", "--output-dir", str(tmp_path / d), *argv)[0] == 0
    for f in files_under(tmp_path / "a"):
        if f != "train_meta.json":  # records the output directory itself
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    meta = [json.loads((tmp_path / d / "train_meta.json").read_text()) for d in ("a", "b")]
    assert meta[0]["config_hash"] == meta[1]["config_hash"]


def test_missing_data_file_exits_2(tmp_path, capsys):
    code, out, err = run(capsys, "train", "--output-dir", str(tmp_path), "--data", str(tmp_path / "nope.ensb"))
    assert code == 2 and "nope.ensb" in err and out == ""


def test_corrupt_data_file_exits_3(tmp_path, capsys):
    (tmp_path / "bad.ensb").write_bytes(b"ENSB" + b"\x00" * 10)
    code, _, err = run(capsys, "train", "--output-dir", str(tmp_path), "--data", str(tmp_path / "bad.ensb"))
    assert code == 3 and "offset" in err


def test_unknown_config_key_exits_2(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--output-dir", str(tmp_path), "--set", "cvae.widthz=3")
    assert code == 2 and "widthz" in err
    assert run(capsys, "train", "--output-dir", str(tmp_path), "--config", str(tmp_path / "none.json"))[0] == 2


def test_bad_command_line_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--bogus"])
    assert exc.value.code == 2


# --- complete --------------------------------------------------------------------------------

def test_complete_beats_the_ensemble_mean(tmp_path, trained_run, capsys):
    code, out, err = run(capsys, "complete", "--output-dir", str(tmp_path), "--checkpoints",
                         str(trained_run / "checkpoints"), "--alpha", "0.7", *SMALL)
    assert code == 0
    doc = json.loads(out)
    assert np.isfinite(doc["mse"]) and doc["mse"] < doc["baseline_mse"]
    assert doc["held_out"] == 3 and doc["observed"] == 180
    assert files_under(tmp_path) == ["generated.csv", "latent_field.csv", "report.json"]
    lines = (tmp_path / "latent_field.csv").read_text().splitlines()
    assert len(lines) == 257
    assert "phase=complete" in err


def test_complete_at_full_coverage_reconstructs(tmp_path, trained_run, capsys):
    code, out, _ = run(capsys, "complete", "--output-dir", str(tmp_path), "--checkpoints",
                       str(trained_run / "checkpoints"), "--alpha", "1.0", *SMALL)
    assert code == 0
    meta = json.loads((trained_run / "train_meta.json").read_text())
    cfg = apply_overrides(RunConfig.from_dict(meta["config"]), ["experiment.alpha=1.0"])
    ds = generate_synthetic(cfg.data.synthetic)
    Z, stats = normalize(ds, meta["norm_ids"])
    X = location_features(ds.coords)
    models = [load_checkpoint(trained_run / f"checkpoints/r{r:03d}.lccv") for r in meta["train_ids"]]
    star = evaluate_held_out(cfg, ds, Z, stats, models, load_anchor_set(trained_run / "anchors.json")).star_model
    recon = denormalize(decode(star, X, encode(star, X, Z[3]).mu), stats)
    gen = np.loadtxt(tmp_path / "generated.csv", delimiter=",", skiprows=1)
    np.testing.assert_allclose(gen, recon, rtol=1e-8)
    field, _ = read_latent_field_csv(tmp_path / "latent_field.csv")
    assert np.all(field.var_array() == 0)
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["observed_ids"] == list(range(ds.L))
    assert json.loads(out)["mse"] == report["aggregate_mse"]


def test_k_not_below_observed_count_exits_2(tmp_path, trained_run, capsys):
    code, _, err = run(capsys, "complete", "--output-dir", str(tmp_path), "--checkpoints",
                       str(trained_run / "checkpoints"), "--alpha", "0.01", *SMALL, "--set", "completion.k=20")
    assert code == 2 and "completion.k=20" in err and "13" in err


def test_complete_rejects_a_different_dataset(tmp_path, trained_run, capsys):
    code, _, err = run(capsys, "complete", "--output-dir", str(tmp_path), "--checkpoints",
                       str(trained_run / "checkpoints"), *SMALL, "--set", "data.synthetic.seed=5")
    assert code == 3 and "differs" in err


def test_complete_refuses_a_training_realization(tmp_path, trained_run, capsys):
    code, _, err = run(capsys, "complete", "--output-dir", str(tmp_path), "--checkpoints",
                       str(trained_run / "checkpoints"), "--held-out", "1", *SMALL)
    assert code == 2 and "used for training" in err


# --- inspect ---------------------------------------------------------------------------------

def test_inspect_summaries(tmp_path, trained_run, capsys):
    run(capsys, "gen-data", "--output-dir", str(tmp_path), "--set", "data.synthetic.R=2")
    code, out, _ = run(capsys, "inspect", str(tmp_path / "ensemble.ensb"),
                       str(trained_run / "checkpoints/r001.lccv"), str(trained_run / "anchors.json"))
    assert code == 0
    ens, ck, anc = json.loads(out)
    assert ens["kind"] == "ensemble" and ens["R"] == 2 and ens["L"] == 256
    assert ck["kind"] == "checkpoint" and ck["param_count_ok"]
    # (3+48)*128 + 128 + 128*128 + 128 + 128*6 + 6 for the encoder; (3+3)*128 + 128 + 128*128 + 128 + 128*48 + 48
    assert ck["param_count"] == 51 * 128 + 128 + 128 * 128 + 128 + 128 * 6 + 6 + 6 * 128 + 128 + 128 * 128 + 128 \
        + 128 * 48 + 48
    assert anc["kind"] == "anchors" and anc["count"] == 13


def test_inspect_corrupt_file_exits_3(tmp_path, capsys):
    (tmp_path / "x.ensb").write_bytes(b"ENSB\x01\x00\x00\x00")
    code, out, err = run(capsys, "inspect", str(tmp_path / "x.ensb"))
    assert code == 3 and out == ""
    (tmp_path / "y.txt").write_text("hello")
    assert run(capsys, "inspect", str(tmp_path / "y.txt"))[0] == 3
    assert run(capsys, "inspect", str(tmp_path / "missing"))[0] == 2


# --- ablate ----------------------------------------------------------------------------------

ABLATE = ["--set", "data.synthetic.R=3", "--set", "data.synthetic.T=24", "--set", "cvae.epochs=5",
          "--set", "ablation.r_train=[1,2]", "--set", "ablation.alphas=[0.5,1.0]", "--set", "ablation.seeds=[0]",
          "--set", 'completion.mode="sparse_variational"', "--set", "completion.steps=20"]


def test_ablate_writes_reports_and_a_reproducible_summary(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("LCCVAE_CACHE_DIR", raising=False)
    code, out, _ = run(capsys, "ablate", "--output-dir", str(tmp_path / "a"), *ABLATE)
    assert code == 0 and json.loads(out)["cells"] == 4
    assert len(list((tmp_path / "a/reports").glob("*.json"))) == 4
    assert list((tmp_path / "a/cache").glob("*.pkl"))
    # a warm cache and a cold run give the same bytes
    assert run(capsys, "ablate", "--output-dir", str(tmp_path / "a"), *ABLATE)[0] == 0
    assert run(capsys, "ablate", "--output-dir", str(tmp_path / "b"), "--no-cache", *ABLATE)[0] == 0
    a = (tmp_path / "a/summary.csv").read_bytes()
    assert a == (tmp_path / "b/summary.csv").read_bytes()
    assert a.splitlines()[0] == b"r_train,alpha,policy,seed,mse,frag_score,mean_nbr_dist,runtime_s"
    assert not (tmp_path / "b/cache").exists()
    rep = run(capsys, "inspect", str(tmp_path / "a/reports/r2_a0.5_seeded_random_s0.json"))[1]
    assert json.loads(rep)[0]["kind"] == "report"


def test_cache_directory_from_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("LCCVAE_CACHE_DIR", str(tmp_path / "cache"))
    argv = [a if a != "ablation.r_train=[1,2]" else "ablation.r_train=[1]" for a in ABLATE]
    assert run(capsys, "ablate", "--output-dir", str(tmp_path / "out"), *argv)[0] == 0
    assert list((tmp_path / "cache").glob("*.pkl"))
    assert not (tmp_path / "out/cache").exists()


# --- installed entry point -------------------------------------------------------------------

def test_console_script_exit_codes(tmp_path):
    exe = shutil.which("lccvae")
    cmd = [exe] if exe else [sys.executable, "-m", "lccvae.cli"]
    ok = subprocess.run(cmd + ["gen-data", "--output-dir", str(tmp_path), "--set", "data.synthetic.R=1",
                               "--set", "data.synthetic.T=12"], capture_output=True, text=True)
    assert ok.returncode == 0 and json.loads(ok.stdout)["R"] == 1
    bad = subprocess.run(cmd + ["train", "--output-dir", str(tmp_path), "--data", "missing.ensb"],
                         capture_output=True, text=True)
    assert bad.returncode == 2 and "missing.ensb" in bad.stderr and bad.stdout == ""
