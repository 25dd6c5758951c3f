import json
import math
import os
from pathlib import Path

import numpy as np
import pytest

from edgedepth import cli, gmw, harness, synth
from edgedepth.errors import IncompatibleCheckpoint, NonFiniteLoss, ParseError


def tiny_config(**overrides):
    base = dict(
        n_train=48,
        n_val=16,
        train=harness.TrainSettings(batch_size=16, epochs_cls=2, epochs_reg=2),
        encoder=harness.EncoderSettings(layers=2, hidden=12, feature_dim=8),
        sinkhorn=harness.SinkhornSettings(train_max_iters=4, train_tol=1e-6),
    )
    base.update(overrides)
    return harness.RunConfig(**base)


# ---------------------------------------------------------------------------
# config


def test_config_defaults_match_documented_scale():
    cfg = harness.RunConfig()
    assert cfg.n_train == 8000 and cfg.n_val == 2000
    assert cfg.train.epochs_cls == 50 and cfg.train.epochs_reg == 50
    assert cfg.train.batch_size == 32
    assert cfg.train.lr == 1e-4 and cfg.train.weight_decay == 1e-5
    assert cfg.selection.k == 1500 and cfg.selection.tau == 1e-3
    assert cfg.template.n_extra + 10 == 16


def test_config_round_trip(tmp_path):
    cfg = tiny_config(seed=3, strategy="uniform")
    path = tmp_path / "config.json"
    harness.save_config(cfg, path)
    assert harness.load_config(path) == cfg


def test_config_rejects_unknown_keys():
    doc = harness.RunConfig().to_dict()
    doc["bogus"] = 1
    with pytest.raises(ValueError, match="bogus"):
        harness.RunConfig.from_dict(doc)
    doc2 = harness.RunConfig().to_dict()
    doc2["noise"]["bogus"] = 1
    with pytest.raises(ValueError, match="bogus"):
        harness.RunConfig.from_dict(doc2)


def test_config_validation():
    with pytest.raises(ValueError):
        harness.RunConfig(strategy="magic")
    with pytest.raises(ValueError):
        harness.RunConfig(schema_version=99)
    with pytest.raises(ValueError):
        harness.RunConfig(train=harness.TrainSettings(beta=-1.0))


def test_config_file_parse_error(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{nope")
    with pytest.raises(ParseError):
        harness.load_config(p)


# ---------------------------------------------------------------------------
# generate


def test_generate_writes_splits_and_echo(tmp_path):
    cfg = tiny_config()
    out = harness.cmd_generate(cfg, tmp_path)
    train = synth.read_dataset(out["train"])
    val = synth.read_dataset(out["val"])
    assert len(train) == 48 and len(val) == 16
    echo = harness.load_config(out["config"])
    assert echo == cfg
    # splits use disjoint noise streams
    assert not np.array_equal(train[0].kp2d, val[0].kp2d)


def test_generate_deterministic(tmp_path):
    cfg = tiny_config(noise=harness.NoiseSettings(sigma_px=1.0, p_outlier=0.2))
    a = tmp_path / "a"
    b = tmp_path / "b"
    a.mkdir()
    b.mkdir()
    harness.cmd_generate(cfg, a)
    harness.cmd_generate(cfg, b)
    assert (a / "train.jsonl").read_bytes() == (b / "train.jsonl").read_bytes()
    assert (a / "val.jsonl").read_bytes() == (b / "val.jsonl").read_bytes()


def test_generate_missing_dir_errors(tmp_path):
    with pytest.raises(OSError):
        harness.cmd_generate(tiny_config(), tmp_path / "missing")


# ---------------------------------------------------------------------------
# train


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    data_dir = tmp_path_factory.mktemp("data")
    out_dir = tmp_path_factory.mktemp("run")
    cfg = tiny_config()
    harness.cmd_generate(cfg, data_dir)
    summary = harness.cmd_train(cfg, data_dir, out_dir)
    return cfg, data_dir, out_dir, summary


def test_train_outputs(trained):
    cfg, data_dir, out_dir, summary = trained
    assert Path(summary["checkpoint"]).exists()
    records = [json.loads(l) for l in open(summary["log"])]
    assert len(records) == 4
    assert [r["phase"] for r in records] == [1, 1, 2, 2]
    assert all(r["train_reg"] == 0.0 for r in records[:2])
    assert all(r["train_reg"] > 0.0 for r in records[2:])
    assert summary["best_epoch"] >= 1
    assert math.isfinite(summary["val_mean_abs_err"])


def test_train_reproducible(trained, tmp_path):
    cfg, data_dir, out_dir, summary = trained
    rerun = tmp_path / "rerun"
    rerun.mkdir()
    summary2 = harness.cmd_train(cfg, data_dir, rerun)
    assert Path(summary["log"]).read_bytes() == Path(summary2["log"]).read_bytes()
    assert Path(summary["checkpoint"]).read_bytes() == \
        Path(summary2["checkpoint"]).read_bytes()


def test_train_checkpoint_loads_and_evaluates(trained):
    cfg, data_dir, out_dir, summary = trained
    model, meta = harness.load_gmw_checkpoint(summary["checkpoint"], cfg)
    assert meta["kind"] == "gmw"
    report = harness.cmd_eval(cfg, Path(data_dir) / "val.jsonl",
                              summary["checkpoint"])
    assert report.n_objects == 16
    assert report.strategy == "gmw"
    assert math.isfinite(report.mean_abs_err)
    assert sum(report.hist_counts) == report.n_objects


def test_train_checkpoint_rejects_mismatched_encoder(trained):
    cfg, data_dir, out_dir, summary = trained
    other = cfg.replace(encoder=harness.EncoderSettings(layers=3, hidden=9,
                                                        feature_dim=8))
    with pytest.raises(IncompatibleCheckpoint):
        harness.load_gmw_checkpoint(summary["checkpoint"], other)


def test_train_phase_configs(tmp_path):
    # classification-only and regression-from-start are both expressible
    data_dir = tmp_path / "d"
    data_dir.mkdir()
    cfg = tiny_config(train=harness.TrainSettings(batch_size=16, epochs_cls=2,
                                                  epochs_reg=0))
    harness.cmd_generate(cfg, data_dir)
    out1 = tmp_path / "clsonly"
    out1.mkdir()
    s1 = harness.cmd_train(cfg, data_dir, out1)
    recs = [json.loads(l) for l in open(s1["log"])]
    assert len(recs) == 2 and all(r["phase"] == 1 for r in recs)

    cfg0 = tiny_config(train=harness.TrainSettings(batch_size=16, epochs_cls=0,
                                                   epochs_reg=2))
    out2 = tmp_path / "regfrom0"
    out2.mkdir()
    s2 = harness.cmd_train(cfg0, data_dir, out2)
    recs = [json.loads(l) for l in open(s2["log"])]
    assert len(recs) == 2 and all(r["phase"] == 2 for r in recs)


def test_train_uncertainty_head(tmp_path):
    data_dir = tmp_path / "d"
    data_dir.mkdir()
    cfg = tiny_config(strategy="uncertainty")
    harness.cmd_generate(cfg, data_dir)
    out = tmp_path / "run"
    out.mkdir()
    summary = harness.cmd_train(cfg, data_dir, out)
    head, meta = harness.load_sigma_checkpoint(summary["checkpoint"])
    assert meta["kind"] == "uncertainty"
    report = harness.cmd_eval(cfg, data_dir / "val.jsonl", summary["checkpoint"])
    assert math.isfinite(report.mean_abs_err)


def test_train_rejects_untrainable_strategy(tmp_path):
    data_dir = tmp_path / "d"
    data_dir.mkdir()
    cfg = tiny_config(strategy="uniform")
    harness.cmd_generate(cfg, data_dir)
    with pytest.raises(ValueError):
        harness.cmd_train(cfg, data_dir, tmp_path)


def test_nonfinite_loss_aborts_with_dump(tmp_path, monkeypatch):
    data_dir = tmp_path / "d"
    data_dir.mkdir()
    cfg = tiny_config()
    harness.cmd_generate(cfg, data_dir)

    def explode(*args, **kwargs):
        return {"cls": float("nan"), "reg": 0.0, "total": float("nan")}, {}, None

    monkeypatch.setattr(gmw, "batch_loss_and_grads", explode)
    out = tmp_path / "run"
    out.mkdir()
    with pytest.raises(NonFiniteLoss):
        harness.cmd_train(cfg, data_dir, out)
    dump = json.loads((out / "nonfinite_dump.json").read_text())
    assert dump["epoch"] == 1


# ---------------------------------------------------------------------------
# eval / ablations


@pytest.fixture(scope="module")
def noiseless_data(tmp_path_factory):
    data_dir = tmp_path_factory.mktemp("clean")
    cfg = tiny_config(noise=harness.NoiseSettings(sigma_px=0.0, sigma_3d=0.0,
                                                  p_outlier=0.0))
    harness.cmd_generate(cfg, data_dir)
    return cfg, data_dir


def test_eval_uniform_noiseless_is_exact(noiseless_data):
    cfg, data_dir = noiseless_data
    report = harness.cmd_eval(cfg.replace(strategy="uniform"),
                              data_dir / "val.jsonl")
    assert report.max_abs_err < 1e-9  # every object, not just on average
    assert report.mean_abs_err < 1e-9
    assert report.x_err_mean < 1e-8
    assert report.median_abs_err < 1e-9


def test_eval_writes_report_and_histogram(noiseless_data, tmp_path):
    cfg, data_dir = noiseless_data
    prefix = tmp_path / "out"
    report = harness.cmd_eval(cfg.replace(strategy="uniform"),
                              data_dir / "val.jsonl", out_prefix=prefix)
    doc = json.loads(Path(f"{prefix}.report.json").read_text())
    assert doc["n_objects"] == report.n_objects
    assert doc["config"]["strategy"] == "uniform"
    lines = Path(f"{prefix}.hist.csv").read_text().strip().splitlines()
    assert lines[0] == "bin_lo,bin_hi,count"
    assert sum(int(l.split(",")[2]) for l in lines[1:]) == report.n_objects


def test_eval_empty_dataset_errors(tmp_path):
    empty = tmp_path / "empty.jsonl"
    synth.write_dataset(empty, [])
    with pytest.raises(ValueError):
        harness.cmd_eval(tiny_config(strategy="uniform"), empty)


def test_eval_gmw_requires_checkpoint(noiseless_data):
    cfg, data_dir = noiseless_data
    with pytest.raises(IncompatibleCheckpoint):
        harness.cmd_eval(cfg.replace(strategy="gmw"), data_dir / "val.jsonl")


def test_ablate_edges_k_column(noiseless_data, tmp_path):
    cfg, data_dir = noiseless_data
    out_csv = tmp_path / "ablate.csv"
    rows = harness.cmd_ablate_edges(
        cfg.replace(strategy="uniform"), data_dir / "val.jsonl",
        ks=[1, 10, "all"], out_csv=out_csv)
    m = 16 * 15 // 2
    assert [r["k"] for r in rows] == [1, 10, m]
    assert all(r["mean_abs_err"] < 1e-9 for r in rows)
    header = out_csv.read_text().splitlines()[0]
    assert header == "k,mean_abs_err,median_abs_err"


def test_ablate_edges_requires_ks(noiseless_data):
    cfg, data_dir = noiseless_data
    with pytest.raises(ValueError):
        harness.cmd_ablate_edges(cfg.replace(strategy="uniform"),
                                 data_dir / "val.jsonl", ks=[])


def test_denominator_histogram(noiseless_data, tmp_path):
    cfg, data_dir = noiseless_data
    out_csv = tmp_path / "hist.csv"
    rows = harness.cmd_denominator_histogram(cfg, data_dir / "val.jsonl",
                                             out_csv=out_csv, n_bins=5)
    assert len(rows) == 5
    # noiseless: every candidate is within 0.5 m, so every bin is 100% good
    for r in rows:
        assert r["count_good"] == r["count"]
    header = out_csv.read_text().splitlines()[0]
    assert header == "bin_lo,bin_hi,count,count_good"


# ---------------------------------------------------------------------------
# CLI


def run_cli(argv, capsys):
    code = cli.main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_cli_generate_and_eval(tmp_path, capsys):
    out_dir = tmp_path / "data"
    out_dir.mkdir()
    code, out, err = run_cli(
        ["generate", "--out", str(out_dir), "--n-train", "20", "--n-val", "8",
         "--sigma-px", "0", "--sigma-3d", "0", "--p-outlier", "0",
         "--epochs-cls", "1", "--epochs-reg", "1"], capsys)
    assert code == 0, err
    doc = json.loads(out)
    assert doc["counts"] == {"train": 20, "val": 8}

    code, out, err = run_cli(
        ["eval", "--data", str(out_dir / "val.jsonl"), "--strategy", "uniform",
         "--sigma-px", "0", "--sigma-3d", "0", "--p-outlier", "0"], capsys)
    assert code == 0, err
    report = json.loads(out)
    assert report["mean_abs_err"] < 1e-9


def test_cli_error_record(tmp_path, capsys):
    code, out, err = run_cli(
        ["eval", "--data", str(tmp_path / "nope.jsonl"), "--strategy", "uniform"],
        capsys)
    assert code == 1
    record = json.loads(err)
    assert record["error"] == "FileNotFoundError"
    assert "message" in record


def test_cli_env_seed_override(tmp_path, capsys, monkeypatch):
    out_dir = tmp_path / "data"
    out_dir.mkdir()
    monkeypatch.setenv("EDGEDEPTH_SEED", "777")
    code, out, err = run_cli(
        ["generate", "--out", str(out_dir), "--n-train", "2", "--n-val", "1",
         "--seed", "3"], capsys)
    assert code == 0
    echo = harness.load_config(out_dir / "config.json")
    assert echo.seed == 777


def test_cli_denom_hist_and_ablate(tmp_path, capsys):
    out_dir = tmp_path / "data"
    out_dir.mkdir()
    run_cli(["generate", "--out", str(out_dir), "--n-train", "2",
             "--n-val", "20"], capsys)
    csv = tmp_path / "d.csv"
    code, out, err = run_cli(
        ["denom-hist", "--data", str(out_dir / "val.jsonl"),
         "--out", str(csv), "--bins", "4"], capsys)
    assert code == 0
    assert len(json.loads(out)) == 4
    code, out, err = run_cli(
        ["ablate-edges", "--data", str(out_dir / "val.jsonl"),
         "--strategy", "uniform", "--ks", "5,all"], capsys)
    assert code == 0
    rows = json.loads(out)
    assert [r["k"] for r in rows] == [5, 120]
