import csv
import json
import subprocess
import sys

import pytest

from topkgat import cli

from conftest import planted_block_dataset


@pytest.fixture(scope="module")
def raw_tsv(tmp_path_factory):
    """The planted-block dataset as a raw token TSV."""
    ds = planted_block_dataset()
    path = tmp_path_factory.mktemp("raw") / "interactions.tsv"
    with open(path, "w") as fh:
        for u, i in ds.interactions:
            fh.write(f"user{u}\titem{i}\n")
    return str(path)


FAST_TRAIN = ["--dim", "8", "--layers", "1", "--epochs-max", "2", "--patience", "5",
              "--batch-size", "256", "--seed", "7", "--deterministic"]


@pytest.fixture(scope="module")
def prepared(raw_tsv, tmp_path_factory):
    out = tmp_path_factory.mktemp("prepared")
    assert cli.main(["prepare", "--raw", raw_tsv, "--out", str(out),
                     "--kcore", "1", "--seed", "3"]) == 0
    return str(out)


@pytest.fixture(scope="module")
def trained(prepared, tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    assert cli.main(["train", "--data", prepared, "--out", str(out)] + FAST_TRAIN) == 0
    return str(out)


# ---------------------------------------------------------------------------
# prepare


def test_prepare_writes_artifacts(prepared, tmp_path):
    import os
    names = set(os.listdir(prepared))
    assert {"train.tsv", "valid.tsv", "test.tsv", "manifest.json",
            cli.ECHO_FILE} <= names
    manifest = json.load(open(f"{prepared}/manifest.json"))
    assert manifest["kcore"] == 1 and manifest["seed"] == 3
    total = sum(manifest["counts"].values())
    assert manifest["counts"]["train"] == int(0.7 * total)


def test_prepare_reproducible(raw_tsv, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert cli.main(["prepare", "--raw", raw_tsv, "--out", str(out),
                         "--kcore", "1", "--seed", "3"]) == 0
    for name in ("train.tsv", "valid.tsv", "test.tsv", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_prepare_missing_file_exits_2(tmp_path):
    assert cli.main(["prepare", "--raw", str(tmp_path / "nope.tsv"),
                     "--out", str(tmp_path / "out")]) == 2


def test_prepare_malformed_input_exits_2(tmp_path):
    bad = tmp_path / "bad.tsv"
    bad.write_text("lone_token\n")
    assert cli.main(["prepare", "--raw", str(bad), "--out", str(tmp_path / "out")]) == 2


# ---------------------------------------------------------------------------
# train


def test_train_emits_four_artifacts(trained):
    import os
    names = set(os.listdir(trained))
    assert {"checkpoint.bin", "training_log.jsonl", "eval_report.json",
            cli.ECHO_FILE} <= names
    records = [json.loads(line) for line in open(f"{trained}/training_log.jsonl")]
    assert len(records) == 2
    for rec in records:
        assert set(rec) == {"epoch", "loss", "val_ndcg20", "val_recall20",
                            "beta_rank_summary"}
    report = json.load(open(f"{trained}/eval_report.json"))
    assert set(report) == {"K", "evaluated_users", "precision", "recall", "ndcg"}


def test_train_deterministic_byte_identical(prepared, trained, tmp_path):
    out2 = tmp_path / "again"
    assert cli.main(["train", "--data", prepared, "--out", str(out2)] + FAST_TRAIN) == 0
    for name in ("checkpoint.bin", "training_log.jsonl", "eval_report.json"):
        with open(f"{trained}/{name}", "rb") as fa, open(out2 / name, "rb") as fb:
            assert fa.read() == fb.read(), name


def test_train_echo_roundtrip(prepared, trained, tmp_path):
    out2 = tmp_path / "rerun"
    assert cli.main(["train", "--config", f"{trained}/{cli.ECHO_FILE}",
                     "--out", str(out2)]) == 0
    for name in ("checkpoint.bin", "training_log.jsonl"):
        with open(f"{trained}/{name}", "rb") as fa, open(out2 / name, "rb") as fb:
            assert fa.read() == fb.read(), name


def test_train_divergence_exits_3(prepared, tmp_path, monkeypatch):
    from topkgat import trainer as trainer_mod
    from topkgat.model import Hyperparams, init_params
    from topkgat.trainer import FitResult, TrainingDiverged

    def explode(split, cfg, hyper):
        params = init_params(split.n_users, split.n_items, hyper, seed=0)
        raise TrainingDiverged("boom", FitResult(params=params, log=[], diverged=True))

    monkeypatch.setattr(trainer_mod, "fit", explode)
    out = tmp_path / "diverged"
    code = cli.main(["train", "--data", prepared, "--out", str(out)] + FAST_TRAIN)
    assert code == 3
    assert (out / "checkpoint.bin").exists()  # partial artifacts retained
    assert (out / "training_log.jsonl").exists()


def test_unknown_config_key_exits_2(prepared, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("no_such_key=1\n")
    assert cli.main(["train", "--config", str(cfg), "--data", prepared,
                     "--out", str(tmp_path / "out")]) == 2


def test_flag_overrides_config_file(prepared, tmp_path):
    cfg = tmp_path / "base.cfg"
    cfg.write_text("epochs_max=1\nseed=7\ndim=8\nlayers=1\npatience=5\nbatch_size=256\n")
    out = tmp_path / "out"
    assert cli.main(["train", "--config", str(cfg), "--data", prepared,
                     "--out", str(out), "--epochs-max", "2"]) == 0
    echoed = cli.load_config_file(str(out / cli.ECHO_FILE))
    assert echoed["epochs_max"] == 2
    assert echoed["seed"] == 7


# ---------------------------------------------------------------------------
# grid


def test_grid_singleton_axes(prepared, tmp_path):
    out = tmp_path / "grid"
    assert cli.main(["grid", "--data", prepared, "--out", str(out), "--dim", "8",
                     "--epochs-max", "1", "--patience", "0", "--batch-size", "256",
                     "--seed", "7", "--grid-lrs", "0.01", "--grid-weight-decays", "0",
                     "--grid-layers", "1,2"]) == 0
    leaderboard = json.load(open(out / "leaderboard.json"))
    assert len(leaderboard) == 2
    vals = [e["val_ndcg20"] for e in leaderboard]
    assert vals == sorted(vals, reverse=True)
    best = json.load(open(out / "best_cell.json"))
    assert best["val_ndcg20"] == vals[0]
    assert (out / "checkpoint.bin").exists() and (out / "eval_report.json").exists()


# ---------------------------------------------------------------------------
# evaluate


def test_evaluate_checkpoint(prepared, trained, tmp_path):
    out = tmp_path / "eval"
    assert cli.main(["evaluate", "--data", prepared, "--checkpoint",
                     f"{trained}/checkpoint.bin", "--out", str(out)]) == 0
    report = json.load(open(out / "eval_report.json"))
    assert report["K"] == 20 and 0.0 <= report["ndcg"] <= 1.0
    # matches the report the train command wrote for the same checkpoint
    train_report = json.load(open(f"{trained}/eval_report.json"))
    assert report == train_report


def test_evaluate_validation_target(prepared, trained, tmp_path):
    out = tmp_path / "eval_val"
    assert cli.main(["evaluate", "--data", prepared, "--checkpoint",
                     f"{trained}/checkpoint.bin", "--out", str(out),
                     "--target", "validation"]) == 0


def test_evaluate_missing_checkpoint_exits_2(prepared, tmp_path):
    assert cli.main(["evaluate", "--data", prepared, "--checkpoint",
                     str(tmp_path / "none.bin"), "--out", str(tmp_path / "o")]) == 2


# ---------------------------------------------------------------------------
# ablate


@pytest.fixture(scope="module")
def ablated(prepared, tmp_path_factory):
    out = tmp_path_factory.mktemp("ablated")
    args = ["ablate", "--data", prepared, "--out", str(out), "--dim", "8",
            "--layers", "1", "--epochs-max", "1", "--patience", "0",
            "--batch-size", "256", "--seed", "7"]
    assert cli.main(args) == 0
    return str(out)


def test_ablate_emits_four_cells(ablated):
    with open(f"{ablated}/ablation.csv") as fh:
        reader = csv.DictReader(fh)
        assert reader.fieldnames == ["cell", "activation", "use_threshold",
                                     "ndcg20", "recall20", "status"]
        rows = list(reader)
    assert [r["cell"] for r in rows] == ["full", "no_threshold", "no_bandpass",
                                         "no_bandpass_no_threshold"]
    assert all(r["status"] == "ok" for r in rows)


def test_ablate_no_threshold_cell_matches_train(ablated, prepared, tmp_path):
    out = tmp_path / "flagged"
    assert cli.main(["train", "--data", prepared, "--out", str(out), "--dim", "8",
                     "--layers", "1", "--epochs-max", "1", "--patience", "0",
                     "--batch-size", "256", "--seed", "7",
                     "--use-threshold", "false"]) == 0
    report = json.load(open(out / "eval_report.json"))
    rows = json.load(open(f"{ablated}/ablation.json"))
    cell = next(r for r in rows if r["cell"] == "no_threshold")
    assert cell["ndcg20"] == pytest.approx(report["ndcg"], abs=1e-12)
    assert cell["recall20"] == pytest.approx(report["recall"], abs=1e-12)


# ---------------------------------------------------------------------------
# analyze


def test_analyze_single_checkpoint_degree_report(prepared, trained, tmp_path):
    out = tmp_path / "analysis"
    assert cli.main(["analyze", "--data", prepared, "--out", str(out),
                     f"{trained}/checkpoint.bin"]) == 0
    with open(out / "beta_rank_by_degree.csv") as fh:
        reader = csv.reader(fh)
        assert next(reader) == ["layer", "bucket_lo", "bucket_hi", "mean_rank", "n_users"]
        assert len(list(reader)) >= 1
    assert not (out / "beta_rank_trajectory.csv").exists()


def test_analyze_series_trajectory_report(prepared, trained, tmp_path):
    out = tmp_path / "analysis_series"
    ckpt = f"{trained}/checkpoint.bin"
    assert cli.main(["analyze", "--data", prepared, "--out", str(out)]
                    + [ckpt] * 5) == 0
    with open(out / "beta_rank_trajectory.csv") as fh:
        reader = csv.DictReader(fh)
        assert reader.fieldnames == ["epoch", "layer", "mean_rank"]
        rows = list(reader)
    assert sorted({int(r["epoch"]) for r in rows}) == [1, 2, 3, 4, 5]


def test_analyze_requires_checkpoints(prepared, tmp_path):
    assert cli.main(["analyze", "--data", prepared,
                     "--out", str(tmp_path / "o")]) == 2


# ---------------------------------------------------------------------------
# console entry point


def test_console_script_help_runs():
    proc = subprocess.run([sys.executable, "-m", "topkgat.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    for command in ("prepare", "train", "grid", "evaluate", "ablate", "analyze"):
        assert command in proc.stdout
