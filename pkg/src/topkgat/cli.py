"""Command-line pipeline: prepare, train, grid, evaluate, ablate, analyze.

Configuration is a flat key=value file plus --key value flag overrides;
unknown keys are rejected and the fully resolved configuration is echoed
into the output directory (the echo is itself a valid config file).

Exit codes: 0 success, 2 input/configuration error, 3 numeric failure.
Heavy imports happen inside commands so thread environment variables can be
set before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

ECHO_FILE = "resolved_config.cfg"

# key -> (parser, default). Paths are resolved to absolute before running.
_BOOL = "bool"
SCHEMA: dict[str, tuple[str, object]] = {
    "raw": ("path", None),
    "data": ("path", None),
    "out": ("path", None),
    "checkpoint": ("path", None),
    "kcore": ("int", 5),
    "seed": ("int", 0),
    "dim": ("int", 64),
    "layers": ("int", 2),
    "step_size": ("float", 1.0),
    "reg_weight": ("float", 1.0),
    "activation": ("str", "bandpass"),
    "use_threshold": (_BOOL, True),
    "normalize_similarity": (_BOOL, True),
    "scoring": ("str", "final_layer"),
    "lr": ("float", 0.01),
    "weight_decay": ("float", 0.0),
    "epochs_max": ("int", 1000),
    "patience": ("int", 50),
    "batch_size": ("int", 2048),
    "negatives_per_positive": ("int", 1),
    "snapshot_every": ("int", 10),
    "k": ("int", 20),
    "target": ("str", "test"),
    "deterministic": (_BOOL, False),
    "threads": ("int", 0),
    "verbose": (_BOOL, False),
    "grid_lrs": ("floats", (0.1, 0.01, 0.001)),
    "grid_weight_decays": ("floats", (0.0, 1e-8, 1e-4)),
    "grid_layers": ("ints", (1, 2, 3, 4, 5)),
}

_PATH_KEYS = tuple(k for k, (kind, _) in SCHEMA.items() if kind == "path")


def _parse_value(key: str, text: str):
    kind = SCHEMA[key][0]
    text = text.strip()
    if kind in ("str", "path"):
        return text
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == _BOOL:
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {text!r}")
    if kind == "floats":
        return tuple(float(v) for v in text.split(",") if v.strip())
    if kind == "ints":
        return tuple(int(v) for v in text.split(",") if v.strip())
    raise AssertionError(kind)


def _format_value(key: str, value) -> str:
    kind = SCHEMA[key][0]
    if kind == _BOOL:
        return "true" if value else "false"
    if kind in ("floats", "ints"):
        return ",".join(repr(v) for v in value)
    return str(value)


def load_config_file(path: str) -> dict:
    from .errors import ConfigError

    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected key=value")
            key, _, text = line.partition("=")
            key = key.strip()
            if key not in SCHEMA:
                raise ConfigError(f"{path}:{line_no}: unknown config key {key!r}")
            try:
                out[key] = _parse_value(key, text)
            except ValueError as exc:
                raise ConfigError(f"{path}:{line_no}: {exc}") from exc
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    """defaults <- config file <- command-line flags, with paths made absolute."""
    cfg = {key: default for key, (_, default) in SCHEMA.items()}
    if getattr(args, "config", None):
        cfg.update(load_config_file(args.config))
    for key in SCHEMA:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = _parse_value(key, value) if isinstance(value, str) else value
    for key in _PATH_KEYS:
        if cfg.get(key):
            cfg[key] = os.path.abspath(cfg[key])
    if cfg["threads"] == 0:
        cfg["threads"] = int(os.environ.get("TOPKGAT_THREADS", "0"))
    return cfg


def echo_config(cfg: dict, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, ECHO_FILE), "w", encoding="utf-8") as fh:
        for key in sorted(SCHEMA):
            value = cfg.get(key)
            if value is None:
                continue
            fh.write(f"{key}={_format_value(key, value)}\n")


def _apply_thread_limits(cfg: dict) -> None:
    """Pin BLAS/OpenMP threads; effective only before numpy's first import."""
    threads = 1 if cfg["deterministic"] else cfg["threads"]
    if threads and threads > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(threads))


def _hyper_from(cfg: dict):
    from .model import Hyperparams

    return Hyperparams(
        dim=cfg["dim"],
        n_layers=cfg["layers"],
        step_size=cfg["step_size"],
        reg_weight=cfg["reg_weight"],
        activation=cfg["activation"],
        use_threshold=cfg["use_threshold"],
        normalize_similarity=cfg["normalize_similarity"],
        scoring=cfg["scoring"],
    )


def _train_config_from(cfg: dict):
    from .trainer import TrainConfig

    return TrainConfig(
        lr=cfg["lr"],
        weight_decay=cfg["weight_decay"],
        epochs_max=cfg["epochs_max"],
        patience=cfg["patience"],
        batch_size=cfg["batch_size"],
        seed=cfg["seed"],
        negatives_per_positive=cfg["negatives_per_positive"],
        snapshot_every=cfg["snapshot_every"],
        eval_k=cfg["k"],
        deterministic=cfg["deterministic"],
        verbose=cfg["verbose"],
    )


def _write_json(obj, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require(cfg: dict, *keys: str) -> None:
    from .errors import ConfigError

    for key in keys:
        if not cfg.get(key):
            raise ConfigError(f"missing required option: {key}")


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(cfg: dict) -> int:
    from . import data as dmod

    _require(cfg, "raw", "out")
    ds = dmod.load_interactions(cfg["raw"])
    ds = dmod.kcore_filter(ds, k=cfg["kcore"])
    sd = dmod.split(ds, seed=cfg["seed"])
    dmod.save_split(sd, cfg["out"], kcore=cfg["kcore"])
    echo_config(cfg, cfg["out"])
    print(f"prepared: n_users={ds.n_users} n_items={ds.n_items} "
          f"interactions={ds.n_interactions} "
          f"splits=({sd.train.n_interactions},{sd.validation.n_interactions},"
          f"{sd.test.n_interactions})")
    return 0


def _write_training_artifacts(out_dir, result, split, cfg) -> None:
    from . import model as mmod
    from .eval import evaluate_all
    from .graph import build_graph

    os.makedirs(out_dir, exist_ok=True)
    mmod.save_checkpoint(result.params, os.path.join(out_dir, "checkpoint.bin"))
    with open(os.path.join(out_dir, "training_log.jsonl"), "w", encoding="utf-8") as fh:
        for record in result.log:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    if not result.diverged:
        g = build_graph(split.train)
        trace = mmod.propagate(result.params, g)
        report = evaluate_all(result.params, trace, split, k=cfg["k"], target="test")
        _write_json(report.to_dict(), os.path.join(out_dir, "eval_report.json"))
        print(f"test: ndcg@{cfg['k']}={report.ndcg:.5f} recall@{cfg['k']}={report.recall:.5f} "
              f"precision@{cfg['k']}={report.precision:.5f} users={report.evaluated_user_count}")


def cmd_train(cfg: dict) -> int:
    from .data import load_split
    from .trainer import TrainingDiverged, fit

    _require(cfg, "data", "out")
    split = load_split(cfg["data"])
    echo_config(cfg, cfg["out"])
    try:
        result = fit(split, _train_config_from(cfg), _hyper_from(cfg))
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        _write_training_artifacts(cfg["out"], exc.result, split, cfg)
        return 3
    _write_training_artifacts(cfg["out"], result, split, cfg)
    return 0


def cmd_grid(cfg: dict) -> int:
    from .data import load_split
    from .trainer import grid_search

    _require(cfg, "data", "out")
    split = load_split(cfg["data"])
    echo_config(cfg, cfg["out"])
    best, leaderboard = grid_search(
        split, _train_config_from(cfg), _hyper_from(cfg),
        lrs=cfg["grid_lrs"], weight_decays=cfg["grid_weight_decays"],
        layer_counts=cfg["grid_layers"])
    _write_json(leaderboard, os.path.join(cfg["out"], "leaderboard.json"))
    result = best.pop("result")
    _write_json(best, os.path.join(cfg["out"], "best_cell.json"))
    best_cfg = dict(cfg, lr=best["lr"], weight_decay=best["weight_decay"],
                    layers=best["n_layers"])
    _write_training_artifacts(cfg["out"], result, split, best_cfg)
    print(f"best cell: lr={best['lr']} weight_decay={best['weight_decay']} "
          f"layers={best['n_layers']} val_ndcg20={best['val_ndcg20']:.5f}")
    return 0


def cmd_evaluate(cfg: dict) -> int:
    from .data import load_split
    from .eval import evaluate_all
    from .graph import build_graph
    from .model import load_checkpoint, propagate

    _require(cfg, "data", "checkpoint", "out")
    split = load_split(cfg["data"])
    params = load_checkpoint(cfg["checkpoint"])
    g = build_graph(split.train)
    trace = propagate(params, g)
    report = evaluate_all(params, trace, split, k=cfg["k"], target=cfg["target"])
    os.makedirs(cfg["out"], exist_ok=True)
    echo_config(cfg, cfg["out"])
    _write_json(report.to_dict(), os.path.join(cfg["out"], "eval_report.json"))
    print(f"{cfg['target']}: ndcg@{cfg['k']}={report.ndcg:.5f} "
          f"recall@{cfg['k']}={report.recall:.5f} users={report.evaluated_user_count}")
    return 0


ABLATION_CELLS = (
    {"name": "full", "activation": "bandpass", "use_threshold": True},
    {"name": "no_threshold", "activation": "bandpass", "use_threshold": False},
    {"name": "no_bandpass", "activation": "softmax", "use_threshold": True},
    {"name": "no_bandpass_no_threshold", "activation": "softmax", "use_threshold": False},
)


def cmd_ablate(cfg: dict) -> int:
    import csv

    from .data import load_split
    from .errors import NumericError
    from .eval import evaluate_all
    from .graph import build_graph
    from .model import propagate
    from .trainer import fit

    _require(cfg, "data", "out")
    split = load_split(cfg["data"])
    os.makedirs(cfg["out"], exist_ok=True)
    echo_config(cfg, cfg["out"])
    g = build_graph(split.train)
    rows = []
    for cell in ABLATION_CELLS:
        cell_cfg = dict(cfg, activation=cell["activation"], use_threshold=cell["use_threshold"])
        row = {"cell": cell["name"], "activation": cell["activation"],
               "use_threshold": cell["use_threshold"]}
        try:
            result = fit(split, _train_config_from(cell_cfg), _hyper_from(cell_cfg))
            trace = propagate(result.params, g)
            report = evaluate_all(result.params, trace, split, k=cfg["k"], target="test")
            row.update(status="ok", ndcg20=report.ndcg, recall20=report.recall)
        except NumericError as exc:
            row.update(status=f"failed: {exc}", ndcg20=None, recall20=None)
        rows.append(row)
        print(f"{row['cell']}: {row['status']} ndcg20={row['ndcg20']} recall20={row['recall20']}")
    _write_json(rows, os.path.join(cfg["out"], "ablation.json"))
    with open(os.path.join(cfg["out"], "ablation.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["cell", "activation", "use_threshold",
                                                "ndcg20", "recall20", "status"])
        writer.writeheader()
        writer.writerows(rows)
    return 0


def cmd_analyze(cfg: dict, checkpoints: list[str]) -> int:
    from . import analysis as amod
    from .data import load_split
    from .graph import build_graph
    from .model import load_checkpoint, propagate

    _require(cfg, "data", "out")
    if not checkpoints:
        raise OSError("analyze requires at least one checkpoint path")
    checkpoints = [os.path.abspath(p) for p in checkpoints]
    for path in checkpoints:
        if not os.path.exists(path):
            raise OSError(f"checkpoint not found: {path}")
    split = load_split(cfg["data"])
    g = build_graph(split.train)
    os.makedirs(cfg["out"], exist_ok=True)
    echo_config(cfg, cfg["out"])

    snapshots = []
    for epoch, path in enumerate(checkpoints, start=1):
        params = load_checkpoint(path)
        trace = propagate(params, g)
        snapshots.append(amod.RankSnapshot(epoch=epoch, ranks=amod.snapshot_ranks(trace, params)))

    if len(snapshots) == 1:
        rows = amod.degree_bucket_table(snapshots[0], g)
        out_path = os.path.join(cfg["out"], "beta_rank_by_degree.csv")
        amod.write_degree_csv(rows, out_path)
        print(f"wrote {out_path} ({len(rows)} rows)")
    else:
        rows = amod.trajectory_table(snapshots)
        out_path = os.path.join(cfg["out"], "beta_rank_trajectory.csv")
        amod.write_trajectory_csv(rows, out_path)
        print(f"wrote {out_path} ({len(rows)} rows)")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="topkgat",
                                     description="Top-K objective-driven graph attention recommender")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("prepare", "load raw TSV, k-core filter, split, write split files + manifest"),
        ("train", "train on a prepared split and evaluate the best checkpoint"),
        ("grid", "grid search over lr, weight decay and layer count"),
        ("evaluate", "evaluate a checkpoint on the validation or test split"),
        ("ablate", "train the four activation/threshold ablation cells"),
        ("analyze", "threshold-rank reports from checkpoints"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key=value config file")
        for key, (kind, _) in SCHEMA.items():
            flag = f"--{key.replace('_', '-')}"
            if kind == _BOOL:  # allow both `--flag` and `--flag false`
                p.add_argument(flag, dest=key, default=None, nargs="?", const="true",
                               metavar="V", help=argparse.SUPPRESS)
            else:
                p.add_argument(flag, dest=key, default=None, metavar="V",
                               help=argparse.SUPPRESS)
        if name == "analyze":
            p.add_argument("checkpoints", nargs="*", help="checkpoint file(s), training order")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    # configure threads before numpy is imported by the work modules
    try:
        cfg = resolve_config(args)
        _apply_thread_limits(cfg)
        from .errors import ConfigError, EvaluationError, NumericError, ParseError

        try:
            if args.command == "prepare":
                return cmd_prepare(cfg)
            if args.command == "train":
                return cmd_train(cfg)
            if args.command == "grid":
                return cmd_grid(cfg)
            if args.command == "evaluate":
                return cmd_evaluate(cfg)
            if args.command == "ablate":
                return cmd_ablate(cfg)
            if args.command == "analyze":
                return cmd_analyze(cfg, args.checkpoints)
            raise AssertionError(args.command)
        except (ParseError, ConfigError, OSError, json.JSONDecodeError, EvaluationError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        except NumericError as exc:
            print(f"numeric failure: {exc}", file=sys.stderr)
            return 3
    except ValueError as exc:  # config parsing outside ConfigError
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
