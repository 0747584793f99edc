"""Command-line surface: generate, train, score, evaluate, grid, prop-test.

Every command requires an explicit --seed when it consumes randomness,
refuses to overwrite outputs without --force, and writes a resolved
run-config file next to each output so the run can be replayed exactly.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import datagen as dg
from . import experiments as ex
from . import metrics as mt
from . import runconfig
from .autodiff import NumericError, ShapeError
from .errors import ConfigError, DataError
from .estimator import batch_conformance
from .model import PipelineConfig, load_checkpoint, preset, save_checkpoint
from .training import history_to_csv

PRESET_NAMES = ("prop", "sine", "mrsi")


def _check_out(path: str, force: bool) -> None:
    if os.path.exists(path) and not force:
        raise ConfigError(f"refusing to overwrite {path}; pass --force to allow")


def _write_text(path: str, text: str, force: bool) -> None:
    _check_out(path, force)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _write_runconfig(out_path: str, tree: dict, force: bool) -> None:
    _write_text(out_path + ".runconfig", runconfig.dumps(tree), force)


def _load_pipeline_config(spec: str | None, seed: int) -> PipelineConfig:
    if spec is None:
        raise ConfigError("--config is required (preset name or config file)")
    if spec in PRESET_NAMES:
        return preset(spec, seed=seed)
    if not os.path.exists(spec):
        raise DataError(f"config file not found: {spec}")
    with open(spec, encoding="utf-8") as fh:
        cfg = PipelineConfig.from_text(fh.read())
    return cfg.with_overrides(seed=seed)


def _load_dataset(path: str):
    if not os.path.exists(path):
        raise DataError(f"dataset file not found: {path}")
    return dg.load_dataset(path)


def _sine_config_from_file(path: str | None) -> tuple[str, dg.SineConfig]:
    """(kind, sine config) from an optional generation config file."""
    if path is None:
        return "sine", dg.SineConfig()
    if not os.path.exists(path):
        raise DataError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        tree = runconfig.loads(fh.read())
    kind = tree.get("kind", "sine")
    if kind == "prop":
        return "prop", dg.SineConfig()
    if kind != "sine":
        raise ConfigError(f"unknown dataset kind {kind!r}")
    if "sine" in tree:
        return "sine", dg._config_from_tree(tree["sine"])
    return "sine", dg.SineConfig()


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    if args.count < 1:
        raise ConfigError(f"--count must be >= 1, got {args.count}")
    kind, sine_cfg = _sine_config_from_file(args.config)
    _check_out(args.out, args.force)
    if kind == "prop":
        data = dg.gen_prop_dataset(args.count, seed=args.seed).astype(np.float32)
        dg.save_prop_dataset(args.out, dg.PropDataset(data=data, seed=args.seed))
        tree = {"command": "generate", "kind": "prop",
                "seed": args.seed, "count": args.count}
    else:
        mode = args.with_changepoints
        items = list(dg.gen_dataset(args.count, seed=args.seed,
                                    changepoints=mode, config=sine_cfg))
        ds = dg.Dataset(items=items, config=sine_cfg, seed=args.seed,
                        changepoints=mode)
        dg.save_dataset(args.out, ds)
        tree = {"command": "generate", "kind": "sine", "seed": args.seed,
                "count": args.count, "changepoints": mode,
                "labels_anomalous": int(sum(it.is_anomalous for it in items))}
    _write_runconfig(args.out, tree, args.force)
    print(f"wrote {args.count} items to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_pipeline_config(args.config, args.seed)
    overrides = {}
    if args.warmup_iters is not None:
        overrides["warmup_iters"] = args.warmup_iters
    if args.max_iters is not None:
        overrides["max_iters"] = args.max_iters
    if overrides:
        cfg = cfg.with_overrides(**overrides)
    train_arr = _load_dataset(args.train_data).to_array()
    val_arr = _load_dataset(args.val_data).to_array()
    _check_out(args.out, args.force)
    history_path = args.out + ".history.csv"
    _check_out(history_path, args.force)

    from .model import build_pipeline
    from .training import train as run_train

    model = build_pipeline(cfg)
    result = run_train(model, train_arr, val_arr)
    save_checkpoint(model, args.out)
    _write_text(history_path, history_to_csv(result.history), args.force)
    _write_runconfig(args.out, {"command": "train", "seed": args.seed,
                                "pipeline": cfg.to_tree()}, args.force)
    print(f"trained {model.train_iterations} iterations; "
          f"best validation loss {result.best_val_loss:.6g}; wrote {args.out}")
    return 0


SCORE_COLUMNS = ("index", "label", "p_sequence", "mean_log_likelihood")


def cmd_score(args) -> int:
    if not os.path.exists(args.ckpt):
        raise DataError(f"checkpoint file not found: {args.ckpt}")
    model = load_checkpoint(args.ckpt)
    ds = _load_dataset(args.data)
    arr = ds.to_array()
    if isinstance(ds, dg.Dataset):
        labels = [int(it.is_anomalous) for it in ds.items]
    else:
        labels = [0] * len(arr)
    p_seq, mean_ll = batch_conformance(model, arr)
    lines = [",".join(SCORE_COLUMNS)]
    for i, (lab, p, ll) in enumerate(zip(labels, p_seq, mean_ll)):
        lines.append(f"{i},{lab},{p:.12g},{ll:.12g}")
    _write_text(args.out, "\n".join(lines) + "\n", args.force)
    _write_runconfig(args.out, {"command": "score", "checkpoint": args.ckpt,
                                "data": args.data, "count": len(arr)}, args.force)
    print(f"scored {len(arr)} items to {args.out}")
    return 0


def _read_scores_csv(path: str):
    if not os.path.exists(path):
        raise DataError(f"scores file not found: {path}")
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        if "label" not in fields or "p_sequence" not in fields:
            raise DataError(f"{path}: need 'label' and 'p_sequence' columns, "
                            f"got {fields}")
        labels, scores = [], []
        for row in reader:
            labels.append(bool(int(row["label"])))
            scores.append(float(row["p_sequence"]))
    if not scores:
        raise DataError(f"{path}: no score rows")
    return np.array(scores), np.array(labels)


def cmd_evaluate(args) -> int:
    scores, labels = _read_scores_csv(args.scores)
    if args.threshold == "auto":
        alpha = mt.select_threshold_max_f1(scores, labels)
    else:
        try:
            alpha = float(args.threshold)
        except ValueError:
            raise ConfigError(f"--threshold must be 'auto' or a number, "
                              f"got {args.threshold!r}") from None
    counts = mt.confusion(scores, labels, alpha)
    roc = mt.roc_auc(scores, labels)
    pr = mt.pr_auc(scores, labels)
    _write_text(args.out, mt.metrics_to_json(counts, roc, pr, alpha), args.force)
    _write_runconfig(args.out, {"command": "evaluate", "scores": args.scores,
                                "threshold": str(args.threshold)}, args.force)
    print(f"evaluated {counts.total} items; ROC AUC {roc:.4f}; wrote {args.out}")
    return 0


def cmd_grid(args) -> int:
    if args.resolution <= 0:
        raise ConfigError(f"--resolution must be > 0, got {args.resolution}")
    if not os.path.exists(args.ckpt):
        raise DataError(f"checkpoint file not found: {args.ckpt}")
    model = load_checkpoint(args.ckpt)
    rows = ex.grid_scores(model, args.resolution, args.reps, args.seed)
    _write_text(args.out, ex.grid_rows_to_csv(rows), args.force)
    _write_runconfig(args.out, {"command": "grid", "seed": args.seed,
                                "resolution": args.resolution,
                                "reps": args.reps}, args.force)
    print(f"wrote {len(rows)} grid cells to {args.out}")
    return 0


def cmd_prop_test(args) -> int:
    if args.count < 1:
        raise ConfigError(f"--count must be >= 1, got {args.count}")
    _check_out(args.out, args.force)
    kwargs = {}
    if args.warmup_iters is not None:
        kwargs["warmup_iters"] = args.warmup_iters
    if args.max_iters is not None:
        kwargs["max_iters"] = args.max_iters
    all_rows = []
    for run in range(args.count):
        rows, _ = ex.run_prop_experiment(seed=args.seed + run, **kwargs)
        all_rows.append(rows)
    summary = ex.prop_summary_rows(all_rows)
    _write_text(args.out, ex.prop_rows_to_csv(summary), args.force)
    _write_runconfig(args.out, {"command": "prop-test", "seed": args.seed,
                                "runs": args.count}, args.force)
    for row in summary:
        print(f"x1={row['x1']:g}: mu_hat={row['mu_hat_mean']:.3f} "
              f"sigma_hat={row['sigma_hat_mean']:.3f}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ppc",
        description="Anomalous change point detection via probabilistic "
                    "predictive coding",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, seed=True):
        p.add_argument("--out", required=True, help="output path")
        p.add_argument("--force", action="store_true",
                       help="overwrite existing outputs")
        if seed:
            p.add_argument("--seed", type=int, required=True,
                           help="base random seed (required; no implicit default)")

    p = sub.add_parser("generate", help="write a synthetic dataset file")
    p.add_argument("--config", help="optional generation config file")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--with-changepoints", choices=dg.CHANGEPOINT_MODES,
                   default="none", dest="with_changepoints")
    add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on dataset files")
    p.add_argument("--config", required=True,
                   help="preset name (prop|sine|mrsi) or pipeline config file")
    p.add_argument("--train-data", required=True)
    p.add_argument("--val-data", required=True)
    p.add_argument("--warmup-iters", type=int)
    p.add_argument("--max-iters", type=int)
    add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score a dataset with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    add_common(p, seed=False)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("evaluate", help="metrics JSON from a scores CSV")
    p.add_argument("--scores", required=True)
    p.add_argument("--threshold", default="auto",
                   help="'auto' (max F1) or a fixed p-value cut")
    add_common(p, seed=False)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grid", help="average conformance per frequency pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--resolution", type=float, required=True)
    p.add_argument("--reps", type=int, default=3)
    add_common(p)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("prop-test", help="run the proportionality experiment")
    p.add_argument("--count", type=int, default=1, help="number of repeated runs")
    p.add_argument("--warmup-iters", type=int)
    p.add_argument("--max-iters", type=int)
    add_common(p)
    p.set_defaults(func=cmd_prop_test)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ShapeError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
