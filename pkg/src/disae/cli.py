"""Command-line entry point.

Subcommands cover the whole pipeline: ``gen-data`` (standard datasets to
CSV), ``train`` (single model to a checkpoint), ``score`` (selection score of
a checkpoint), ``eval`` (cross-validated model comparison producing the
scores/variation/probe tables), ``sweep`` (hyperparameter grid), ``robustness``
(source-diversity grid), and ``export-latent``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every subcommand writes a ``run_manifest.json`` with the resolved
configuration and seeds. ``DISAE_OUTPUT_ROOT`` sets the default output root.
"""

import argparse
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import harness
from .data import DataError, load_dataset, normalize, save_dataset
from .metrics import JSD, W2, MetricError, data_variation, selection_score
from .model import (
    CheckpointError,
    DisAEConfig,
    TrainingDiverged,
    load_checkpoint,
    make_vanilla_ae,
    save_checkpoint,
    train_fold,
)
from .synth import GenerationError, generate_standard, standard_names
from .util import default_output_root, derive_seed, load_json, write_csv, write_manifest


class UsageError(Exception):
    """Configuration or argument problems; maps to exit code 2."""


_CONFIG_KEYS = set(DisAEConfig.__dataclass_fields__)


def _model_config(args, input_width: int) -> DisAEConfig:
    overrides = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        overrides.update(load_json(path))
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    unknown = set(overrides) - _CONFIG_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}; valid keys: {sorted(_CONFIG_KEYS)}")
    overrides.setdefault("encoder_widths", (input_width, 32, 16, 8))
    for key in ("encoder_widths", "task_head_hidden", "domain_head_hidden"):
        if key in overrides and overrides[key] is not None:
            overrides[key] = tuple(overrides[key])
    if args.seed is not None:
        overrides["seed"] = args.seed
    config = DisAEConfig(**overrides)
    if config.encoder_widths[0] != input_width:
        raise UsageError(
            f"encoder input width {config.encoder_widths[0]} != dataset width {input_width}")
    return config


def _resolve_data(args):
    try:
        return harness.resolve_dataset(args.data, args.seed if args.seed is not None else 0,
                                       getattr(args, "scale", None))
    except FileNotFoundError as err:
        raise UsageError(str(err)) from err


def _out_dir(args, default_name: str) -> Path:
    out = Path(args.out) if args.out else default_output_root() / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_instances(text) -> tuple:
    if text is None:
        return ()
    return tuple(int(x) for x in str(text).split(",") if x != "")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = _out_dir(args, f"data-{args.name}")
    try:
        dataset = generate_standard(args.name, args.seed, scale=args.scale)
    except GenerationError as err:
        raise UsageError(str(err)) from err
    path = save_dataset(dataset, out / f"{args.name}.csv")
    write_manifest(out, "gen-data",
                   {"name": args.name, "scale": args.scale, "rows": dataset.n_samples},
                   {"seed": args.seed})
    print(f"wrote {path} ({dataset.n_samples} rows, {dataset.n_features} features, "
          f"{dataset.n_tasks} tasks, {dataset.n_domains} domains)")
    return 0


def cmd_train(args) -> int:
    dataset = _resolve_data(args)
    out = _out_dir(args, "train")
    seed = args.seed if args.seed is not None else 0
    config = _model_config(args, dataset.n_features)
    if args.vanilla:
        config = make_vanilla_ae(config)
    source = _parse_instances(args.source_instances)
    if source and dataset.n_domains:
        view, _ = harness.source_view(dataset, 0, source)
    else:
        view = dataset
    view, stats = normalize(view)
    from .data import make_folds
    plan = make_folds(view, max(2, args.folds), derive_seed(seed, "folds"))
    try:
        result = train_fold(view, plan, args.fold, config)
    except TrainingDiverged as err:
        print(f"training diverged: {err}", file=sys.stderr)
        return 1
    path = save_checkpoint(result.model, out / "model.ckpt", history=result.history)
    write_manifest(out, "train",
                   {"data": str(args.data), "vanilla": bool(args.vanilla),
                    "config": asdict(config), "fold": args.fold,
                    "source_instances": list(source)},
                   {"seed": seed})
    best = result.history["best_epoch"]
    print(f"wrote {path} (best epoch {best}, "
          f"final val loss {result.history['val_total'][-1]:.4f})")
    return 0


def _load_ckpt(path):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"checkpoint not found: {p}")
    return load_checkpoint(p)


def cmd_score(args) -> int:
    model, _ = _load_ckpt(args.checkpoint)
    dataset = _resolve_data(args)
    if model.norm_stats is not None:
        dataset, _ = normalize(dataset, model.norm_stats)
    else:
        dataset, _ = normalize(dataset)
    labels = dataset.domain_level_labels()
    seed = args.seed if args.seed is not None else 0
    raw = data_variation(dataset.features, dataset.task_labels, labels,
                         seed=derive_seed(seed, "rawvar"))
    report = selection_score(model, dataset.features, dataset.task_labels, labels,
                             raw.v_sup, seed=derive_seed(seed, "scorevar"))
    out = _out_dir(args, "score")
    write_csv(out / "score.csv",
              ["acc_term", "var_term", "rec_term", "score"], [report.as_dict()])
    write_manifest(out, "score", {"checkpoint": str(args.checkpoint),
                                  "data": str(args.data)}, {"seed": seed})
    print(f"acc_term={report.acc_term:.4f} var_term={report.var_term:.4f} "
          f"rec_term={report.rec_term:.4f} score={report.score:.4f}")
    return 0


def cmd_eval(args) -> int:
    dataset_name = args.data
    seed = args.seed if args.seed is not None else 0
    probe_dataset = _resolve_data(args)
    config = _model_config(args, probe_dataset.n_features)
    source = _parse_instances(args.source_instances) or (0, 1)
    targets = _parse_instances(args.target_instances)
    if not targets and probe_dataset.n_domains:
        col = probe_dataset.domain_labels[:, 0].astype(np.int64)
        targets = tuple(sorted(set(np.unique(col).tolist()) - set(source)))
    models = {"disae": config, "vanilla": make_vanilla_ae(config)}
    plan = harness.ExperimentPlan(
        dataset=str(dataset_name), models=models, source_instances=source,
        target_instances=targets, folds=args.folds, repeats=args.repeats,
        master_seed=seed, dataset_scale=getattr(args, "scale", None))
    out = _out_dir(args, "eval")
    result = harness.run_experiment(plan, out_dir=out, workers=args.workers)
    for row in result.score_rows:
        if row["fold"] == "mean":
            print(f"{row['model']}: score={row['score']:.4f} "
                  f"(acc={row['acc_term']:.4f} var={row['var_term']:.4f} "
                  f"rec={row['rec_term']:.4f})")
    print(f"wrote {out / 'scores.csv'}, variation.csv, probe.csv")
    return 0


def cmd_sweep(args) -> int:
    seed = args.seed if args.seed is not None else 0
    dataset = _resolve_data(args)
    config = _model_config(args, dataset.n_features)
    if not args.grid:
        raise UsageError("--grid JSON file required")
    grid_path = Path(args.grid)
    if not grid_path.exists():
        raise UsageError(f"grid file not found: {grid_path}")
    raw = load_json(grid_path)
    known = {"recon_weights", "task_weights", "adversary_weights", "l2s", "lrs"}
    unknown = set(raw) - known
    if unknown:
        raise UsageError(f"unknown grid keys: {sorted(unknown)}")
    grid = harness.SweepGrid(**{k: tuple(v) for k, v in raw.items()})
    source = _parse_instances(args.source_instances) or (0, 1)
    targets = _parse_instances(args.target_instances)
    plan = harness.ExperimentPlan(
        dataset=str(args.data), models={}, source_instances=source,
        target_instances=targets, folds=args.folds, repeats=args.repeats,
        master_seed=seed, dataset_scale=getattr(args, "scale", None))
    out = _out_dir(args, "sweep")
    rows = harness.sweep(plan, grid, config, out_dir=out, workers=args.workers)
    print(f"best: {rows[0]['config']} mean_score={rows[0]['mean_score']:.4f}")
    print(f"wrote {out / 'sweep.csv'}")
    return 0


def cmd_robustness(args) -> int:
    seed = args.seed if args.seed is not None else 0
    dataset = _resolve_data(args)
    config = _model_config(args, dataset.n_features)
    counts = _parse_instances(args.source_counts) or (2, 5, 10, 20, 35, 50)
    models = {"disae": config, "vanilla": make_vanilla_ae(config)}
    out = _out_dir(args, "robustness")
    rows = harness.robustness_study(dataset, counts, models, master_seed=seed,
                                    repeats=args.repeats, out_dir=out,
                                    workers=args.workers)
    ok = sum(1 for r in rows if r["status"] == "ok")
    print(f"wrote {out / 'robustness.csv'} ({ok}/{len(rows)} cells ok)")
    return 0


def cmd_export_latent(args) -> int:
    model, _ = _load_ckpt(args.checkpoint)
    dataset = _resolve_data(args)
    if model.norm_stats is not None:
        dataset, _ = normalize(dataset, model.norm_stats)
    else:
        dataset, _ = normalize(dataset)
    z = model.encode(dataset.features)
    out = _out_dir(args, "latent")
    fields = [f"z{i}" for i in range(z.shape[1])]
    fields += [f"task:{s.name}" for s in dataset.task_specs]
    fields += [f"domain:{s.name}" for s in dataset.domain_specs]
    rows = []
    for i in range(z.shape[0]):
        row = {f"z{j}": z[i, j] for j in range(z.shape[1])}
        for j, s in enumerate(dataset.task_specs):
            row[f"task:{s.name}"] = int(dataset.task_labels[i, j])
        for j, s in enumerate(dataset.domain_specs):
            v = dataset.domain_labels[i, j]
            row[f"domain:{s.name}"] = int(v) if s.kind == "categorical" else v
        rows.append(row)
    write_csv(out / "latent.csv", fields, rows)
    write_manifest(out, "export-latent",
                   {"checkpoint": str(args.checkpoint), "data": str(args.data)},
                   {"seed": args.seed or 0})
    print(f"wrote {out / 'latent.csv'} ({z.shape[0]} x {z.shape[1]})")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(p, data=True):
    if data:
        p.add_argument("--data", required=True,
                       help=f"dataset path or standard name {standard_names()}")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="output directory")


def _add_model_opts(p):
    p.add_argument("--config", default=None, help="model config JSON file")
    p.add_argument("--set", action="append", default=[],
                   help="override a config key, e.g. --set adversary_weight=0.5")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="disae",
                                     description="disentangled autoencoder toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a standard dataset to CSV")
    p.add_argument("name", help=f"one of {standard_names()}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", default=None,
                   help="sample-count override; 'full' selects the full many-affines size")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train one model to a checkpoint")
    _add_common(p)
    _add_model_opts(p)
    p.add_argument("--vanilla", action="store_true", help="drop all heads (plain autoencoder)")
    p.add_argument("--source-instances", default=None,
                   help="comma list of shift-domain instances to train on (default: all)")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--scale", default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("score", help="selection score of a checkpoint on a dataset")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("eval", help="cross-validated model comparison (scores/variation/probe tables)")
    _add_common(p)
    _add_model_opts(p)
    p.add_argument("--source-instances", default="0,1")
    p.add_argument("--target-instances", default=None)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--scale", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="hyperparameter grid ranked by selection score")
    _add_common(p)
    _add_model_opts(p)
    p.add_argument("--grid", required=True, help="JSON file with candidate lists")
    p.add_argument("--source-instances", default="0,1")
    p.add_argument("--target-instances", default=None)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--scale", default=None)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("robustness", help="source-diversity robustness grid")
    _add_common(p)
    _add_model_opts(p)
    p.add_argument("--source-counts", default=None, help="comma list, default 2,5,10,20,35,50")
    p.add_argument("--repeats", type=int, default=2)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--scale", default=None)
    p.set_defaults(fn=cmd_robustness)

    p = sub.add_parser("export-latent", help="encode a dataset and dump the latent CSV")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_export_latent)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return int(err.code or 0)
    try:
        return args.fn(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (DataError, GenerationError, MetricError, CheckpointError,
            harness.ExperimentError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
