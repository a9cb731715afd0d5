"""Command-line harness for reproducible experiments.

Subcommands: crossval, train, evaluate, export-attention, synth.
Settings come from an optional JSON config file plus flag overrides
(flags win); every report embeds the fully resolved configuration.
Exit codes: 0 success, 2 config/validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import data as data_mod
from .bags import ContractError, DegenerateInputError, GraphConfig, GraphMode
from .data import FormatError, SyntheticSpec
from .linalg import ShapeError, new_rng
from .model import (ModelConfig, forward, load_checkpoint, save_checkpoint)
from .train import (StratificationError, TrainConfig, TrainingError,
                    _stratified_val_split, cross_validate, derived_seed,
                    metrics, predict_probs, train_one)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class ConfigError(ValueError):
    pass


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{p}: config must be a JSON object")
    return cfg


def _resolve(args, file_cfg: dict) -> dict:
    """Merge defaults, config-file sections, and CLI flags (flags win)."""
    model = dict(file_cfg.get("model", {}))
    train = dict(file_cfg.get("train", {}))
    graph = dict(file_cfg.get("graph", {}))
    run = {
        "dataset": file_cfg.get("dataset"),
        "out": file_cfg.get("out", "."),
    }
    flag_map = [
        ("dataset", run, "dataset"), ("out", run, "out"),
        ("graph_mode", graph, "mode"), ("threshold", graph, "threshold"),
        ("attention_dim", model, "attention_dim"),
        ("conv_dims", model, "conv_dims"),
        ("num_classes", model, "num_classes"),
        ("folds", train, "folds"), ("repeats", train, "repeats"),
        ("seed", train, "seed"), ("max_epochs", train, "max_epochs"),
        ("learning_rate", train, "learning_rate"),
        ("weight_decay", train, "weight_decay"),
        ("val_fraction", train, "val_fraction"),
        ("jobs", train, "n_jobs"),
    ]
    for flag, target, key in flag_map:
        value = getattr(args, flag, None)
        if value is not None:
            target[key] = value
    if getattr(args, "no_standardize", False):
        train["standardize"] = False
    return {"run": run, "model": model, "train": train, "graph": graph}


def _graph_config(graph: dict) -> GraphConfig:
    mode = graph.get("mode", "similarity")
    try:
        mode = GraphMode(mode)
    except ValueError:
        raise ConfigError(f"unknown graph mode: {mode!r}") from None
    return GraphConfig(mode=mode, threshold=float(graph.get("threshold", 0.5)))


def _model_config(model: dict, input_dim: int, graph_mode: GraphMode) -> ModelConfig:
    kwargs = dict(model)
    kwargs.setdefault("input_dim", input_dim)
    if graph_mode == GraphMode.NONE:
        kwargs.setdefault("conv_uses_graph", False)
        kwargs.setdefault("attention_uses_graph", False)
    try:
        return ModelConfig(**kwargs)
    except (TypeError, ShapeError) as exc:
        raise ConfigError(f"invalid model config: {exc}") from exc


def _train_config(train: dict) -> TrainConfig:
    try:
        return TrainConfig(**train)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train config: {exc}") from exc


def _load_dataset(resolved: dict, require_grid_for_spatial: bool = True):
    path = resolved["run"].get("dataset")
    if not path:
        raise ConfigError("no dataset given (--dataset or config key 'dataset')")
    if not Path(path).exists():
        raise ConfigError(f"dataset not found: {path}")
    bags, manifest = data_mod.load_bag_csv(path)
    graph_cfg = _graph_config(resolved["graph"])
    if (require_grid_for_spatial and graph_cfg.mode == GraphMode.SPATIAL
            and not manifest.has_grid):
        raise ConfigError("graph mode 'spatial' requires a gridded dataset")
    return bags, manifest, graph_cfg


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n",
                    encoding="utf-8")


def cmd_crossval(args) -> int:
    resolved = _resolve(args, _load_config_file(args.config))
    bags, manifest, graph_cfg = _load_dataset(resolved)
    model_cfg = _model_config(resolved["model"], manifest.feature_dim,
                              graph_cfg.mode)
    train_cfg = _train_config(resolved["train"])
    if train_cfg.folds > len(bags):
        raise ConfigError(f"folds ({train_cfg.folds}) exceed bag count ({len(bags)})")

    reports, aggregate = cross_validate(bags, model_cfg, train_cfg, graph_cfg)

    out = Path(resolved["run"]["out"])
    full_cfg = {
        "dataset": manifest.to_dict(),
        "graph": {"mode": graph_cfg.mode.value, "threshold": graph_cfg.threshold},
        "model": model_cfg.to_dict(),
        "train": asdict(train_cfg),
    }
    _write_json(out / "report.json", {
        "config": full_cfg,
        "folds": [r.to_dict() for r in reports],
        "aggregate": aggregate,
    })
    lines = [f"dataset: {manifest.name} "
             f"({manifest.num_bags} bags, {manifest.num_instances} instances)",
             f"graph: {graph_cfg.mode.value} (threshold {graph_cfg.threshold})",
             f"{train_cfg.folds}-fold CV x {train_cfg.repeats} repeats, "
             f"seed {train_cfg.seed}", ""]
    lines.append(f"{'metric':<12}{'mean':>10}{'stderr(folds)':>16}{'stderr(repeats)':>18}")
    for name, stats in aggregate["per_fold"].items():
        rep = aggregate["per_repeat_mean"][name]
        lines.append(f"{name:<12}{stats['mean']:>10.4f}{stats['stderr']:>16.4f}"
                     f"{rep['stderr']:>18.4f}")
    (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return EXIT_OK


def cmd_train(args) -> int:
    resolved = _resolve(args, _load_config_file(args.config))
    bags, manifest, graph_cfg = _load_dataset(resolved)
    model_cfg = _model_config(resolved["model"], manifest.feature_dim,
                              graph_cfg.mode)
    train_cfg = _train_config(resolved["train"])

    rng = new_rng(derived_seed(train_cfg.seed, 0, 0, 1))
    train_bags, val_bags = _stratified_val_split(
        list(bags), train_cfg.val_fraction, rng)
    standardizer = None
    if train_cfg.standardize:
        standardizer = data_mod.fit_standardizer(train_bags)
        train_bags = data_mod.apply_standardizer(train_bags, *standardizer)
        val_bags = data_mod.apply_standardizer(val_bags, *standardizer)

    params, history = train_one(
        train_bags, val_bags, model_cfg, train_cfg, graph_cfg,
        new_rng(derived_seed(train_cfg.seed, 0, 0, 2)))

    out = Path(resolved["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.bin", model_cfg, params,
                    standardizer=standardizer,
                    metadata={"graph": {"mode": graph_cfg.mode.value,
                                        "threshold": graph_cfg.threshold},
                              "train": asdict(train_cfg),
                              "dataset": manifest.to_dict()})
    _write_json(out / "history.json", {"history": history})
    best = min(h["val_loss"] for h in history)
    print(f"trained {len(history)} epochs; best val loss {best:.6f}; "
          f"checkpoint at {out / 'checkpoint.bin'}")
    return EXIT_OK


def _load_checkpoint_arg(args):
    path = Path(args.checkpoint)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_evaluate(args) -> int:
    resolved = _resolve(args, _load_config_file(args.config))
    model_cfg, params, standardizer, metadata = _load_checkpoint_arg(args)
    graph_meta = metadata.get("graph", {})
    if resolved["graph"]:
        graph_meta = {**graph_meta, **resolved["graph"]}
    graph_cfg = _graph_config(graph_meta)
    bags, manifest, _ = _load_dataset(resolved)
    if manifest.feature_dim != model_cfg.input_dim:
        raise ConfigError(
            f"dataset dim {manifest.feature_dim} != checkpoint input_dim "
            f"{model_cfg.input_dim}")
    if standardizer is not None:
        bags = data_mod.apply_standardizer(bags, *standardizer)

    probs = [float(p[1]) for p in predict_probs(bags, params, model_cfg, graph_cfg)]
    mset = metrics(list(zip(probs, [b.label for b in bags])))
    out = Path(resolved["run"]["out"])
    _write_json(out / "metrics.json", {
        "dataset": manifest.to_dict(),
        "metrics": mset.to_dict(),
    })
    for name, value in mset.to_dict().items():
        print(f"{name:<12}{'n/a' if value is None else f'{value:.4f}'}")
    return EXIT_OK


def cmd_export_attention(args) -> int:
    resolved = _resolve(args, _load_config_file(args.config))
    model_cfg, params, standardizer, metadata = _load_checkpoint_arg(args)
    graph_meta = metadata.get("graph", {})
    if resolved["graph"]:
        graph_meta = {**graph_meta, **resolved["graph"]}
    graph_cfg = _graph_config(graph_meta)
    bags, manifest, _ = _load_dataset(resolved)
    if manifest.feature_dim != model_cfg.input_dim:
        raise ConfigError(
            f"dataset dim {manifest.feature_dim} != checkpoint input_dim "
            f"{model_cfg.input_dim}")
    raw_bags = bags
    if standardizer is not None:
        bags = data_mod.apply_standardizer(bags, *standardizer)

    out = Path(resolved["run"]["out"])
    out_path = out / "attention.csv" if not out.suffix else out
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with out_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bag_id", "instance_index", "row", "col", "alpha"])
        for bag, raw in zip(bags, raw_bags):
            graph = graph_cfg.build(bag)
            trace = forward(bag, graph, params, model_cfg)
            for k, inst in enumerate(raw.instances):
                row = inst.grid_pos[0] if inst.grid_pos else ""
                col = inst.grid_pos[1] if inst.grid_pos else ""
                writer.writerow([bag.id, k, row, col, repr(float(trace.alpha[k]))])
    print(f"wrote {out_path}")
    return EXIT_OK


def cmd_synth(args) -> int:
    file_cfg = _load_config_file(args.config)
    spec_kwargs = dict(file_cfg.get("synth", {}))
    for flag, key in [("num_bags", "num_bags"), ("feature_dim", "feature_dim"),
                      ("positive_fraction", "positive_fraction"),
                      ("seed", "seed")]:
        value = getattr(args, flag, None)
        if value is not None:
            spec_kwargs[key] = value
    if "bag_size_range" in spec_kwargs:
        spec_kwargs["bag_size_range"] = tuple(spec_kwargs["bag_size_range"])
    try:
        spec = SyntheticSpec(**spec_kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid synthetic spec: {exc}") from exc
    bags = data_mod.generate_synthetic(spec)
    out = Path(args.out if args.out else "synthetic.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    data_mod.write_bag_csv(out, bags)
    print(f"wrote {len(bags)} bags to {out}")
    return EXIT_OK


def _int_list(text: str):
    return tuple(int(x) for x in text.split(","))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="milgraph",
        description="Graph-based multi-instance learning experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--dataset", help="canonical bag CSV")
        p.add_argument("--graph-mode", dest="graph_mode",
                       choices=[m.value for m in GraphMode])
        p.add_argument("--threshold", type=float)
        p.add_argument("--attention-dim", dest="attention_dim", type=int)
        p.add_argument("--conv-dims", dest="conv_dims", type=_int_list,
                       help="comma-separated conv layer widths")
        p.add_argument("--num-classes", dest="num_classes", type=int)
        p.add_argument("--folds", type=int)
        p.add_argument("--repeats", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--max-epochs", dest="max_epochs", type=int)
        p.add_argument("--learning-rate", dest="learning_rate", type=float)
        p.add_argument("--weight-decay", dest="weight_decay", type=float)
        p.add_argument("--val-fraction", dest="val_fraction", type=float)
        p.add_argument("--jobs", type=int, help="parallel fold workers")
        p.add_argument("--no-standardize", action="store_true")
        p.add_argument("--out", help="output directory (or file for exports)")

    p = sub.add_parser("crossval", help="k-fold cross-validation report")
    common(p)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("train", help="train one model with a validation split")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics of a checkpoint on a dataset")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-attention",
                       help="per-instance attention weights as CSV")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_export_attention)

    p = sub.add_parser("synth", help="generate a synthetic dataset CSV")
    p.add_argument("--config", help="JSON config file (section 'synth')")
    p.add_argument("--num-bags", dest="num_bags", type=int)
    p.add_argument("--feature-dim", dest="feature_dim", type=int)
    p.add_argument("--positive-fraction", dest="positive_fraction", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output CSV path")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FormatError, ContractError, ShapeError,
            DegenerateInputError, StratificationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
