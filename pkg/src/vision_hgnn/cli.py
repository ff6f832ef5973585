"""Command-line entry point: ``vhgnn train | eval | predict | gradcheck | inspect``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
Settings resolve as built-in defaults < ``--config`` TOML file < flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import CheckpointError, ConfigError, DataError, DimensionError
from .ingest import Micrograph, decode_image, load_dataset, preprocess, preprocess_all, worker_count
from .model import VARIANTS, VisionHgNN, VisionHgNNConfig, init_parameters, rank_classes, sample_hypergraph
from .training import TrainConfig, assemble_split, evaluate, kfold_split, train

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger("vision_hgnn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS_FILE = Path(__file__).with_name("configs") / "defaults.toml"

TRAIN_ARTIFACTS = ("model.ckpt", "history.csv", "report.json")

# flag dest -> (section, field)
MODEL_FLAGS = {
    "d": "d", "patch_size": "patch_size", "image_size": "image_size", "k": "k", "replicas": "replicas",
    "hgat_layers": "hgat_layers", "hgt_layers": "hgt_layers", "heads": "heads", "dropout": "dropout",
    "metric": "metric", "readout": "readout", "virtual_node": "virtual_node", "precision": "precision",
    "clamp_k": "clamp_k",
}
TRAIN_FLAGS = {
    "epochs": "epochs", "batch_size": "batch_size", "lr": "lr", "scheduler_patience": "scheduler_patience",
    "early_stop_patience": "early_stop_patience", "folds": "folds", "fold": "fold",
}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    model: VisionHgNNConfig = field(default_factory=VisionHgNNConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    variant: str = "full"
    data: str | None = None
    out: str | None = None


def read_config_file(path) -> dict[str, Any]:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as exc:
        raise UsageError(f"config file {path} not found") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}") from exc


def resolve_config(file_values: Mapping[str, Any] | None, flags: Mapping[str, Any]) -> RunConfig:
    """Merge defaults, then file sections [model]/[train]/[run], then non-None flags."""
    file_values = dict(file_values or {})
    unknown = sorted(set(file_values) - {"model", "train", "run"})
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
    model = {**file_values.get("model", {})}
    train_vals = {**file_values.get("train", {})}
    run = {**file_values.get("run", {})}
    for dest, name in MODEL_FLAGS.items():
        if flags.get(dest) is not None:
            model[name] = flags[dest]
    for dest, name in TRAIN_FLAGS.items():
        if flags.get(dest) is not None:
            train_vals[name] = flags[dest]
    if flags.get("seed") is not None:
        model["seed"] = train_vals["seed"] = flags["seed"]
    elif "seed" in train_vals and "seed" not in model:
        model["seed"] = train_vals["seed"]
    for key in ("variant", "data", "out"):
        if flags.get(key) is not None:
            run[key] = flags[key]
    unknown = sorted(set(run) - {"variant", "data", "out"})
    if unknown:
        raise ConfigError(f"unknown [run] keys: {', '.join(unknown)}")
    variant = run.get("variant", "full")
    model_cfg = VisionHgNNConfig.from_dict(model).with_variant(variant)
    return RunConfig(model_cfg, TrainConfig.from_dict(train_vals), variant, run.get("data"), run.get("out"))


def _config_from_args(args) -> RunConfig:
    file_values = read_config_file(args.config) if getattr(args, "config", None) else None
    return resolve_config(file_values, vars(args))


def _refuse_overwrite(paths, force: bool) -> None:
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise UsageError(f"refusing to overwrite {', '.join(existing)}; pass --force")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _train_one(job) -> dict:
    model_cfg, train_cfg, patches, labels, split, class_names, out_dir = job
    model = VisionHgNN.create(model_cfg.validate(), class_names)
    result = train(model, patches, labels, split, train_cfg)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result.model.save(out_dir / "model.ckpt")
    result.write_history(out_dir / "history.csv")
    report = result.test_report
    (out_dir / "report.json").write_text(report.to_json() + "\n")
    (out_dir / "report.txt").write_text(report.to_table() + "\n")
    return {"seed": train_cfg.seed, "best_epoch": result.best_epoch, "report": report.to_dict()}


def _summarize(runs: list[dict]) -> dict:
    metrics = {}
    for key in ("1", "2", "3", "5"):
        vals = [r["report"]["top_n"][key] for r in runs]
        metrics[f"top_{key}"] = (float(np.mean(vals)), float(np.std(vals)))
    for key in ("macro_precision", "macro_recall", "macro_f1"):
        vals = [r["report"][key] for r in runs]
        metrics[key] = (float(np.mean(vals)), float(np.std(vals)))
    return {"seeds": [r["seed"] for r in runs], "mean_std": metrics, "runs": runs}


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    if not cfg.data:
        raise UsageError("train needs --data")
    out = Path(cfg.out or "runs/latest")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.train.seed]
    targets = [out / name for name in TRAIN_ARTIFACTS] if len(seeds) == 1 else [out / "summary.json"]
    _refuse_overwrite(targets, args.force)
    cfg.train.validate()

    micrographs, class_names = load_dataset(cfg.data)
    model_cfg = dataclasses.replace(cfg.model, num_classes=len(class_names)).validate()
    patches = preprocess_all(micrographs, model_cfg.image_size, model_cfg.patch_size, model_cfg.dtype)
    labels = np.array([m.label_index for m in micrographs])
    split = assemble_split(kfold_split(len(labels), cfg.train.folds, cfg.train.seed), cfg.train.fold)
    print(f"{len(labels)} images, {len(class_names)} classes; split train/val/test = "
          f"{len(split[0])}/{len(split[1])}/{len(split[2])}; variant {cfg.variant}")

    jobs = []
    for seed in seeds:
        target = out if len(seeds) == 1 else out / f"seed_{seed}"
        jobs.append((
            dataclasses.replace(model_cfg, seed=seed),
            dataclasses.replace(cfg.train, seed=seed),
            patches, labels, split, class_names, target,
        ))
    if args.parallel and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(len(jobs), worker_count())) as pool:
            runs = list(pool.map(_train_one, jobs))
    else:
        runs = [_train_one(job) for job in jobs]

    for run in runs:
        top = run["report"]["top_n"]
        print(f"seed {run['seed']}: best epoch {run['best_epoch']}, test top-1 {top['1']:.4f} top-5 {top['5']:.4f}")
    if len(runs) > 1:
        summary = _summarize(runs)
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        for name, (mean, std) in summary["mean_std"].items():
            print(f"{name}: {mean:.4f} +- {std:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval / predict
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    model = VisionHgNN.load(args.checkpoint)
    micrographs, class_names = load_dataset(args.data)
    if model.class_names and class_names != model.class_names:
        raise DataError(f"dataset classes {class_names} differ from checkpoint classes {model.class_names}")
    if not model.class_names:
        model.class_names = class_names
    cfg = model.config
    patches = preprocess_all(micrographs, cfg.image_size, cfg.patch_size, cfg.dtype)
    report = evaluate(model, patches, [m.label_index for m in micrographs])
    print(report.to_table())
    if args.out:
        _refuse_overwrite([args.out], args.force)
        Path(args.out).write_text(report.to_json() + "\n")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = VisionHgNN.load(args.checkpoint)
    cfg = model.config
    grid = preprocess(Micrograph(decode_image(args.image)), cfg.image_size, cfg.patch_size)
    probs = model.predict_proba(grid.features[None].astype(cfg.dtype))[0]
    n = min(args.top, cfg.num_classes)
    names = model.class_names or [str(i) for i in range(cfg.num_classes)]
    for idx in rank_classes(probs)[:n]:
        print(f"{names[idx]} {probs[idx]:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck / inspect
# ---------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_table, run_suite

    results = run_suite(args.seed or 0, include_model=not args.ops_only)
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"all {len(results)} checks within tolerance")
    return EXIT_OK


def cmd_inspect(args) -> int:
    if args.checkpoint:
        model = VisionHgNN.load(args.checkpoint)
        cfg, params = model.config, model.params
        if args.k is not None:
            cfg = dataclasses.replace(cfg, k=args.k).validate()
    else:
        cfg = _config_from_args(args).model.validate()
        params = init_parameters(cfg)
    m = Micrograph(decode_image(args.image), source_path=str(args.image))
    grid = preprocess(m, cfg.image_size, cfg.patch_size)
    G = sample_hypergraph(grid.features, params, cfg)
    sizes = G.incidence.sum(axis=0)
    feats = grid.features
    stats = [
        f"image {args.image}: original {m.pixels.shape[0]}x{m.pixels.shape[1]}, resized {cfg.image_size}x{cfg.image_size}",
        f"patches n={grid.n} of {cfg.patch_size}x{cfg.patch_size}x{cfg.channels} (feature width {feats.shape[1]})",
        f"patch features mean={feats.mean():.4f} std={feats.std():.4f} min={feats.min():.4f} max={feats.max():.4f}",
        f"hyperedges={G.n} K={cfg.k} metric={cfg.metric} members per hyperedge min={sizes.min()} max={sizes.max()}",
    ]
    edges = G.edge_list()
    print("\n".join(stats))
    if args.out:
        _refuse_overwrite([args.out], args.force)
        Path(args.out).write_text(edges + "\n")
    else:
        print(edges)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model overrides")
    g.add_argument("--d", type=int)
    g.add_argument("--patch-size", type=int)
    g.add_argument("--image-size", type=int)
    g.add_argument("--k", type=int)
    g.add_argument("--replicas", type=int)
    g.add_argument("--hgat-layers", type=int)
    g.add_argument("--hgt-layers", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--dropout", type=float)
    g.add_argument("--metric", choices=["euclidean", "cosine"])
    g.add_argument("--readout", choices=["mean", "sum", "cls"])
    g.add_argument("--virtual-node", action="store_const", const=True)
    g.add_argument("--clamp-k", action="store_const", const=True, help="clamp K to n-1 with a warning")
    g.add_argument("--precision", choices=["float32", "float64"])
    g.add_argument("--variant", choices=sorted(VARIANTS))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vhgnn", description="Vision-HgNN hypergraph image classifier")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train on an image folder and report on the test fold")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", help="comma-separated seeds; reports mean and std")
    p.add_argument("--parallel", action="store_true", help="one worker process per seed")
    p.add_argument("--force", action="store_true")
    _add_model_flags(p)
    g = p.add_argument_group("training overrides")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--scheduler-patience", type=int)
    g.add_argument("--early-stop-patience", type=int)
    g.add_argument("--folds", type=int)
    g.add_argument("--fold", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on an image folder")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="write the report as JSON")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="top classes for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--top", type=int, default=5)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ops-only", action="store_true", help="skip the full-model checks")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="dump the hypergraph built for one image")
    p.add_argument("--image", required=True)
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="write the edge list to a file")
    p.add_argument("--force", action="store_true")
    _add_model_flags(p)
    p.set_defaults(func=cmd_inspect)
    return parser


def _limit_threads():
    raw = os.environ.get("VHGNN_THREADS")
    if not raw:
        return None
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return None
    return threadpool_limits(limits=max(1, int(raw)))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    _limit_threads()
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, DimensionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
