"""Command-line entry point: ``dgcn <command> [options]``.

Exit codes: 0 success, 1 a verification command found failures, 2 config
error, 3 numeric divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgtext
from .bench import BenchConfig, bench_operators, rows_csv
from .data import (DataConfig, gen_synthetic_graphs, gen_synthetic_parts, load_datasets,
                   save_nodelink_json, save_pointcloud_csv)
from .errors import CheckpointError, ConfigError, ParseError, SamplingError, SchemaError
from .experiments import knn_check, run_depth_sweep
from .model import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .train import TrainConfig, evaluate, train, write_trace

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4

SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig, "bench": BenchConfig}


class RunDirExists(OSError):
    pass


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: DataConfig
    bench: BenchConfig

    def text(self, command: str) -> str:
        meta = {"version": __version__, "command": command, "seed": str(self.train.seed)}
        return cfgtext.to_text({"meta": meta, "model": self.model, "train": self.train,
                                "data": self.data, "bench": self.bench})


def _raw_sections(args) -> dict[str, dict[str, str]]:
    raw = {name: {} for name in SECTIONS}
    if getattr(args, "config", None):
        text = Path(args.config).read_text()
        for name, mapping in cfgtext.parse_text(text).items():
            if name == "meta":
                continue
            if name not in raw:
                raise ConfigError(f"unknown config section [{name}]")
            raw[name].update(mapping)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        if "." in key:
            section, key = key.split(".", 1)
            if section not in raw:
                raise ConfigError(f"unknown config section {section!r} in --set")
        else:
            owners = [n for n, cls in SECTIONS.items() if key in cfgtext.field_types(cls)]
            if len(owners) > 1:
                # bare keys go to the section the command actually uses
                preferred = ["bench"] if getattr(args, "command", None) == "bench" else []
                owners = [n for n in owners if n in preferred] or [n for n in owners if n != "bench"]
            if len(owners) != 1:
                what = "unknown" if not owners else f"ambiguous ({', '.join(owners)})"
                raise ConfigError(f"--set key {key!r} is {what}; use section.key")
            section = owners[0]
        raw[section][key] = value
    if getattr(args, "seed", None) is not None:
        raw["train"]["seed"] = str(args.seed)
    return raw


def _data_derived(train_set) -> dict:
    multilabel = bool(getattr(train_set, "multilabel", False))
    fixed = hasattr(train_set, "tables")
    return dict(in_channels=train_set.in_channels, num_classes=train_set.num_classes,
                multilabel=multilabel, fixed_edges=fixed, dynamic_knn=False if fixed else None)


def resolve(args, with_data=True):
    """Build the fully resolved RunConfig (and datasets when ``with_data``)."""
    raw = _raw_sections(args)
    data_cfg = cfgtext.from_mapping(DataConfig, raw["data"], "data")
    datasets = load_datasets(data_cfg) if with_data else (None, None)
    model_raw = dict(raw["model"])
    if with_data:
        for key, value in _data_derived(datasets[0]).items():
            if value is None:
                continue
            if key in model_raw:
                given = cfgtext._coerce(model_raw[key], type(value), key)
                if given != value:
                    raise ConfigError(f"model.{key}={given} conflicts with the dataset ({value})")
            model_raw[key] = value
    model_cfg = cfgtext.from_mapping(ModelConfig, model_raw, "model")
    run = RunConfig(model_cfg, cfgtext.from_mapping(TrainConfig, raw["train"], "train"), data_cfg,
                    cfgtext.from_mapping(BenchConfig, raw["bench"], "bench"))
    return run, datasets


def _prepare_out(path, force) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise RunDirExists(f"{out} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _report_dict(report) -> dict:
    return {k: v for k, v in dataclasses.asdict(report).items() if k != "loss_trace"}


def cmd_train(args) -> int:
    run, (train_set, eval_set) = resolve(args)
    out = _prepare_out(args.out, args.force)
    (out / "config.ini").write_text(run.text("train"))
    model = build_model(run.model, run.train.seed)
    result = train(model, train_set, run.train, eval_set)
    write_trace(result.trace, out / "metrics.csv")
    if result.diverged:
        print(f"diverged after {result.steps} steps", file=sys.stderr)
        return EXIT_DIVERGED
    if result.best_params is not None:
        model.store.restore(result.best_params)
    else:
        result.best = evaluate(model, eval_set, run.train.batch_size)
    save_checkpoint(model, out / "checkpoint.dgcn")
    summary = {"best_epoch": result.best_epoch, "steps": result.steps, **_report_dict(result.best)}
    (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if ckpt.is_dir():
        if args.config is None:
            args.config = str(ckpt / "config.ini")
        ckpt = ckpt / "checkpoint.dgcn"
    model = load_checkpoint(ckpt)
    _, (_, eval_set) = resolve(args)
    report = evaluate(model, eval_set, args.batch_size)
    payload = _report_dict(report)
    if model.cfg.multilabel:
        payload = {k: v for k, v in payload.items() if k not in ("miou", "oa", "iou")}
    text = json.dumps(payload, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_depth_sweep(args) -> int:
    run, (train_set, _) = resolve(args)
    out = _prepare_out(args.out, args.force)
    depths = [int(d) for d in args.depths.split(",")]
    conns = [c.strip() for c in args.connections.split(",")]
    (out / "config.ini").write_text(run.text("depth-sweep"))

    def log(cell):
        cell_cfg = dataclasses.replace(run, model=dataclasses.replace(run.model, connection=cell.connection,
                                                                      depth=cell.depth))
        (out / f"{cell.connection}-{cell.depth}" / "config.ini").write_text(cell_cfg.text("train"))
        loss = "diverged" if cell.diverged else f"{cell.smoothed_loss:.6g}"
        print(f"{cell.connection}-{cell.depth}: {loss}", flush=True)

    run_depth_sweep(run.model, run.train, train_set, depths, conns, out, log=log)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_table, run_all

    results = run_all(args.instances, args.seed or 0)
    print(format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def cmd_knn_check(args) -> int:
    rep = knn_check(args.n_points, args.trials, args.seed or 0)
    print(json.dumps({**dataclasses.asdict(rep), "passed": rep.passed}, sort_keys=True))
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_bench(args) -> int:
    run, _ = resolve(args, with_data=False)
    text = rows_csv(bench_operators(run.bench))
    if args.out:
        out = _prepare_out(args.out, args.force)
        (out / "bench.csv").write_text(text)
        (out / "config.ini").write_text(run.text("bench"))
    print(text, end="")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    run, _ = resolve(args, with_data=False)
    d = run.data
    out = _prepare_out(args.out, args.force)
    total = d.n_shapes + d.eval_shapes
    if d.source == "nodelink":
        graphs = gen_synthetic_graphs(total, seed=d.data_seed)
        for i, g in enumerate(graphs):
            g.split = "train" if i < d.n_shapes else "val"
        save_nodelink_json(graphs, out)
    else:
        for i, s in enumerate(gen_synthetic_parts(d.n_points, total, d.data_seed, d.parts)):
            save_pointcloud_csv(s, out / f"sample_{i:04d}.csv")
    print(f"wrote {total} samples to {out}")
    return EXIT_OK


def _common(p):
    p.add_argument("--config", help="INI config file with [model]/[train]/[data]/[bench] sections")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value (repeatable)")
    p.add_argument("--seed", type=int, help="training seed (train.seed)")
    p.add_argument("--out", help="output directory (or file for eval)")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dgcn", description="deep graph convolution engine")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a run directory")
    _common(p)
    p.set_defaults(func=cmd_train, out="runs/train")

    p = sub.add_parser("eval", help="evaluate a checkpoint or run directory")
    p.add_argument("checkpoint", help="checkpoint file or run directory")
    p.add_argument("--batch-size", type=int, default=8)
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("depth-sweep", help="train plain/res models across depths")
    p.add_argument("--depths", default="7,28,56")
    p.add_argument("--connections", default="plain,res")
    _common(p)
    p.set_defaults(func=cmd_depth_sweep, out="runs/depth-sweep")

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive and operator")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("knn-check", help="compare dilated k-NN with a brute-force oracle")
    p.add_argument("--n-points", type=int, default=200)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_knn_check)

    p = sub.add_parser("bench", help="operator memory/speed benchmark")
    _common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen-data", help="write a synthetic dataset to disk")
    _common(p)
    p.set_defaults(func=cmd_gen_data, out="data/synthetic")
    return ap


def _limit_threads():
    value = os.environ.get("DGCN_THREADS")
    if not value:
        return None
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"DGCN_THREADS must be a positive integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        limiter = _limit_threads()  # noqa: F841  (keeps the thread cap alive)
        # overflow in a diverging run is reported through the exit code, not warnings
        with np.errstate(over="ignore", invalid="ignore"):
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, SchemaError, ParseError, CheckpointError, SamplingError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
