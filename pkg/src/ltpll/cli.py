"""Command-line entry point: ``ltpll {gen,train,eval,bound,sweep}``.

Exit codes: 0 success, 2 config error, 3 training diverged, 4 IO error.
Flags override config-file fields, which override built-in defaults.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .datagen import ConfigError, read_labeled, synth_dataset, write_dataset
from .experiment import build_experiment, load_config, run_experiment, set_dotted
from .metrics import GROUPS, BoundInputs, accuracy_report, ambiguity_bound, predict
from .nncore import MlpModel
from .rebalance import PrototypeFeature, distribution_offset, records_offset
from .trainer import TrainingDiverged, _canonical

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4



def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _raw_config(args) -> dict:
    raw = load_config(args.config) if getattr(args, "config", None) else {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.field=value, got {item!r}")
        key, val = item.split("=", 1)
        raw = set_dotted(raw, key, _parse_value(val))
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    return raw


def cmd_gen(args) -> int:
    exp = build_experiment(_raw_config(args))
    train, test = synth_dataset(exp.generator)
    paths = write_dataset(train, test, args.out)
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return EXIT_OK


def cmd_train(args) -> int:
    exp = build_experiment(_raw_config(args))
    out, _, logs = run_experiment(exp, args.out, force=args.force, data_dir=args.data)
    last = logs[-1]
    print(json.dumps({"run_dir": str(out), "epoch": last.epoch, "balanced_top1": last.balanced_top1}))
    return EXIT_OK


def _eval_offset(ckpt: dict, mode: str, C: int) -> np.ndarray | None:
    if mode == "none":
        return None
    if mode == "checkpoint":
        off = ckpt.get("inference_offset")
        return None if off is None else np.asarray(off)
    if mode == "prior":
        counts = np.asarray(ckpt["train_counts"], dtype=np.float64)
        return _canonical(np.log(counts / counts.sum()))
    if mode == "records":
        model = MlpModel.from_dict(ckpt["model"])
        proto = PrototypeFeature(np.asarray(ckpt["prototype"]["F"]), ckpt["prototype"]["m"])
        return _canonical(records_offset(proto, model))
    if mode == "epoch_records":
        dist = ckpt.get("epoch_distribution")
        return None if dist is None else _canonical(distribution_offset(np.asarray(dist)))
    raise ConfigError(f"unknown offset mode {mode!r}")


def evaluate_checkpoint(ckpt: dict, test_path: str | Path, offset_mode: str = "checkpoint") -> dict:
    model = MlpModel.from_dict(ckpt["model"])
    test = read_labeled(test_path)
    offset = _eval_offset(ckpt, offset_mode, model.num_classes)
    many, few = ckpt["config"]["train"]["group_many"], ckpt["config"]["train"]["group_few"]
    top1, per_class, groups = accuracy_report(predict(model, test.features, offset), test.labels,
                                              ckpt["train_counts"], many, few)
    return {
        "offset_mode": offset_mode,
        "balanced_top1": top1,
        "per_class_accuracy": per_class.tolist(),
        "group_accuracy": groups,
        "config": ckpt["config"],
    }


def cmd_eval(args) -> int:
    ckpt = json.loads(Path(args.checkpoint).read_text())
    result = evaluate_checkpoint(ckpt, args.test, args.offset)
    text = json.dumps(result, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_bound(args) -> int:
    try:
        b = BoundInputs(N=args.N, C=args.C, d_H=args.dH, eta=args.eta, delta=args.delta)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    print(json.dumps({"inputs": {"N": b.N, "C": b.C, "dH": b.d_H, "eta": b.eta, "delta": b.delta},
                      "epsilon": ambiguity_bound(b)}))
    return EXIT_OK


def expand_grid(base: dict, grid: dict[str, list], seeds: list[int] | None) -> list[tuple[dict, dict]]:
    """Cartesian product of dotted-key overrides (and seeds) applied to ``base``."""
    keys = list(grid)
    children = []
    for values in itertools.product(*(grid[k] for k in keys)):
        for seed in seeds if seeds else [base.get("seed")]:
            raw = dict(base)
            overrides = dict(zip(keys, values))
            for k, v in overrides.items():
                raw = set_dotted(raw, k, v)
            if seed is not None:
                raw["seed"] = seed
            children.append((overrides, raw))
    return children


def _run_child(payload: tuple[dict, str, bool]) -> dict:
    raw, root, force = payload
    exp = build_experiment(raw)
    out, _, logs = run_experiment(exp, root, force=force)
    last = logs[-1]
    return {
        "run": out.name,
        "seed": exp.seed,
        "balanced_top1": last.balanced_top1,
        **{f"acc_{g}": last.group_accuracy[g] for g in GROUPS},
        "l2_proto": last.l2_proto,
        "l2_pred": last.l2_pred,
    }


def run_sweep(base: dict, grid: dict[str, list], out_dir: str | Path, seeds: list[int] | None = None,
              jobs: int = 1, force: bool = False) -> Path:
    children = expand_grid(base, grid, seeds)
    for _, raw in children:
        build_experiment(raw)  # fail fast on a bad cell before any training
    payloads = [(raw, str(out_dir), force) for _, raw in children]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_child, payloads))
    else:
        rows = [_run_child(p) for p in payloads]
    keys = list(grid)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "seed", *keys, "balanced_top1", *(f"acc_{g}" for g in GROUPS), "l2_proto", "l2_pred"])
    for (overrides, _), row in zip(children, rows):
        w.writerow([row["run"], row["seed"], *(v if isinstance(v := overrides[k], str) else json.dumps(v) for k in keys), repr(row["balanced_top1"]),
                    *("" if row[f"acc_{g}"] is None else repr(row[f"acc_{g}"]) for g in GROUPS),
                    repr(row["l2_proto"]), repr(row["l2_pred"])])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "summary.csv"
    path.write_text("# " + json.dumps({"base": base, "grid": grid, "seeds": seeds}, sort_keys=True) + "\n" + buf.getvalue())
    return path


def cmd_sweep(args) -> int:
    base = _raw_config(args)
    grid = json.loads(args.grid) if args.grid else {}
    if not isinstance(grid, dict) or not all(isinstance(v, list) for v in grid.values()):
        raise ConfigError("--grid must be a JSON object mapping dotted keys to lists")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    path = run_sweep(base, grid, args.out, seeds, args.jobs, args.force)
    print(json.dumps({"summary": str(path)}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ltpll", description="Long-tailed partial-label learning lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE",
                       help="override one config field (value parsed as JSON when possible)")

    p = sub.add_parser("gen", help="generate a dataset")
    with_config(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one configuration")
    with_config(p)
    p.add_argument("--data", help="dataset directory from `gen` (default: generate from config)")
    p.add_argument("--out", help="root for run directories (default: config output_dir)")
    p.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="re-score a checkpoint on a test file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True, help="test JSONL with id, x, y")
    p.add_argument("--offset", default="checkpoint",
                   choices=("checkpoint", "none", "prior", "records", "epoch_records"))
    p.add_argument("--out", help="also write the JSON result here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bound", help="evaluate the ambiguity-degree L2 bound")
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--C", type=int, required=True)
    p.add_argument("--dH", type=float, required=True)
    p.add_argument("--eta", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser("sweep", help="run a grid of configurations")
    with_config(p)
    p.add_argument("--grid", help='JSON, e.g. \'{"rebalance.kind": ["none", "records"]}\'')
    p.add_argument("--seeds", help="comma-separated seeds (default: config seed)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
