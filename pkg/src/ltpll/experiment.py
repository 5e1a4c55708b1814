"""Declarative experiment configs and single-run execution.

A config file is JSON with these sections (all optional except ``seed``)::

    {
      "seed": 1,
      "generator": {"world": "toy2d", ...},      # GeneratorConfig fields
      "model": {"hidden": [10], "activation": "leaky_relu", ...},
      "train": {"epochs": 50, "batch_size": 512, "base_lr": 2.0, ...},
      "strategy": {"strategy": "PRODEN", ...},  # StrategyConfig fields
      "rebalance": {"kind": "records", "tau": 1.0},
      "output_dir": "runs"
    }

The top-level seed drives both data generation and training.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .datagen import ConfigError, GeneratorConfig, LabeledSet, PartialDataset, read_dataset, read_labeled, synth_dataset
from .disambiguation import StrategyConfig
from .metrics import EpochLog, metrics_csv
from .rebalance import RebalanceMode
from .trainer import TrainConfig, TrainState, inference_offset, resolve_config, run_training

SECTIONS = ("seed", "generator", "model", "train", "strategy", "rebalance", "output_dir")
MODEL_FIELDS = ("hidden", "activation", "final_bias", "init_gain")
_TRAIN_SKIP = {"strategy", "rebalance", "seed", *MODEL_FIELDS}


@dataclass(frozen=True)
class ExperimentConfig:
    generator: GeneratorConfig
    train: TrainConfig
    seed: int
    output_dir: str = "runs"
    raw: dict | None = None

    def resolved(self) -> dict:
        """Fully expanded config with every default filled in."""
        t = asdict(self.train)
        return {
            "seed": self.seed,
            "generator": {k: v for k, v in asdict(self.generator).items() if k != "seed"},
            "model": {k: (list(t[k]) if k == "hidden" else t[k]) for k in MODEL_FIELDS},
            "train": {k: v for k, v in t.items() if k not in _TRAIN_SKIP},
            "strategy": t["strategy"],
            "rebalance": {"kind": t["rebalance"]["kind"], "tau": t["rebalance"]["tau"],
                          **({"prior": list(t["rebalance"]["prior"])} if t["rebalance"]["prior"] else {})},
            "output_dir": self.output_dir,
        }

    def config_hash(self) -> str:
        r = self.resolved()
        r.pop("output_dir")
        r.pop("seed")
        return hashlib.sha256(json.dumps(r, sort_keys=True).encode()).hexdigest()[:10]

    def run_name(self) -> str:
        return f"{self.config_hash()}-s{self.seed}"


def _known(section: str, d: dict, allowed) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(f"{section}: expected an object, got {type(d).__name__}")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"{section}: unknown field(s) {sorted(unknown)}")
    return d


def _field_error(section: str, exc: Exception) -> ConfigError:
    return ConfigError(f"{section}: {exc}")


def build_experiment(raw: dict) -> ExperimentConfig:
    """Validate a config mapping; errors name the offending section/field."""
    _known("config", raw, SECTIONS)
    if "seed" not in raw:
        raise ConfigError("seed: required (no ambient randomness)")
    seed = raw["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed: expected a nonnegative integer, got {seed!r}")

    gen = dict(_known("generator", raw.get("generator", {}), GeneratorConfig.__dataclass_fields__))
    gen.pop("seed", None)
    try:
        generator = GeneratorConfig(seed=seed, **gen)
    except (ConfigError, ValueError, TypeError) as exc:
        raise _field_error("generator", exc) from exc

    model = dict(_known("model", raw.get("model", {}), MODEL_FIELDS))
    if "hidden" in model:
        model["hidden"] = tuple(int(h) for h in model["hidden"])
    train_fields = {f.name for f in fields(TrainConfig)} - _TRAIN_SKIP
    train = _known("train", raw.get("train", {}), train_fields)
    try:
        strategy = StrategyConfig(**_known("strategy", raw.get("strategy", {}), StrategyConfig.__dataclass_fields__))
    except (ValueError, TypeError) as exc:
        raise _field_error("strategy", exc) from exc
    reb = dict(_known("rebalance", raw.get("rebalance", {}), ("kind", "tau", "prior")))
    if "prior" in reb:
        reb["prior"] = tuple(reb["prior"])
    try:
        rebalance = RebalanceMode(**reb)
    except (ValueError, TypeError) as exc:
        raise _field_error("rebalance", exc) from exc
    try:
        tcfg = TrainConfig(seed=seed, strategy=strategy, rebalance=rebalance, **model, **train)
        tcfg.model_spec(generator.feature_dim, generator.C)
    except (ValueError, TypeError) as exc:
        raise _field_error("train/model", exc) from exc
    return ExperimentConfig(generator, tcfg, seed, str(raw.get("output_dir", "runs")), copy.deepcopy(raw))


def load_config(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc


def set_dotted(raw: dict, key: str, value) -> dict:
    """Return a copy of ``raw`` with ``section.field`` (or a top-level key) set."""
    out = copy.deepcopy(raw)
    parts = key.split(".")
    node = out
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{key}: {p} is not a section")
    node[parts[-1]] = value
    return out


def load_data(exp: ExperimentConfig, data_dir: str | Path | None = None) -> tuple[PartialDataset, LabeledSet]:
    if data_dir is None:
        return synth_dataset(exp.generator)
    d = Path(data_dir)
    return read_dataset(d / "train.jsonl", d / "train.meta.json"), read_labeled(d / "test.jsonl")


def checkpoint_dict(exp: ExperimentConfig, state: TrainState, train: PartialDataset) -> dict:
    off = inference_offset(state, resolve_config(exp.train, train))
    return {
        "config": exp.resolved(),
        "seed": exp.seed,
        "model": state.model.to_dict(),
        "prototype": {"F": state.proto.F.tolist(), "m": state.proto.m},
        "epoch_distribution": None if state.epoch_distribution is None else state.epoch_distribution.tolist(),
        "inference_offset": None if off is None else off.tolist(),
        "train_counts": [int(c) for c in train.counts],
        "epochs_done": state.epoch,
    }


def run_dir_for(exp: ExperimentConfig, root: str | Path | None = None) -> Path:
    return Path(root if root is not None else exp.output_dir) / exp.run_name()


def run_experiment(
    exp: ExperimentConfig,
    root: str | Path | None = None,
    force: bool = False,
    data_dir: str | Path | None = None,
) -> tuple[Path, TrainState, list[EpochLog]]:
    """Generate (or load) data, train, and write ``metrics.csv``, ``checkpoint.json``, ``config.json``."""
    out = run_dir_for(exp, root)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} already exists; pass --force to overwrite")
    train, test = load_data(exp, data_dir)
    state, logs = run_training(train, test, exp.train)
    out.mkdir(parents=True, exist_ok=True)
    resolved = exp.resolved()
    (out / "config.json").write_text(json.dumps(resolved, indent=1, sort_keys=True) + "\n")
    (out / "metrics.csv").write_text(metrics_csv(logs, train.num_classes, resolved))
    (out / "checkpoint.json").write_text(json.dumps(checkpoint_dict(exp, state, train)) + "\n")
    return out, state, logs
