"""Balanced accuracy, class-distribution estimates and the ambiguity bound."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .nncore import MlpModel, forward, softmax
from .rebalance import PrototypeFeature, prototype_distribution_logits

GROUPS = ("many", "medium", "few")


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    balanced_top1: float
    per_class_accuracy: list[float]
    group_accuracy: dict[str, float | None]
    dist_proto: list[float]
    dist_pred: list[float]
    dist_soft: list[float]
    l2_proto: float
    l2_pred: float


def predict(model: MlpModel, x: np.ndarray, offset: np.ndarray | None = None, batch: int = 4096) -> np.ndarray:
    """Argmax class per row (ties to the lowest index) of ``z - offset``."""
    out = []
    for i in range(0, x.shape[0], batch):
        z = forward(model, x[i:i + batch]).logits
        if offset is not None:
            z = z - offset
        out.append(np.argmax(z, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def group_of(count: int, many: int = 100, few: int = 20) -> str:
    if count > many:
        return "many"
    if count >= few:
        return "medium"
    return "few"


def group_partition(train_counts: Sequence[int], many: int = 100, few: int = 20) -> dict[str, list[int]]:
    parts: dict[str, list[int]] = {g: [] for g in GROUPS}
    for c, n in enumerate(train_counts):
        parts[group_of(int(n), many, few)].append(c)
    return parts


def accuracy_report(pred: np.ndarray, labels: np.ndarray, train_counts: Sequence[int],
                    many: int = 100, few: int = 20) -> tuple[float, np.ndarray, dict[str, float | None]]:
    C = len(train_counts)
    per_class = np.empty(C)
    for c in range(C):
        sel = labels == c
        if not sel.any():
            raise ValueError(f"class {c} is absent from the test set")
        per_class[c] = np.mean(pred[sel] == c)
    groups = {
        g: (float(per_class[idx].mean()) if idx else None)
        for g, idx in group_partition(train_counts, many, few).items()
    }
    return float(per_class.mean()), per_class, groups


def balanced_metrics(model: MlpModel, test, train_counts: Sequence[int], offset: np.ndarray | None = None,
                     many: int = 100, few: int = 20):
    """Balanced top-1, per-class accuracy and Many/Medium/Few means on a labelled test set.

    Groups are formed from *training* counts; an empty group is reported as None.
    """
    return accuracy_report(predict(model, test.features, offset), test.labels, train_counts, many, few)


def prototype_distribution(model: MlpModel, proto: PrototypeFeature) -> np.ndarray:
    return softmax(prototype_distribution_logits(proto, model))


def prediction_distribution(model: MlpModel, x: np.ndarray, offset: np.ndarray | None = None) -> np.ndarray:
    """Normalised histogram of hard predictions."""
    pred = predict(model, x, offset)
    hist = np.bincount(pred, minlength=model.num_classes).astype(np.float64)
    return hist / hist.sum()


def mean_softmax_distribution(model: MlpModel, x: np.ndarray) -> np.ndarray:
    return softmax(forward(model, x).logits).mean(axis=0)


def class_distribution(source: str, model: MlpModel, proto: PrototypeFeature | None = None,
                       x: np.ndarray | None = None, offset: np.ndarray | None = None) -> np.ndarray:
    if source == "prototype":
        if proto is None:
            raise ValueError("prototype source needs a prototype")
        return prototype_distribution(model, proto)
    if source == "predictions":
        if x is None:
            raise ValueError("predictions source needs training features")
        return prediction_distribution(model, x, offset)
    raise ValueError(f"unknown distribution source {source!r}")


def l2_distance(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    return float(np.sqrt(np.sum((p - q) ** 2)))


@dataclass(frozen=True)
class BoundInputs:
    N: int
    C: int
    d_H: float
    eta: float
    delta: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.eta < 1.0:
            raise ValueError(f"bound needs eta in [0, 1), got {self.eta}")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if self.N < 1 or self.C < 2 or self.d_H < 1:
            raise ValueError("need N >= 1, C >= 2, d_H >= 1")


def ambiguity_bound(b: BoundInputs) -> float:
    """Upper bound on the L2 gap between the learned and oracle class distributions."""
    gap = math.log(2.0) - math.log1p(b.eta)
    return 4.0 / (gap * b.N) * (b.d_H * (math.log(2.0 * b.N) + 2.0 * math.log(b.C)) - math.log(b.delta) + math.log(2.0))


# ---------------------------------------------------------------- CSV output


def csv_header(C: int) -> list[str]:
    return (
        ["epoch", "lr", "train_loss", "balanced_top1"]
        + [f"acc_class_{c}" for c in range(C)]
        + ["acc_many", "acc_medium", "acc_few", "l2_proto", "l2_pred", "dist_proto_json", "dist_pred_json"]
    )


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def csv_row(log: EpochLog) -> list[str]:
    return (
        [str(log.epoch), _fmt(log.lr), _fmt(log.train_loss), _fmt(log.balanced_top1)]
        + [_fmt(a) for a in log.per_class_accuracy]
        + [_fmt(log.group_accuracy[g]) for g in GROUPS]
        + [_fmt(log.l2_proto), _fmt(log.l2_pred), json.dumps(log.dist_proto), json.dumps(log.dist_pred)]
    )


def metrics_csv(logs: Iterable[EpochLog], C: int, config: dict | None = None) -> str:
    """CSV text; a leading ``# {json}`` comment line embeds the resolved config."""
    buf = io.StringIO()
    if config is not None:
        buf.write("# " + json.dumps(config, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(csv_header(C))
    for log in logs:
        w.writerow(csv_row(log))
    return buf.getvalue()


def read_metrics_csv(path) -> list[dict[str, str]]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))
