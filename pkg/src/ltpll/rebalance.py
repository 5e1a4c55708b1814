"""Per-class logit offsets for rebalancing disambiguation.

Every offset is a log class distribution; the debiased logits are
``z_uni = z - offset``. RECORDS derives the distribution from a momentum
prototype of the penultimate features pushed through the current classifier.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nncore import ContractError, MlpModel, log_softmax

MODES = ("none", "oracle_la", "oracle_la_posthoc", "temp_oracle_la", "epoch_records", "records")
ORACLE_MODES = ("oracle_la", "oracle_la_posthoc", "temp_oracle_la")
DIST_FLOOR = 1e-8


@dataclass
class PrototypeFeature:
    F: np.ndarray
    m: float = 0.9

    def __post_init__(self) -> None:
        if not 0.0 <= self.m <= 1.0:
            raise ValueError(f"momentum m must lie in [0, 1], got {self.m}")

    @classmethod
    def zeros(cls, dim: int, m: float = 0.9) -> "PrototypeFeature":
        return cls(np.zeros(dim), m)


@dataclass(frozen=True)
class RebalanceMode:
    kind: str = "none"
    prior: tuple[float, ...] | None = None
    tau: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in MODES:
            raise ValueError(f"rebalance mode must be one of {MODES}, got {self.kind!r}")
        if self.prior is not None:
            p = np.asarray(self.prior, dtype=np.float64)
            if np.any(p <= 0) or abs(p.sum() - 1.0) > 1e-9:
                raise ValueError("prior must be strictly positive and sum to 1")

    @property
    def log_prior(self) -> np.ndarray:
        if self.prior is None:
            raise ValueError(f"mode {self.kind!r} needs the oracle prior")
        return np.log(np.asarray(self.prior, dtype=np.float64))

    def with_prior(self, prior) -> "RebalanceMode":
        return RebalanceMode(self.kind, tuple(float(v) for v in prior), self.tau)


def update_prototype(proto: PrototypeFeature, batch_features: np.ndarray) -> PrototypeFeature:
    """``F <- m F + (1 - m) mean(batch)``, in place; returns ``proto``."""
    feats = np.asarray(batch_features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise ContractError("prototype update needs a nonempty (B, d) batch")
    if feats.shape[1] != proto.F.shape[0]:
        raise ContractError(f"feature width {feats.shape[1]} != prototype width {proto.F.shape[0]}")
    if proto.m == 1.0:
        return proto
    proto.F = proto.m * proto.F + (1.0 - proto.m) * feats.mean(axis=0)
    return proto


def prototype_distribution_logits(proto: PrototypeFeature, model: MlpModel) -> np.ndarray:
    W, b = model.classifier
    return W @ proto.F + b


def records_offset(proto: PrototypeFeature, model: MlpModel) -> np.ndarray:
    """log softmax of the classifier applied to the prototype feature."""
    return log_softmax(prototype_distribution_logits(proto, model))


def distribution_offset(dist: np.ndarray, floor: float = DIST_FLOOR) -> np.ndarray:
    """Floor, renormalise and take the log of an estimated class distribution."""
    d = np.maximum(np.asarray(dist, dtype=np.float64), floor)
    return np.log(d / d.sum())


def temperature(epoch: int, total_epochs: int) -> float:
    """Linear 0 -> 1 ramp over 0-based epochs."""
    if total_epochs <= 1:
        return 1.0
    return epoch / (total_epochs - 1)


def offset_for(
    mode: RebalanceMode,
    proto: PrototypeFeature | None,
    model: MlpModel,
    epoch: int,
    total_epochs: int,
    latest_epoch_distribution: np.ndarray | None = None,
) -> np.ndarray:
    """Training-time offset for the disambiguation logits (zeros when inactive)."""
    C = model.num_classes
    if mode.kind in ORACLE_MODES and mode.prior is None:
        raise ValueError(f"mode {mode.kind!r} needs the oracle prior")
    if mode.kind in ("none", "oracle_la_posthoc"):
        return np.zeros(C)
    if mode.kind == "oracle_la":
        return mode.tau * mode.log_prior
    if mode.kind == "temp_oracle_la":
        return temperature(epoch, total_epochs) * mode.log_prior
    if mode.kind == "epoch_records":
        if latest_epoch_distribution is None:
            return np.zeros(C)
        return distribution_offset(latest_epoch_distribution)
    if proto is None:
        raise ContractError("records mode needs a prototype")
    return records_offset(proto, model)


def debias(z: np.ndarray, offset: np.ndarray) -> np.ndarray:
    return np.asarray(z) - np.asarray(offset)
