"""Training loop for self-training PLL with optional rebalancing.

Per mini-batch, in this order:

    1. forward       logits z (one pass per view for CORR)
    2. prototype     F <- m F + (1 - m) * batch feature mean
    3. loss          strategy loss on z with the weights as they stand
    4. debias        z_uni = z - offset
    5. weights       confidence weights of the batch rows from z_uni
    6. step          momentum SGD on the loss from step 3
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .datagen import LabeledSet, PartialDataset, PartialView, empirical_prior
from .disambiguation import ConfidenceWeights, StrategyConfig, check_weights, init_weights, strategy_loss, update_weights
from .metrics import EpochLog, balanced_metrics, l2_distance, mean_softmax_distribution, prediction_distribution, prototype_distribution
from .nncore import MlpModel, ModelSpec, OptimizerState, forward, gradients, lr_at, sgd_step, softmax
from .rebalance import ORACLE_MODES, PrototypeFeature, RebalanceMode, debias, distribution_offset, offset_for, records_offset, update_prototype

log = logging.getLogger(__name__)

STEP_EVENTS = ("forward", "prototype", "loss", "debias", "weights", "step")
TEST_OFFSETS = ("auto", "none", "prior", "records", "epoch_records")
LA_LOSS_FORMS = ("adjusted", "debiased", "off")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, sample_ids: list[int]):
        self.epoch, self.batch, self.sample_ids = epoch, batch, sample_ids
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}; samples {sample_ids[:20]}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 512
    base_lr: float = 2.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    records_m: float = 0.9
    hidden: tuple[int, ...] = (10,)
    activation: str = "leaky_relu"
    final_bias: bool = True
    init_gain: float = 1.0
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    rebalance: RebalanceMode = field(default_factory=RebalanceMode)
    seed: int = 0
    eval_every: int = 1
    shuffle: bool = True
    # ablation switches
    loss_after_update: bool = False
    la_loss_form: str = "adjusted"
    la_on_weights: bool = True
    test_offset: str = "auto"
    group_many: int = 100
    group_few: int = 20

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("epochs, batch_size and eval_every must be >= 1")
        if not 0.0 <= self.records_m <= 1.0:
            raise ValueError(f"records_m must lie in [0, 1], got {self.records_m}")
        if self.test_offset not in TEST_OFFSETS:
            raise ValueError(f"test_offset must be one of {TEST_OFFSETS}")
        if self.la_loss_form not in LA_LOSS_FORMS:
            raise ValueError(f"la_loss_form must be one of {LA_LOSS_FORMS}")

    def model_spec(self, in_dim: int, num_classes: int) -> ModelSpec:
        return ModelSpec(in_dim, tuple(self.hidden), num_classes, self.activation, self.final_bias, self.init_gain)


@dataclass
class TrainState:
    model: MlpModel
    opt: OptimizerState
    weights: ConfidenceWeights
    proto: PrototypeFeature
    epoch: int
    shuffle_rng: np.random.Generator
    noise_rng: np.random.Generator
    epoch_distribution: np.ndarray | None = None
    loss_history: list[float] = field(default_factory=list)


def _canonical(offset: np.ndarray) -> np.ndarray:
    # a log-distribution offset only matters up to a constant; pinning its max
    # to zero makes a uniform estimate an exact no-op in floating point
    return offset - offset.max()


def init_state(view: PartialView, cfg: TrainConfig) -> TrainState:
    init_ss, shuffle_ss, noise_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    spec = cfg.model_spec(view.features.shape[1], view.num_classes)
    model = MlpModel.create(spec, np.random.default_rng(init_ss))
    model.seed = cfg.seed
    opt = OptimizerState.for_model(model, cfg.base_lr, cfg.epochs, cfg.momentum, cfg.weight_decay)
    return TrainState(
        model=model,
        opt=opt,
        weights=init_weights(view.candidates, cfg.strategy.strategy),
        proto=PrototypeFeature.zeros(model.feature_dim, cfg.records_m),
        epoch=0,
        shuffle_rng=np.random.default_rng(shuffle_ss),
        noise_rng=np.random.default_rng(noise_ss),
    )


def _views(x: np.ndarray, scfg: StrategyConfig, rng: np.random.Generator) -> list[np.ndarray]:
    if scfg.strategy != "CORR":
        return [x]
    return [x + scfg.corr_noise_sigma * rng.standard_normal(x.shape) for _ in range(scfg.corr_views)]


def _loss_logits(z: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    """Logits the loss sees. Only train-time Oracle-LA touches them."""
    if cfg.rebalance.kind != "oracle_la" or cfg.la_loss_form == "off":
        return z
    adj = cfg.rebalance.tau * cfg.rebalance.log_prior
    # "adjusted": logit-adjusted cross-entropy on z + tau log prior
    return z + adj if cfg.la_loss_form == "adjusted" else z - adj


def train_epoch(
    state: TrainState,
    view: PartialView,
    cfg: TrainConfig,
    on_event: Callable[[str, int, int], None] | None = None,
    on_batch: Callable[[TrainState, int, np.ndarray], None] | None = None,
) -> float:
    """One pass over the training set; returns the sample-weighted mean loss."""
    scfg = cfg.strategy
    strategy = scfg.strategy
    N, C = view.candidates.shape
    t = state.epoch
    lr = lr_at(t, state.opt)
    order = state.shuffle_rng.permutation(N) if cfg.shuffle else np.arange(N)
    soft_sum = np.zeros(C)
    loss_sum = 0.0
    emit = on_event or (lambda *_: None)

    for k, start in enumerate(range(0, N, cfg.batch_size)):
        idx = order[start:start + cfg.batch_size]
        S = view.candidates[idx]
        caches = [forward(state.model, xv) for xv in _views(view.features[idx], scfg, state.noise_rng)]
        z = np.stack([c.logits for c in caches])  # (V, B, C)
        emit("forward", t, k)

        update_prototype(state.proto, np.concatenate([c.features for c in caches]))
        emit("prototype", t, k)

        w, w_non = state.weights.w[idx], None
        if state.weights.w_non is not None:
            w_non = state.weights.w_non[idx]

        def compute_loss(w, w_non):
            zl = _loss_logits(z, cfg)
            loss, g = strategy_loss(strategy, zl if strategy == "CORR" else zl[0], w, S, scfg, w_non, validate=False)
            return loss, (g if strategy == "CORR" else g[None])

        if not cfg.loss_after_update:
            loss, dz = compute_loss(w, w_non)
            emit("loss", t, k)

        offset = offset_for(cfg.rebalance, state.proto, state.model, t, cfg.epochs, state.epoch_distribution)
        if cfg.rebalance.kind == "oracle_la" and not cfg.la_on_weights:
            offset = np.zeros(C)
        z_uni = debias(z, _canonical(offset))
        emit("debias", t, k)

        new_w, new_non = update_weights(strategy, z_uni if strategy == "CORR" else z_uni[0], S, scfg)
        state.weights.w[idx] = new_w
        if new_non is not None:
            state.weights.w_non[idx] = new_non
        emit("weights", t, k)

        if cfg.loss_after_update:
            loss, dz = compute_loss(new_w, new_non)
            emit("loss", t, k)

        if not np.isfinite(loss) or not np.all(np.isfinite(dz)):
            bad = ~np.all(np.isfinite(dz), axis=(0, 2)) | ~np.all(np.isfinite(z), axis=(0, 2))
            raise TrainingDiverged(t + 1, k, idx[bad].tolist() or idx.tolist())

        grads = None
        for cache, g in zip(caches, dz):
            gv = gradients(state.model, cache, g)
            grads = gv if grads is None else [a + b for a, b in zip(grads, gv)]
        sgd_step(state.model, grads, state.opt, lr)
        emit("step", t, k)

        soft_sum += softmax(z).mean(axis=0).sum(axis=0)
        loss_sum += loss * idx.size
        if on_batch is not None:
            on_batch(state, k, idx)

    state.epoch_distribution = soft_sum / N
    state.epoch += 1
    mean_loss = loss_sum / N
    state.loss_history.append(mean_loss)
    return mean_loss


def inference_offset(state: TrainState, cfg: TrainConfig) -> np.ndarray | None:
    """Offset subtracted from test logits."""
    choice = cfg.test_offset
    if choice == "auto":
        choice = {"records": "records", "epoch_records": "epoch_records", "oracle_la_posthoc": "prior"}.get(
            cfg.rebalance.kind, "none"
        )
    if choice == "none":
        return None
    if choice == "prior":
        return _canonical(cfg.rebalance.log_prior)
    if choice == "records":
        return _canonical(records_offset(state.proto, state.model))
    if state.epoch_distribution is None:
        return None
    return _canonical(distribution_offset(state.epoch_distribution))


def evaluate_state(state: TrainState, train: PartialDataset, test: LabeledSet, cfg: TrainConfig,
                   train_loss: float, lr: float) -> EpochLog:
    prior = empirical_prior(train)
    top1, per_class, groups = balanced_metrics(
        state.model, test, train.counts, inference_offset(state, cfg), cfg.group_many, cfg.group_few
    )
    d_proto = prototype_distribution(state.model, state.proto)
    d_pred = prediction_distribution(state.model, train.features)
    d_soft = mean_softmax_distribution(state.model, train.features)
    return EpochLog(
        epoch=state.epoch,
        lr=lr,
        train_loss=train_loss,
        balanced_top1=top1,
        per_class_accuracy=per_class.tolist(),
        group_accuracy=groups,
        dist_proto=d_proto.tolist(),
        dist_pred=d_pred.tolist(),
        dist_soft=d_soft.tolist(),
        l2_proto=l2_distance(d_proto, prior),
        l2_pred=l2_distance(d_pred, prior),
    )


def resolve_config(cfg: TrainConfig, train: PartialDataset) -> TrainConfig:
    """Fill in the oracle prior for modes that need one."""
    if cfg.rebalance.kind in ORACLE_MODES and cfg.rebalance.prior is None:
        return replace(cfg, rebalance=cfg.rebalance.with_prior(empirical_prior(train)))
    return cfg


def run_training(
    train: PartialDataset,
    test: LabeledSet,
    cfg: TrainConfig,
    on_event: Callable[[str, int, int], None] | None = None,
    on_batch: Callable[[TrainState, int, np.ndarray], None] | None = None,
) -> tuple[TrainState, list[EpochLog]]:
    """Train for ``cfg.epochs`` epochs; log metrics every ``eval_every`` epochs and at the end."""
    cfg = resolve_config(cfg, train)
    view = train.view()
    state = init_state(view, cfg)
    logs: list[EpochLog] = []
    for t in range(cfg.epochs):
        lr = lr_at(t, state.opt)
        loss = train_epoch(state, view, cfg, on_event, on_batch)
        if state.epoch % cfg.eval_every == 0 or state.epoch == 1 or state.epoch == cfg.epochs:
            entry = evaluate_state(state, train, test, cfg, loss, lr)
            logs.append(entry)
            log.debug("epoch %d loss %.4f bal-top1 %.4f", entry.epoch, loss, entry.balanced_top1)
    check_weights(cfg.strategy.strategy, state.weights.w, view.candidates, state.weights.w_non)
    return state, logs
