"""Small feed-forward classifier with hand-written backprop and momentum SGD.

The last layer is the linear classifier ``g(.; W)``; everything before it is the
feature extractor ``f(.; theta)``. Features are the output of the penultimate
layer (the raw input when the model has no hidden layer).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

LEAKY_SLOPE = 0.01
ACTIVATIONS = ("leaky_relu", "relu", "tanh")


class ShapeError(ValueError):
    """Array shapes do not chain through the model."""


class ContractError(RuntimeError):
    """A caller broke an ordering or state precondition."""


def _activate(kind: str, a: np.ndarray) -> np.ndarray:
    if kind == "leaky_relu":
        return np.where(a > 0, a, LEAKY_SLOPE * a)
    if kind == "relu":
        return np.maximum(a, 0.0)
    if kind == "tanh":
        return np.tanh(a)
    raise ValueError(f"unknown activation {kind!r}")


def _activate_grad(kind: str, a: np.ndarray, h: np.ndarray) -> np.ndarray:
    if kind == "leaky_relu":
        return np.where(a > 0, 1.0, LEAKY_SLOPE)
    if kind == "relu":
        return (a > 0).astype(np.float64)
    return 1.0 - h * h


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of an MLP: input width, hidden widths, class count."""

    in_dim: int
    hidden: tuple[int, ...]
    num_classes: int
    activation: str = "leaky_relu"
    final_bias: bool = True
    init_gain: float = 1.0

    def __post_init__(self) -> None:
        if self.init_gain <= 0:
            raise ValueError("init_gain must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        widths = (self.in_dim, *self.hidden, self.num_classes)
        if any(int(w) < 1 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.in_dim, *self.hidden, self.num_classes)


@dataclass
class MlpModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "leaky_relu"
    final_bias: bool = True
    seed: int | None = None
    version: int = 0

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight matrix and at least one layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {k}: weight {w.shape} / bias {b.shape} mismatch")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ShapeError(
                    f"layer {k} expects width {w.shape[1]}, previous layer emits {self.weights[k - 1].shape[0]}"
                )
        if not self.final_bias and np.any(self.biases[-1] != 0):
            raise ShapeError("final_bias=False requires a zero classifier bias")

    @classmethod
    def create(cls, spec: ModelSpec, seed: int | np.random.Generator) -> "MlpModel":
        """Uniform fan-in init, ``U(-gain/sqrt(fan_in), gain/sqrt(fan_in))``; zero biases.

        ``init_gain=sqrt(6)`` gives He-uniform bounds.
        """
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        widths = spec.widths
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = spec.init_gain / math.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(
            weights,
            biases,
            activation=spec.activation,
            final_bias=spec.final_bias,
            seed=None if isinstance(seed, np.random.Generator) else int(seed),
        )

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def classifier(self) -> tuple[np.ndarray, np.ndarray]:
        return self.weights[-1], self.biases[-1]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpModel":
        return MlpModel(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            activation=self.activation,
            final_bias=self.final_bias,
            seed=self.seed,
            version=self.version,
        )

    def to_dict(self) -> dict:
        return {
            "layer_shapes": [list(w.shape) for w in self.weights],
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "activation": self.activation,
            "final_bias": self.final_bias,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpModel":
        weights = [np.asarray(w, dtype=np.float64).reshape(shape) for w, shape in zip(d["weights"], d["layer_shapes"])]
        biases = [np.asarray(b, dtype=np.float64) for b in d["biases"]]
        return cls(
            weights,
            biases,
            activation=d["activation"],
            final_bias=d.get("final_bias", True),
            seed=d.get("seed"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "MlpModel":
        return cls.from_dict(json.loads(text))


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # input to each layer
    pre: list[np.ndarray]  # pre-activation of each layer (last one is the logits)
    version: int

    @property
    def logits(self) -> np.ndarray:
        return self.pre[-1]

    @property
    def features(self) -> np.ndarray:
        return self.inputs[-1]


def forward(model: MlpModel, x: np.ndarray) -> ForwardCache:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.in_dim:
        raise ShapeError(f"batch of shape {x.shape} does not fit input width {model.in_dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("batch contains non-finite entries")
    inputs, pre = [], []
    h = x
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        inputs.append(h)
        a = h @ w.T + b
        pre.append(a)
        if k < last:
            h = _activate(model.activation, a)
    return ForwardCache(inputs, pre, model.version)


def gradients(model: MlpModel, cache: ForwardCache, dlogits: np.ndarray) -> list[np.ndarray]:
    """Reverse-mode gradients of a logits-level loss, in ``parameters()`` order."""
    if cache.version != model.version:
        raise ContractError(
            f"stale forward cache (cache version {cache.version}, model version {model.version})"
        )
    g = np.asarray(dlogits, dtype=np.float64)
    if g.shape != cache.logits.shape:
        raise ShapeError(f"upstream gradient {g.shape} does not match logits {cache.logits.shape}")
    grads: list[np.ndarray] = []
    for k in range(len(model.weights) - 1, -1, -1):
        gw = g.T @ cache.inputs[k]
        gb = g.sum(axis=0)
        if k == len(model.weights) - 1 and not model.final_bias:
            gb = np.zeros_like(gb)
        grads += [gb, gw]
        if k:
            g = g @ model.weights[k]
            g = g * _activate_grad(model.activation, cache.pre[k - 1], cache.inputs[k])
    return grads[::-1]


@dataclass
class OptimizerState:
    buffers: list[np.ndarray]
    base_lr: float
    epochs: int
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0 or self.base_lr <= 0 or self.epochs < 1:
            raise ValueError("need weight_decay >= 0, base_lr > 0 and epochs >= 1")

    @classmethod
    def for_model(cls, model: MlpModel, base_lr: float, epochs: int, momentum: float = 0.9,
                  weight_decay: float = 0.0) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in model.parameters()], base_lr, epochs, momentum, weight_decay)


def lr_at(epoch: int, opt: OptimizerState) -> float:
    """Cosine-annealed learning rate for a 0-based epoch index."""
    if not 0 <= epoch < opt.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {opt.epochs})")
    return opt.base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / opt.epochs))


def sgd_step(model: MlpModel, grads: Sequence[np.ndarray], opt: OptimizerState, lr: float) -> None:
    params = model.parameters()
    if len(grads) != len(params) or len(opt.buffers) != len(params):
        raise ShapeError("gradient/buffer count does not match the parameter count")
    frozen_bias = len(params) - 1 if not model.final_bias else -1
    for k, (p, g, buf) in enumerate(zip(params, grads, opt.buffers)):
        if buf.shape != p.shape:
            raise ShapeError(f"momentum buffer {buf.shape} does not mirror parameter {p.shape}")
        if k == frozen_bias:
            continue
        d = g + opt.weight_decay * p if opt.weight_decay else g
        buf *= opt.momentum
        buf += d
        if lr:
            p -= lr * buf
    model.version += 1


def backward_and_step(model: MlpModel, cache: ForwardCache, dlogits: np.ndarray,
                      opt: OptimizerState, lr: float) -> list[np.ndarray]:
    """Backprop ``dlogits`` and apply one momentum-SGD step in place. Returns the gradients."""
    if lr < 0:
        raise ValueError("learning rate must be nonnegative")
    grads = gradients(model, cache, dlogits)
    sgd_step(model, grads, opt, lr)
    return grads


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    s = z - z.max(axis=axis, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))
