"""Synthetic long-tailed partial-label worlds.

Two worlds are available: ``toy2d`` (four uniform unit squares tiling
[-1, 1]^2) and ``gaussian_clusters`` (isotropic clusters on a scaled simplex).
Training sets follow an exponential class-count decay; test sets are balanced.
Each training sample carries a candidate mask that always contains its true
label. True labels are kept out of :class:`PartialView`, the object handed to
training code.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

WORLDS = ("toy2d", "gaussian_clusters")
CANDIDATE_MODES = ("uniform", "nonuniform")

# lower-left corners of the toy squares, one per class
TOY_SQUARES = ((-1.0, -1.0), (0.0, -1.0), (-1.0, 0.0), (0.0, 0.0))
TOY_COUNTS = (1000, 500, 100, 30)
TOY_FLIP = 0.6
SUPERCLASS_BOOST = 8.0


class ConfigError(ValueError):
    """Generator or experiment configuration is invalid."""


@dataclass(frozen=True)
class GeneratorConfig:
    world: str = "toy2d"
    C: int = 4
    n_max: int = 1000
    imbalance_ratio: float = 1000 / 30
    candidate_mode: str = "uniform"
    q: float = TOY_FLIP
    superclass_size: int = 5
    feature_dim: int = 2
    cluster_separation: float = 5.0
    test_per_class: int = 100
    seed: int = 0

    def __post_init__(self) -> None:
        if self.world not in WORLDS:
            raise ConfigError(f"world must be one of {WORLDS}, got {self.world!r}")
        if self.candidate_mode not in CANDIDATE_MODES:
            raise ConfigError(f"candidate_mode must be one of {CANDIDATE_MODES}, got {self.candidate_mode!r}")
        if not 0.0 <= self.q < 1.0:
            raise ConfigError(f"q must lie in [0, 1), got {self.q}")
        if self.candidate_mode == "nonuniform":
            if SUPERCLASS_BOOST * self.q >= 1.0:
                raise ConfigError(f"nonuniform mode needs 8q < 1, got q={self.q}")
            if self.superclass_size < 1:
                raise ConfigError("superclass_size must be positive")
        if self.imbalance_ratio < 1.0:
            raise ConfigError(f"imbalance_ratio must be >= 1, got {self.imbalance_ratio}")
        if self.C < 1 or self.n_max < 1 or self.test_per_class < 1:
            raise ConfigError("C, n_max and test_per_class must be positive")
        if self.world == "toy2d" and (self.C != 4 or self.feature_dim != 2):
            raise ConfigError("toy2d is fixed at C=4 classes in 2 dimensions")
        if self.world == "gaussian_clusters" and self.feature_dim < self.C:
            raise ConfigError(f"gaussian_clusters needs feature_dim >= C ({self.feature_dim} < {self.C})")

    @classmethod
    def toy(cls, seed: int = 0, **overrides) -> "GeneratorConfig":
        return cls(world="toy2d", seed=seed, **overrides)

    def superclass_map(self) -> np.ndarray:
        """Consecutive blocks of ``superclass_size`` classes share a superclass."""
        return np.arange(self.C) // self.superclass_size

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown generator fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class PartialView:
    """What a PLL learner may see: features and candidate masks only."""

    features: np.ndarray
    candidates: np.ndarray

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def num_classes(self) -> int:
        return self.candidates.shape[1]


@dataclass(frozen=True)
class PartialDataset:
    features: np.ndarray  # (N, d) float64
    candidates: np.ndarray  # (N, C) bool
    counts: np.ndarray  # (C,) per-class sample counts
    eta: float
    config: GeneratorConfig
    _labels: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def num_classes(self) -> int:
        return self.candidates.shape[1]

    def view(self) -> PartialView:
        return PartialView(self.features, self.candidates)

    def oracle_labels(self) -> np.ndarray:
        """Ground-truth labels. Evaluation/harness use only."""
        return self._labels


@dataclass(frozen=True)
class LabeledSet:
    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.features.shape[0]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def longtail_counts(C: int, n_max: int, rho: float) -> list[int]:
    """Exponentially decaying class sizes from ``n_max`` down to ``n_max / rho``."""
    if C < 2:
        raise ConfigError(f"need at least two classes, got C={C}")
    if not 1.0 <= rho <= n_max:
        raise ConfigError(f"need 1 <= rho <= n_max, got rho={rho}, n_max={n_max}")
    counts = [_round_half_up(n_max * rho ** (-c / (C - 1))) for c in range(C)]
    if min(counts) < 1:
        raise ConfigError(f"counts {counts} leave a class empty")
    return counts


def flip_probabilities(y: int, cfg: GeneratorConfig) -> np.ndarray:
    """Per-class inclusion probability for a sample of class ``y`` (1 at ``y``)."""
    p = np.full(cfg.C, cfg.q)
    if cfg.candidate_mode == "nonuniform":
        sup = cfg.superclass_map()
        p[sup == sup[y]] = SUPERCLASS_BOOST * cfg.q
    p[y] = 1.0
    return p


def gen_candidates(y: int, cfg: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    """Candidate mask for one sample: the true label plus independent Bernoulli flips."""
    if not 0 <= y < cfg.C:
        raise ConfigError(f"label {y} outside [0, {cfg.C})")
    mask = rng.random(cfg.C) < flip_probabilities(y, cfg)
    mask[y] = True
    return mask


def _candidate_matrix(labels: np.ndarray, cfg: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    probs = np.full((labels.size, cfg.C), cfg.q)
    if cfg.candidate_mode == "nonuniform":
        sup = cfg.superclass_map()
        probs[sup[labels][:, None] == sup[None, :]] = SUPERCLASS_BOOST * cfg.q
    mask = rng.random(probs.shape) < probs
    mask[np.arange(labels.size), labels] = True
    return mask


def analytic_ambiguity(cfg: GeneratorConfig) -> float:
    """Largest probability that a fixed wrong label lands in the candidate set."""
    if cfg.candidate_mode == "nonuniform":
        eta = SUPERCLASS_BOOST * cfg.q if cfg.superclass_size > 1 else cfg.q
    else:
        eta = cfg.q
    if eta >= 1.0:
        raise ConfigError(f"ambiguity degree {eta} violates eta < 1")
    return float(eta)


def class_counts(cfg: GeneratorConfig) -> list[int]:
    if cfg.world == "toy2d":
        return list(TOY_COUNTS)
    if cfg.C == 1:
        return [cfg.n_max]
    return longtail_counts(cfg.C, cfg.n_max, cfg.imbalance_ratio)


def _cluster_centers(cfg: GeneratorConfig) -> np.ndarray:
    # scaled basis vectors: every pair sits exactly cluster_separation apart
    centers = np.zeros((cfg.C, cfg.feature_dim))
    centers[np.arange(cfg.C), np.arange(cfg.C)] = cfg.cluster_separation / math.sqrt(2.0)
    return centers


def _sample_features(labels: np.ndarray, cfg: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.world == "toy2d":
        corners = np.asarray(TOY_SQUARES)[labels]
        return corners + rng.random((labels.size, 2))
    centers = _cluster_centers(cfg)
    return centers[labels] + rng.standard_normal((labels.size, cfg.feature_dim))


def synth_dataset(cfg: GeneratorConfig) -> tuple[PartialDataset, LabeledSet]:
    """Draw a long-tailed partially-labeled training set and a balanced test set.

    Pure function of ``cfg``: the seed is split into independent streams for
    training features, candidate flips and test features.
    """
    feat_rng, cand_rng, test_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(3))
    counts = np.asarray(class_counts(cfg), dtype=np.int64)
    labels = np.repeat(np.arange(cfg.C), counts)
    features = _sample_features(labels, cfg, feat_rng)
    candidates = _candidate_matrix(labels, cfg, cand_rng)

    test_labels = np.repeat(np.arange(cfg.C), cfg.test_per_class)
    test_features = _sample_features(test_labels, cfg, test_rng)

    if cfg.world == "gaussian_clusters":
        mu = features.mean(axis=0)
        sd = features.std(axis=0)
        sd[sd == 0] = 1.0
        features = (features - mu) / sd
        test_features = (test_features - mu) / sd

    train = PartialDataset(features, candidates, counts, analytic_ambiguity(cfg), cfg, labels)
    return train, LabeledSet(test_features, test_labels)


def empirical_prior(dataset: PartialDataset) -> np.ndarray:
    """Oracle class prior N_c / N from the hidden labels."""
    hist = np.bincount(dataset.oracle_labels(), minlength=dataset.num_classes).astype(np.float64)
    return hist / hist.sum()


# ---------------------------------------------------------------- file formats


def write_dataset(train: PartialDataset, test: LabeledSet, out_dir: str | Path, stem: str = "train") -> dict[str, Path]:
    """Write ``<stem>.jsonl``, ``<stem>.meta.json`` and ``test.jsonl``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"train": out / f"{stem}.jsonl", "meta": out / f"{stem}.meta.json", "test": out / "test.jsonl"}
    with open(paths["train"], "w") as fh:
        for i, (x, mask) in enumerate(zip(train.features, train.candidates)):
            fh.write(json.dumps({"id": i, "x": x.tolist(), "cands": np.flatnonzero(mask).tolist()}) + "\n")
    meta = {
        "C": train.num_classes,
        "counts": train.counts.tolist(),
        "eta": train.eta,
        "cfg": asdict(train.config),
        "oracle_labels": train.oracle_labels().tolist(),
    }
    paths["meta"].write_text(json.dumps(meta, indent=1) + "\n")
    with open(paths["test"], "w") as fh:
        for i, (x, y) in enumerate(zip(test.features, test.labels)):
            fh.write(json.dumps({"id": i, "x": x.tolist(), "y": int(y)}) + "\n")
    return paths


def _read_jsonl(path: Path) -> list[dict]:
    with open(path) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    if [r["id"] for r in rows] != list(range(len(rows))):
        raise ValueError(f"{path}: ids must run 0..N-1 in order")
    return rows


def read_dataset(train_path: str | Path, meta_path: str | Path | None = None) -> PartialDataset:
    train_path = Path(train_path)
    meta_path = Path(meta_path) if meta_path else train_path.with_suffix(".meta.json")
    meta = json.loads(meta_path.read_text())
    rows = _read_jsonl(train_path)
    C = int(meta["C"])
    features = np.asarray([r["x"] for r in rows], dtype=np.float64)
    candidates = np.zeros((len(rows), C), dtype=bool)
    for i, r in enumerate(rows):
        candidates[i, r["cands"]] = True
    labels = np.asarray(meta["oracle_labels"], dtype=np.int64)
    if not candidates[np.arange(len(rows)), labels].all():
        raise ValueError(f"{train_path}: a candidate set misses its oracle label")
    cfg = GeneratorConfig.from_dict(meta["cfg"])
    return PartialDataset(features, candidates, np.asarray(meta["counts"]), float(meta["eta"]), cfg, labels)


def read_labeled(path: str | Path) -> LabeledSet:
    rows = _read_jsonl(Path(path))
    return LabeledSet(
        np.asarray([r["x"] for r in rows], dtype=np.float64),
        np.asarray([r["y"] for r in rows], dtype=np.int64),
    )
