"""Self-training PLL strategies: confidence-weight updates and weighted losses.

Logits arrive as ``(B, C)`` arrays, or ``(V, B, C)`` for CORR where ``V`` is
the number of augmented views. Candidate masks are boolean ``(B, C)``.

Per-sample losses (``ce`` is softmax cross-entropy, ``sp`` is softplus, i.e. the
logistic loss of a negated logit):

    PRODEN, CAVL   sum_j w_j ce_j(z)
    LW             sum_{j in S} w_j ce_j(z) + beta * sum_{j not in S} u_j sp(z_j)
    CORR           lam * KL(w || softmax(z)) + sum_{j not in S} sp(z_j)

``negative_loss="complement"`` swaps ``sp(z_j)`` for ``-log(1 - softmax_j(z))``
and ``corr_kl="p||w"`` evaluates the divergence as ``KL(softmax(z) || w)``.

Batch losses are means over samples (and over views for CORR).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nncore import ContractError, log_softmax, softmax

STRATEGIES = ("PRODEN", "LW", "CAVL", "CORR")
NEGATIVE_LOSSES = ("logistic", "complement")
KL_ORDERS = ("w||p", "p||w")
_SUM_TOL = 1e-9
_TIE_TOL = 1e-12


@dataclass(frozen=True)
class StrategyConfig:
    strategy: str = "PRODEN"
    beta: float = 1.0
    lam: float = 1.0
    corr_views: int = 2
    corr_noise_sigma: float = 0.1
    weight_floor: float = 1e-8
    cavl_on_logits: bool = False
    corr_kl: str = "w||p"
    negative_loss: str = "logistic"

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.beta < 0 or self.lam < 0:
            raise ValueError("beta and lam must be nonnegative")
        if self.corr_views < 2:
            raise ValueError("CORR needs at least two views")
        if self.weight_floor <= 0:
            raise ValueError("weight_floor must be positive")
        if self.corr_kl not in KL_ORDERS:
            raise ValueError(f"corr_kl must be one of {KL_ORDERS}")
        if self.negative_loss not in NEGATIVE_LOSSES:
            raise ValueError(f"negative_loss must be one of {NEGATIVE_LOSSES}")

    @property
    def num_views(self) -> int:
        return self.corr_views if self.strategy == "CORR" else 1


@dataclass
class ConfidenceWeights:
    strategy: str
    w: np.ndarray  # (N, C), zero outside the candidate set
    w_non: np.ndarray | None = None  # LW only, zero inside the candidate set


def _masked_softmax(z: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over the True entries of ``mask`` per row; zero elsewhere. Empty rows stay zero."""
    s = np.where(mask, z, -np.inf)
    top = s.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(mask, np.exp(s - top), 0.0)
    tot = e.sum(axis=-1, keepdims=True)
    return np.divide(e, tot, out=np.zeros_like(e), where=tot > 0)


def _check_mask(S: np.ndarray) -> np.ndarray:
    S = np.asarray(S, dtype=bool)
    if S.ndim == 1:
        S = S[None, :]
    if not S.any(axis=1).all():
        raise ContractError("empty candidate set")
    return S


def init_weights(candidates: np.ndarray, strategy: str = "PRODEN") -> ConfidenceWeights:
    S = _check_mask(candidates)
    w = S / S.sum(axis=1, keepdims=True)
    w_non = None
    if strategy == "LW":
        comp = ~S
        n = comp.sum(axis=1, keepdims=True)
        w_non = np.divide(comp, n, out=np.zeros(S.shape), where=n > 0)
    return ConfidenceWeights(strategy, w.astype(np.float64), w_non)


def update_weights(
    strategy: str, z: np.ndarray, S: np.ndarray, cfg: StrategyConfig | None = None
) -> tuple[np.ndarray, np.ndarray | None]:
    """New weight rows for a batch. Returns ``(w, w_non)``; ``w_non`` is None except for LW.

    ``z`` is the (possibly debiased) disambiguation logits; for CORR it holds one
    slice per view.
    """
    cfg = cfg or StrategyConfig(strategy=strategy)
    S = _check_mask(S)
    z = np.asarray(z, dtype=np.float64)

    if strategy == "PRODEN":
        return _masked_softmax(z, S), None
    if strategy == "LW":
        return _masked_softmax(z, S), _masked_softmax(z, ~S)
    if strategy == "CAVL":
        v = z if cfg.cavl_on_logits else softmax(z)
        score = np.where(S, np.abs(v - 1.0) * v, -np.inf)
        # p(1-p) ties exactly for complementary probabilities (e.g. two candidates
        # holding all the mass), so scores within rounding of the best count as
        # tied and the lowest class index wins
        best = score.max(axis=1, keepdims=True)
        tied = score >= best - _TIE_TOL * np.maximum(1.0, np.abs(best))
        w = np.zeros_like(z)
        w[np.arange(z.shape[0]), np.argmax(tied, axis=1)] = 1.0
        return w, None
    if strategy == "CORR":
        if z.ndim != 3 or z.shape[0] < 2:
            raise ContractError("CORR needs per-view logits shaped (V>=2, B, C)")
        # geometric mean of exp(z) over views is exp(mean z); normalising over all
        # classes and then over S is the same as a softmax restricted to S
        return _masked_softmax(z.mean(axis=0), S), None
    raise ValueError(f"unknown strategy {strategy!r}")


def check_weights(strategy: str, w: np.ndarray, S: np.ndarray, w_non: np.ndarray | None = None) -> None:
    S = _check_mask(S)
    if np.any(w < 0) or np.any(w[~S] != 0):
        raise ContractError(f"{strategy}: candidate weights must be nonnegative and vanish outside S")
    if np.any(np.abs(w.sum(axis=1) - 1.0) > _SUM_TOL):
        raise ContractError(f"{strategy}: candidate weight rows must sum to 1")
    if strategy == "CAVL" and np.any(np.count_nonzero(w, axis=1) != 1):
        raise ContractError("CAVL weights must be one-hot")
    if strategy == "LW":
        if w_non is None:
            raise ContractError("LW needs non-candidate weights")
        if np.any(w_non < 0) or np.any(w_non[S] != 0):
            raise ContractError("LW: non-candidate weights must vanish on S")
        has_comp = (~S).any(axis=1)
        if np.any(np.abs(w_non.sum(axis=1)[has_comp] - 1.0) > _SUM_TOL):
            raise ContractError("LW: non-candidate weight rows must sum to 1")


def _softplus(v: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, v)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -v))


def _negative_term(z: np.ndarray, p: np.ndarray, u: np.ndarray, kind: str) -> tuple[np.ndarray, np.ndarray]:
    """Loss ``sum_j u_j l_neg(z)_j`` and its gradient for non-candidate weights ``u``."""
    if kind == "logistic":
        return (u * _softplus(z)).sum(axis=1), u * _sigmoid(z)
    # -log(1 - p_j); log(1 - p_j) = logsumexp_{k != j} z_k - logsumexp z
    C = z.shape[1]
    off = np.where(np.eye(C, dtype=bool)[None], -np.inf, z[:, None, :])
    top = z.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(z - top).sum(axis=1))
    lse_wo = top + np.log(np.exp(off - top[:, :, None]).sum(axis=2))
    nl = lse[:, None] - lse_wo
    # d/dz_k -log(1 - p_j) = p_j / (1 - p_j) * (delta_jk - p_k)
    r = np.where(u > 0, u * np.expm1(nl), 0.0)
    return (u * nl).sum(axis=1), r - p * r.sum(axis=1, keepdims=True)


def _per_sample(strategy: str, z: np.ndarray, w: np.ndarray, S: np.ndarray,
                w_non: np.ndarray | None, cfg: StrategyConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample loss ``(B,)`` and its gradient ``(B, C)`` for one view."""
    logp = log_softmax(z)
    p = np.exp(logp)
    if strategy in ("PRODEN", "CAVL", "LW"):
        wc = np.where(S, w, 0.0) if strategy == "LW" else w
        loss = -(wc * logp).sum(axis=1)
        grad = wc.sum(axis=1, keepdims=True) * p - wc
        if strategy == "LW" and cfg.beta:
            u = np.where(S, 0.0, w_non)
            nl, ng = _negative_term(z, p, u, cfg.negative_loss)
            loss = loss + cfg.beta * nl
            grad = grad + cfg.beta * ng
        return loss, grad
    # CORR
    loss, grad = _negative_term(z, p, (~S).astype(np.float64), cfg.negative_loss)
    if cfg.lam:
        logw = np.log(np.maximum(w, cfg.weight_floor))
        if cfg.corr_kl == "w||p":
            wl = np.where(w > 0, w * np.log(np.where(w > 0, w, 1.0)), 0.0)
            kl = wl.sum(axis=1) - (w * logp).sum(axis=1)
            dkl = w.sum(axis=1, keepdims=True) * p - w
        else:
            # KL(softmax(z) || w)
            a = logp - logw
            kl = (p * a).sum(axis=1)
            dkl = p * (a - kl[:, None])
        loss = loss + cfg.lam * kl
        grad = grad + cfg.lam * dkl
    return loss, grad


def strategy_loss(
    strategy: str,
    z: np.ndarray,
    w: np.ndarray,
    S: np.ndarray,
    cfg: StrategyConfig | None = None,
    w_non: np.ndarray | None = None,
    validate: bool = True,
) -> tuple[float, np.ndarray]:
    """Mean weighted loss over the batch and its exact gradient w.r.t. ``z``.

    Weights are constants here. For CORR, ``z`` may be ``(V, B, C)`` and the loss
    is also averaged over views; the gradient has the same shape as ``z``.
    """
    cfg = cfg or StrategyConfig(strategy=strategy)
    S = _check_mask(S)
    if validate:
        check_weights(strategy, w, S, w_non)
    z = np.asarray(z, dtype=np.float64)
    views = z if z.ndim == 3 else z[None]
    V, B = views.shape[0], views.shape[1]
    total = 0.0
    grads = np.empty_like(views)
    for v in range(V):
        loss, g = _per_sample(strategy, views[v], w, S, w_non, cfg)
        total += loss.sum()
        grads[v] = g / (V * B)
    return float(total / (V * B)), (grads if z.ndim == 3 else grads[0])
