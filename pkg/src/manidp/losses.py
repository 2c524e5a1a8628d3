"""Loss terms for training the dynamic network.

Four ingredients: per-instance adaptive sparsity (easy instances get their
saliencies pushed toward zero, hard ones are left alone), a manifold
consistency term that makes similar inputs pick similar sub-networks,
cross-entropy, and an optional static group-lasso baseline.

Instance difficulty is judged against the complexity threshold C, the mean
cross-entropy of the previous epoch. The sparsity coefficient lambda(x) is
computed from the current CE value and treated as a constant: no gradient
flows through the coefficient into the CE term.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from manidp import autograd as ag
from manidp.autograd import ShapeError, Tensor
from manidp.network import ForwardTrace


@dataclass
class ComplexityState:
    """Complexity threshold plus the accumulators that refresh it each epoch.

    ``adaptive`` selects per-instance coefficients; when False every
    instance gets the fixed coefficient ``lambda_prime`` (the ablation
    mode without complexity awareness).
    """

    C: float
    lambda_prime: float
    gamma: float
    epoch_ce_sum: float = 0.0
    epoch_ce_count: int = 0
    adaptive: bool = True

    def __post_init__(self):
        if self.C <= 0:
            raise ValueError(f"complexity threshold C must be positive, got {self.C}")
        if self.lambda_prime < 0:
            raise ValueError(f"lambda_prime must be >= 0, got {self.lambda_prime}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")

    def accumulate(self, ce_values: np.ndarray) -> None:
        ce_values = np.asarray(ce_values, dtype=np.float64)
        self.epoch_ce_sum += float(ce_values.sum())
        self.epoch_ce_count += int(ce_values.size)


@dataclass
class LossBreakdown:
    """Total objective plus its three components (all scalar tensors)."""

    total: Tensor
    cross_entropy: Tensor
    sparsity: Tensor
    similarity: Tensor
    lambdas: np.ndarray


def initial_complexity(num_classes: int) -> float:
    """Chance-level cross-entropy ln(K): the threshold before any epoch mean exists."""
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    return math.log(num_classes)


# -- instance complexity ----------------------------------------------------------


def instance_beta(ce: float, C: float) -> int:
    """1 if the instance is simple enough to sparsify (ce <= C), else 0."""
    if ce < 0:
        raise ValueError(f"cross-entropy must be >= 0, got {ce}")
    if C <= 0:
        raise ValueError(f"complexity threshold must be positive, got {C}")
    return 1 if ce <= C else 0


def instance_lambda(ce: float, C: float, lambda_prime: float) -> float:
    """Per-instance sparsity coefficient lambda' * beta * (C - ce) / C, in [0, lambda']."""
    if lambda_prime < 0:
        raise ValueError(f"lambda_prime must be >= 0, got {lambda_prime}")
    beta = instance_beta(ce, C)
    # ratio lands in [0, 1] exactly; dividing first keeps the product <= lambda_prime
    ratio = (C - ce) / C
    return lambda_prime * beta * ratio


def per_instance_lambdas(ce_values: np.ndarray, state: ComplexityState) -> np.ndarray:
    """Detached coefficient per instance; constant ``lambda_prime`` when not adaptive."""
    ce_values = np.asarray(ce_values, dtype=np.float64)
    if not state.adaptive:
        return np.full(ce_values.shape, state.lambda_prime)
    return np.array([instance_lambda(float(ce), state.C, state.lambda_prime) for ce in ce_values])


# -- sparsity ----------------------------------------------------------------------


def sparsity_loss(trace: ForwardTrace, per_lambda: Sequence[float]) -> Tensor:
    """sum_b lambda_b * sum_l ||pi^l(x_b)||_1 over raw pre-gate saliencies.

    Saliencies are nonnegative, so the l1 norm is a plain sum. The
    coefficients are constants; gradients flow only into the saliencies.
    """
    lam = np.asarray(per_lambda, dtype=np.float64)
    batch = trace.saliencies[0].shape[0] if trace.saliencies else 0
    if lam.ndim != 1 or lam.shape[0] != batch:
        raise ShapeError(
            f"per-instance coefficients have shape {lam.shape} but the batch size is {batch}"
        )
    if not np.any(lam):
        dtype = trace.saliencies[0].dtype if trace.saliencies else np.float32
        return Tensor(np.zeros((), dtype=dtype))
    total: Optional[Tensor] = None
    for saliency in trace.saliencies:
        weights = Tensor(lam.astype(saliency.dtype))
        term = (saliency.sum(axis=1) * weights).sum()
        total = term if total is None else total + term
    return total


# -- similarity --------------------------------------------------------------------


def _cosine_matrix(rows: Tensor) -> Tensor:
    """Pairwise cosine similarities of the rows, denominator guarded by EPS."""
    if rows.data.ndim != 2:
        raise ShapeError(f"similarity needs a 2-D [B, c] tensor, got {rows.shape}")
    if rows.shape[0] < 2:
        raise ValueError(f"similarity needs at least 2 rows, got {rows.shape[0]}")
    dots = ag.matmul(rows, ag.transpose(rows))
    norms = ag.sqrt((rows * rows).sum(axis=1, keepdims=True))
    denom = ag.matmul(norms, ag.transpose(norms))
    return dots / denom


def saliency_similarity(saliencies: Tensor) -> Tensor:
    """T = cosine similarities between instances' raw saliency vectors, [B, B]."""
    return _cosine_matrix(saliencies)


def feature_similarity(pooled_features: Tensor) -> Tensor:
    """R = cosine similarities between instances' pooled feature vectors, [B, B]."""
    return _cosine_matrix(pooled_features)


def similarity_loss(saliency_sims: Sequence[Tensor], feature_sims: Sequence[Tensor]) -> Tensor:
    """sum_l sqrt(sum_ij (T^l - R^l)^2 / B^2).

    Frobenius distance per layer with 1/B^2 normalization inside the root
    so the magnitude does not scale with batch size; the square root's
    adjoint is EPS-guarded at zero.
    """
    if len(saliency_sims) != len(feature_sims):
        raise ShapeError(
            f"{len(saliency_sims)} saliency matrices vs {len(feature_sims)} feature matrices"
        )
    if not saliency_sims:
        raise ShapeError("similarity_loss needs at least one layer")
    total: Optional[Tensor] = None
    for t, r in zip(saliency_sims, feature_sims):
        if t.shape != r.shape:
            raise ShapeError(f"similarity matrices disagree: {t.shape} vs {r.shape}")
        b = t.shape[0]
        diff = t - r
        term = ag.sqrt((diff * diff).sum() * (1.0 / (b * b)))
        total = term if total is None else total + term
    return total


# -- total objective ----------------------------------------------------------------


def attach_cross_entropy(trace: ForwardTrace, labels: np.ndarray) -> Tensor:
    """Compute per-instance CE from the trace's logits and store it on the trace."""
    trace.ce_per_instance = ag.softmax_cross_entropy(trace.logits, labels)
    return trace.ce_per_instance


def total_loss(
    trace: ForwardTrace, state: ComplexityState, labels: Optional[np.ndarray] = None
) -> LossBreakdown:
    """Mean CE + adaptive sparsity + gamma * similarity, with the breakdown.

    Zero-weighted components are skipped entirely (their gradient
    contribution would be identically zero), which keeps the vanilla and
    ablation modes cheap.
    """
    if trace.ce_per_instance is None:
        if labels is None:
            raise ValueError("trace carries no cross-entropy; pass labels to attach it")
        attach_cross_entropy(trace, labels)
    ce = trace.ce_per_instance
    ce_mean = ce.mean()
    lambdas = per_instance_lambdas(ce.data, state)
    sparsity = sparsity_loss(trace, lambdas)

    if state.gamma != 0.0:
        t_mats = [saliency_similarity(s) for s in trace.saliencies]
        r_mats = [feature_similarity(p) for p in trace.pooled_features]
        similarity = similarity_loss(t_mats, r_mats)
        total = ce_mean + sparsity + similarity * state.gamma
    else:
        similarity = Tensor(np.zeros((), dtype=ce.dtype))
        total = ce_mean + sparsity
    return LossBreakdown(
        total=total,
        cross_entropy=ce_mean,
        sparsity=sparsity,
        similarity=similarity,
        lambdas=lambdas,
    )


# -- static baseline and epoch bookkeeping -------------------------------------------


def group_lasso(weight: Tensor) -> Tensor:
    """l2,1 norm over output filters: sum_j ||vec(W[j])||_2."""
    if weight.data.ndim != 4:
        raise ShapeError(f"group_lasso expects a 4-D conv weight, got {weight.shape}")
    sq = (weight * weight).sum(axis=(1, 2, 3))
    return ag.sqrt(sq).sum()


def update_complexity_threshold(state: ComplexityState) -> float:
    """Set C to the finished epoch's mean CE and reset the accumulators."""
    if state.epoch_ce_count == 0:
        raise ValueError("cannot update complexity threshold: no cross-entropy accumulated")
    state.C = state.epoch_ce_sum / state.epoch_ce_count
    state.epoch_ce_sum = 0.0
    state.epoch_ce_count = 0
    return state.C
