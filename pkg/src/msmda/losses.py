"""Loss components for multi-branch adaptation training.

Kernel MMD between source and target feature batches, summed per-branch
classification cross-entropy, pairwise L1 discrepancy between the branches'
target predictions, the sigmoid ramp for the adaptation weight, and the
weighted total. Every loss returns its value together with analytic
gradients w.r.t. its matrix inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ShapeError, ValidationError
from .neuralcore import as_matrix, softmax_cross_entropy

KERNEL_KINDS = ("rbf_multiscale", "rbf_fixed", "linear")


@dataclass(frozen=True)
class KernelSpec:
    """Kernel used by the MMD estimator.

    ``rbf_multiscale`` averages ``num_scales`` Gaussian kernels
    exp(-d^2 / b) whose divisors ``b`` are geometrically spaced by
    ``scale_step`` around the median pairwise squared distance of the joint
    batch (resolved per call unless ``bandwidths`` pins them explicitly).
    ``rbf_fixed`` is exp(-d^2 / (2 * fixed_bandwidth)) with
    ``fixed_bandwidth`` = sigma^2. ``linear`` is the plain dot product.
    """

    kind: str = "rbf_multiscale"
    num_scales: int = 5
    scale_step: float = 2.0
    fixed_bandwidth: float = 1.0
    bandwidths: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValidationError(f"unknown kernel kind {self.kind!r}")
        if self.num_scales < 1:
            raise ValidationError("num_scales must be >= 1")
        if self.scale_step <= 0:
            raise ValidationError("scale_step must be positive")
        if self.fixed_bandwidth <= 0:
            raise ValidationError("fixed_bandwidth must be positive")
        if self.bandwidths is not None and any(b <= 0 for b in self.bandwidths):
            raise ValidationError("all bandwidths must be positive")

    def resolve(self, source, target) -> "KernelSpec":
        """Pin multiscale bandwidths from the data via the median heuristic.

        The returned spec is constant w.r.t. its inputs, which keeps the
        analytic gradients consistent (the bandwidth is treated as a
        stop-gradient, as is standard for the median heuristic).
        """
        if self.kind != "rbf_multiscale" or self.bandwidths is not None:
            return self
        s = np.asarray(source, dtype=np.float64)
        t = np.asarray(target, dtype=np.float64)
        median = _joint_median(
            _pairwise_sq_dists(s, s), _pairwise_sq_dists(t, t), _pairwise_sq_dists(s, t)
        )
        return replace(self, bandwidths=self._spread(median))

    def _spread(self, base: float) -> tuple[float, ...]:
        center = (self.num_scales - 1) / 2.0
        return tuple(base * self.scale_step ** (i - center) for i in range(self.num_scales))


@dataclass(frozen=True)
class LossBreakdown:
    """Unweighted loss components plus the weights that formed the total."""

    cls: float
    mmd: float
    disc: float
    total: float
    alpha: float
    beta: float


def _pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sq = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(sq, 0.0)


def _joint_median(d_ss, d_tt, d_st) -> float:
    """Median pairwise squared distance of the stacked source+target batch."""
    iu_s = np.triu_indices(d_ss.shape[0], k=1)
    iu_t = np.triu_indices(d_tt.shape[0], k=1)
    values = np.concatenate([d_ss[iu_s], d_tt[iu_t], d_st.ravel()])
    median = float(np.median(values)) if values.size else 0.0
    return median if median > 0.0 else 1.0


def _rbf_block(d2, a, b, divisors, coeff, grad_a, grad_b):
    """Accumulate coeff * mean_scales sum_{i,j} exp(-|a_i - b_j|^2 / div).

    ``d2`` is the precomputed squared-distance matrix for (a, b). The value
    sums plain kernels; the gradient needs the extra 1/div factor, so both
    weighted kernel matrices are formed and the matmuls run once per block.
    """
    value_k = np.zeros_like(d2)
    grad_k = np.zeros_like(d2)
    for div in divisors:
        e = np.exp(-d2 / div)
        value_k += e
        grad_k += e / div
    scale = coeff * (-2.0 / len(divisors))
    grad_a += scale * (grad_k.sum(axis=1, keepdims=True) * a - grad_k @ b)
    grad_b += scale * (grad_k.sum(axis=0)[:, None] * b - grad_k.T @ a)
    return coeff * float(value_k.sum()) / len(divisors)


def mmd_squared(source, target, kernel: KernelSpec | None = None):
    """Biased (V-statistic) squared MMD between two sample matrices.

    Implements mean(K_ss) + mean(K_tt) - 2 mean(K_st) over all pairs,
    diagonal included. Returns (value, grad_source, grad_target); tiny
    negative values from roundoff are clamped to zero.
    """
    kernel = kernel or KernelSpec()
    source = as_matrix(source, "source", require_finite=False)
    target = as_matrix(target, "target", require_finite=False)
    if source.shape[0] == 0 or target.shape[0] == 0:
        raise ValidationError("mmd requires nonempty source and target")
    if source.shape[1] != target.shape[1]:
        raise ShapeError(
            f"source shape {source.shape} and target shape {target.shape} "
            "differ in feature dimension"
        )
    n, m = source.shape[0], target.shape[0]
    grad_s = np.zeros_like(source)
    grad_t = np.zeros_like(target)

    if kernel.kind == "linear":
        # k(x, y) = x . y, so MMD^2 = |mean(source) - mean(target)|^2
        diff = source.mean(axis=0) - target.mean(axis=0)
        value = float(diff @ diff)
        grad_s += (2.0 / n) * diff
        grad_t -= (2.0 / m) * diff
        return max(value, 0.0), grad_s, grad_t

    d_ss = _pairwise_sq_dists(source, source)
    d_tt = _pairwise_sq_dists(target, target)
    d_st = _pairwise_sq_dists(source, target)
    if kernel.kind == "rbf_fixed":
        divisors = [2.0 * kernel.fixed_bandwidth]
    elif kernel.bandwidths is not None:
        divisors = list(kernel.bandwidths)
    else:
        divisors = list(kernel._spread(_joint_median(d_ss, d_tt, d_st)))

    value = _rbf_block(d_ss, source, source, divisors, 1.0 / (n * n), grad_s, grad_s)
    value += _rbf_block(d_tt, target, target, divisors, 1.0 / (m * m), grad_t, grad_t)
    value += _rbf_block(d_st, source, target, divisors, -2.0 / (n * m), grad_s, grad_t)
    return max(value, 0.0), grad_s, grad_t


def classification_loss(branch_logits, branch_labels):
    """Sum over branches of per-branch mean cross-entropy.

    Returns (value, grads) where grads[i] is w.r.t. branch i's logits.
    """
    if len(branch_logits) != len(branch_labels):
        raise ValidationError(
            f"{len(branch_logits)} logit matrices vs {len(branch_labels)} label vectors"
        )
    if not branch_logits:
        raise ValidationError("classification loss requires at least one branch")
    total = 0.0
    grads = []
    for logits, labels in zip(branch_logits, branch_labels):
        loss, grad = softmax_cross_entropy(logits, labels)
        total += loss
        grads.append(grad)
    return total, grads


def discrepancy_loss(branch_target_probs):
    """Mean absolute difference of branch predictions over unordered pairs.

    Each matrix holds one branch's softmax outputs for the same target
    batch. For each pair (i, j) the elementwise |P_i - P_j| is averaged over
    entries, then averaged over pairs; a single branch gives 0. Subgradient
    is 0 where entries tie.
    """
    mats = [
        as_matrix(p, f"branch {i} probs", require_finite=False)
        for i, p in enumerate(branch_target_probs)
    ]
    if not mats:
        raise ValidationError("discrepancy loss requires at least one branch")
    shape = mats[0].shape
    for i, p in enumerate(mats):
        if p.shape != shape:
            raise ShapeError(f"branch {i} shape {p.shape} != branch 0 shape {shape}")
    grads = [np.zeros_like(p) for p in mats]
    n = len(mats)
    if n == 1:
        return 0.0, grads
    num_pairs = n * (n - 1) // 2
    entries = shape[0] * shape[1]
    scale = 1.0 / (num_pairs * entries)
    value = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            diff = mats[i] - mats[j]
            value += float(np.abs(diff).sum()) * scale
            sign = np.sign(diff) * scale
            grads[i] += sign
            grads[j] -= sign
    return value, grads


def alpha_schedule(epoch_index: int, total_epochs: int) -> float:
    """Sigmoid ramp 2 / (1 + exp(-10 i / E)) - 1, zero at i = 0."""
    if total_epochs < 1:
        raise ValidationError(f"total_epochs must be >= 1, got {total_epochs}")
    if not 0 <= epoch_index <= total_epochs:
        raise ValidationError(
            f"epoch_index {epoch_index} outside [0, {total_epochs}]"
        )
    return 2.0 / (1.0 + math.exp(-10.0 * epoch_index / total_epochs)) - 1.0


def total_loss(cls: float, mmd: float, disc: float, alpha: float, beta: float) -> LossBreakdown:
    """Weighted total cls + alpha * mmd + beta * disc; components stored raw."""
    for name, v in (("cls", cls), ("mmd", mmd), ("disc", disc),
                    ("alpha", alpha), ("beta", beta)):
        if not math.isfinite(v):
            raise ValidationError(f"non-finite {name} component: {v}")
    return LossBreakdown(
        cls=float(cls),
        mmd=float(mmd),
        disc=float(disc),
        total=float(cls + alpha * mmd + beta * disc),
        alpha=float(alpha),
        beta=float(beta),
    )
