"""Scalar losses: cross-entropy, Earth-Mover distances, and Gaussian MMD.

The differentiable paths (cross_entropy, em_distance_1d, mmd_gaussian) run on
autodiff tensors and support a leading batch axis. The Sinkhorn solver and
the bandwidth heuristic are plain numpy: they are evaluation/verification
paths and hyperparameter plumbing, never backpropagated through.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, softmax


class ConvergenceError(RuntimeError):
    """Raised when Sinkhorn iterations fail to reach the marginal tolerance."""


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def soften(logits, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax of frozen logits along the last axis, in numpy.

    Used for teacher targets and vertex distributions, which never need
    gradients. Higher temperature flattens the distribution; the argmax is
    preserved for any positive temperature.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# -- cross-entropy -------------------------------------------------------------


def cross_entropy(logits, labels) -> Tensor:
    """Negative log softmax probability of the true class.

    ``logits`` is (c,) with an integer label, or (B, c) with an integer array;
    the batched form returns the mean over samples. Differentiable wrt logits.
    """
    logits = _as_tensor(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    c = logits.shape[-1]
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0, {c})")
    z = logits if logits.ndim == 2 else logits.reshape(1, c)
    if labels.size != z.shape[0]:
        raise ValueError(f"{z.shape[0]} rows but {labels.size} labels")
    # log softmax, stabilized by the (constant) row max.
    shift = np.max(z.data, axis=-1, keepdims=True)
    shifted = z - shift
    log_probs = shifted - shifted.exp().sum(axis=-1, keepdims=True).log()
    picked = log_probs[np.arange(labels.size), labels]
    return -picked.sum() * (1.0 / labels.size)


# -- Earth-Mover distance --------------------------------------------------------


def em_distance_1d(mu, eta) -> Tensor:
    """Exact W1 between distributions over unit-spaced class indices.

    Closed form: the sum of |cumulative difference| over the first c-1
    prefixes. Inputs are (..., c); the result drops the last axis (a scalar
    for single distributions, per-pair values for batches). Differentiable
    almost everywhere; at kinks the subgradient is the sign of the cumulative
    sum, zero at exact ties.
    """
    mu, eta = _as_tensor(mu), _as_tensor(eta)
    if mu.shape[-1] != eta.shape[-1]:
        raise ValueError(
            f"distribution lengths disagree: {mu.shape[-1]} vs {eta.shape[-1]}"
        )
    prefix = (mu - eta).cumsum(axis=-1)
    return prefix[..., :-1].abs().sum(axis=-1)


@dataclass(frozen=True)
class GroundCost:
    """Symmetric nonnegative transport cost matrix with a zero diagonal."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        object.__setattr__(self, "matrix", m)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"cost must be square, got {m.shape}")
        if np.any(np.diagonal(m) != 0.0):
            raise ValueError("cost diagonal must be zero")
        if np.any(m < 0):
            raise ValueError("costs must be nonnegative")
        if not np.array_equal(m, m.T):
            raise ValueError("cost must be symmetric")

    @classmethod
    def class_distance(cls, c: int, normalized: bool = True) -> "GroundCost":
        """|i - j| over class indices, divided by c-1 when ``normalized``.

        The normalized form bounds transport costs to [0, 1]; the raw form
        matches the unit-spaced closed form of :func:`em_distance_1d`.
        """
        idx = np.arange(c, dtype=np.float64)
        m = np.abs(idx[:, None] - idx[None, :])
        if normalized and c > 1:
            m = m / (c - 1)
        return cls(m)


def _logsumexp(a, axis):
    hi = np.max(a, axis=axis, keepdims=True)
    hi = np.where(np.isfinite(hi), hi, 0.0)
    with np.errstate(divide="ignore"):
        return np.squeeze(hi, axis) + np.log(np.exp(a - hi).sum(axis=axis))


def _round_to_marginals(plan, mu, eta):
    """Project a near-feasible plan onto exact row/column marginals.

    Scale rows then columns down to their targets, then spread the leftover
    mass as a rank-one correction. Changes the transport cost by at most
    max(cost) times the pre-rounding marginal error.
    """
    rs = plan.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        x = np.where(rs > 0, np.minimum(1.0, mu / rs), 0.0)
    p = plan * x[:, None]
    cs = p.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.where(cs > 0, np.minimum(1.0, eta / cs), 0.0)
    p = p * y[None, :]
    err_r = mu - p.sum(axis=1)
    err_c = eta - p.sum(axis=0)
    total = err_r.sum()
    if total > 1e-15:
        p = p + np.outer(err_r, err_c) / total
    return p


def em_distance_sinkhorn(mu, eta, cost, reg: float, iters: int = 10_000,
                         tol: float = 1e-6) -> float:
    """Entropy-regularized optimal transport cost between two distributions.

    Runs log-domain Sinkhorn scaling with a warm-start schedule that anneals
    the regularizer down to ``reg``, rounds the resulting plan to exact
    marginals, and returns that plan's transport cost. Raises
    :class:`ConvergenceError` if the row marginals are still off by more than
    ``tol`` after ``iters`` iterations at the target regularizer.
    """
    if reg <= 0:
        raise ValueError(f"regularizer must be positive, got {reg}")
    if iters < 1:
        raise ValueError(f"need at least one iteration, got {iters}")
    mu = np.asarray(mu, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    c = GroundCost(cost).matrix if not isinstance(cost, GroundCost) else cost.matrix
    if mu.shape != (c.shape[0],) or eta.shape != (c.shape[0],):
        raise ValueError("distributions must match the cost matrix size")
    if np.max(c) == 0.0:
        return 0.0  # any feasible plan has zero cost

    with np.errstate(divide="ignore"):
        log_mu, log_eta = np.log(mu), np.log(eta)

    def iterate(f, g, r, n_iters, stage_tol):
        plan, err = None, np.inf
        for _ in range(n_iters):
            f = r * (log_mu - _logsumexp((g[None, :] - c) / r, axis=1))
            g = r * (log_eta - _logsumexp((f[:, None] - c) / r, axis=0))
            # After a g-update column marginals are exact; row error measures
            # convergence.
            plan = np.exp((f[:, None] + g[None, :] - c) / r)
            err = np.abs(plan.sum(axis=1) - mu).sum()
            if err < stage_tol:
                break
        return f, g, plan, err

    # Anneal the regularizer from max(cost) scale down to the target, each
    # stage warm-starting the next. At tiny reg, iterations can plateau for
    # exponentially long if a stage change overshoots the new fixpoint, so on
    # a stall the whole schedule restarts with gentler annealing.
    err = np.inf
    for factor in (0.8, 0.9, 0.95, 0.98):
        f = np.zeros_like(mu)
        g = np.zeros_like(eta)
        r = max(np.max(c), reg)
        while r > reg:
            f, g, _, _ = iterate(f, g, r, 100, tol)
            r *= factor
        f, g, plan, err = iterate(f, g, reg, iters, tol)
        if err <= tol:
            break
    if err > tol:
        raise ConvergenceError(
            f"row marginal error {err:.3e} above {tol:.1e} after {iters} "
            "iterations; raise iters or reg"
        )
    plan = _round_to_marginals(plan, mu, eta)
    return float((plan * c).sum())


# -- maximum mean discrepancy -----------------------------------------------------


def _pairwise_sq_dists(a: Tensor, b: Tensor) -> Tensor:
    """Squared Euclidean distances between channel rows: (..., Ca, Cb)."""
    from .tensor import matmul

    cross = matmul(a, b.swapaxes(-1, -2))
    sq_a = (a * a).sum(axis=-1, keepdims=True)
    sq_b = (b * b).sum(axis=-1, keepdims=True).swapaxes(-1, -2)
    return sq_a + sq_b - 2.0 * cross


def mmd_gaussian(student_channels, vertex_channels, bandwidth: float) -> Tensor:
    """Gaussian-kernel discrepancy between two channel sets sharing length S.

    Student channels are spatially softmaxed here so every channel lives on
    the probability simplex; vertex channels arrive already softened. The
    estimator is the three-term biased form

        mean K(x, x') + mean K(d, d') - 2 mean K(x, d)

    with K(a, b) = exp(-||a - b||^2 / (2 bandwidth^2)). Inputs are (C, S) or
    batched (B, C, S); the batched form returns per-sample values (B,).
    Differentiable wrt the student channels.
    """
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    student = _as_tensor(student_channels)
    vertex = _as_tensor(vertex_channels)
    if student.shape[-1] != vertex.shape[-1]:
        raise ValueError(
            f"spatial sizes disagree: {student.shape[-1]} vs {vertex.shape[-1]}"
        )
    x = softmax(student, axis=-1)
    d = vertex
    scale = -1.0 / (2.0 * bandwidth * bandwidth)

    def mean_kernel(a, b):
        k = (_pairwise_sq_dists(a, b) * scale).exp()
        return k.sum(axis=(-1, -2)) * (1.0 / (a.shape[-2] * b.shape[-2]))

    return mean_kernel(x, x) + mean_kernel(d, d) - 2.0 * mean_kernel(x, d)


def median_heuristic_bandwidth(vectors) -> float:
    """Median pairwise Euclidean distance; 1.0 if the median is degenerate."""
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] < 2:
        raise ValueError("need at least 2 vectors")
    sq = (v * v).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (v @ v.T)
    iu = np.triu_indices(v.shape[0], k=1)
    med = float(np.median(np.sqrt(np.maximum(d2[iu], 0.0))))
    return med if med >= 1e-12 else 1.0
