"""2-D embedding of feature vectors by t-SNE, implemented from scratch.

Gaussian neighbor affinities in feature space (bandwidth per point,
matched to a target perplexity by binary search) are approximated by
Student-t affinities in 2-D, minimizing KL(P || Q) with plain momentum
gradient descent and an early exaggeration phase. Exact O(N^2)
computation throughout; intended for cohorts of a few hundred images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core_data import ImageRecord

#: Early exaggeration is applied for this many leading iterations.
EXAGGERATION_ITERS = 100
#: Momentum switches from the early to the late value at this iteration.
MOMENTUM_SWITCH_ITER = 250
#: Floor applied to affinity normalizers to avoid division blow-ups.
DENOM_FLOOR = 1e-12

#: Binary search targets the row perplexity within this tolerance.
PERPLEXITY_TOL = 1e-4
PERPLEXITY_MAX_STEPS = 64


@dataclass
class TsneParams:
    perplexity: float = 30.0
    n_iter: int = 1000
    early_exaggeration_factor: float = 4.0
    learning_rate: float = 200.0
    momentum_early: float = 0.5
    momentum_late: float = 0.8
    seed: int = 0

    def __post_init__(self) -> None:
        positive = {
            "perplexity": self.perplexity,
            "n_iter": self.n_iter,
            "early_exaggeration_factor": self.early_exaggeration_factor,
            "learning_rate": self.learning_rate,
            "momentum_early": self.momentum_early,
            "momentum_late": self.momentum_late,
        }
        for name, value in positive.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")

    def check_feasible(self, n_points: int) -> None:
        # perplexity < (N-1)/3: each point needs enough neighbors to spread over
        if not self.perplexity < (n_points - 1) / 3:
            raise ValueError(
                f"perplexity {self.perplexity} too large for {n_points} points;"
                f" must be below (N-1)/3 = {(n_points - 1) / 3:.2f}"
            )


@dataclass
class TsneResult:
    """Final 2-D coordinates plus the KL(P||Q) trajectory."""

    coords: np.ndarray
    kl_post_exaggeration: float
    kl_final: float
    kl_trace: list[tuple[int, float]] = field(default_factory=list)


def squared_distances(X: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances with an exact zero diagonal."""
    sq = (X * X).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return d2


def conditional_affinities(X: np.ndarray, perplexity: float) -> np.ndarray:
    """Row-stochastic Gaussian neighbor probabilities, zero diagonal.

    Each row's bandwidth is found by binary search so that the row
    distribution's perplexity is within ``PERPLEXITY_TOL`` of the
    target.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 4:
        raise ValueError(f"need a 2-D array of at least 4 points, got shape {X.shape}")
    n = X.shape[0]
    if not 1.0 <= perplexity <= n - 1:
        raise ValueError(
            f"perplexity {perplexity} infeasible for {n} points"
            f" (achievable range is [1, {n - 1}])"
        )

    d2 = squared_distances(X)
    cond = np.zeros((n, n), dtype=float)
    for i in range(n):
        row = np.delete(d2[i], i)
        # shifting distances leaves the row distribution (and hence its
        # perplexity) unchanged while keeping the exponentials in range
        shifted = row - row.min()
        beta, beta_min, beta_max = 1.0, 0.0, math.inf
        weights = np.exp(-shifted * beta)
        for _ in range(PERPLEXITY_MAX_STEPS):
            total = weights.sum()
            h = math.log(total) + beta * float((shifted * weights).sum()) / total
            perp = math.exp(h)
            if abs(perp - perplexity) <= PERPLEXITY_TOL:
                break
            if perp > perplexity:
                beta_min = beta
                beta = beta * 2.0 if math.isinf(beta_max) else (beta + beta_max) / 2.0
            else:
                beta_max = beta
                beta = (beta + beta_min) / 2.0
            weights = np.exp(-shifted * beta)
        else:
            raise ValueError(
                f"could not match perplexity {perplexity} for point {i}"
                f" within {PERPLEXITY_MAX_STEPS} bisection steps"
            )
        p_row = weights / weights.sum()
        cond[i, :i] = p_row[:i]
        cond[i, i + 1 :] = p_row[i:]
    return cond


def pairwise_affinities(X: np.ndarray, perplexity: float) -> np.ndarray:
    """Symmetrized Gaussian neighbor probabilities P for t-SNE.

    The conditional matrix is symmetrized as (P_cond + P_cond.T) / (2N):
    entries are >= 0, the diagonal is 0, and the total sums to 1.
    """
    cond = conditional_affinities(X, perplexity)
    n = cond.shape[0]
    P = (cond + cond.T) / (2.0 * n)
    np.fill_diagonal(P, 0.0)
    return P


def _student_t_q(Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unnormalized and normalized Student-t (1 dof) affinities of Y."""
    num = 1.0 / (1.0 + squared_distances(Y))
    np.fill_diagonal(num, 0.0)
    Q = num / max(num.sum(), DENOM_FLOOR)
    return num, Q


def kl_divergence(P: np.ndarray, Y: np.ndarray) -> float:
    """KL(P || Q(Y)) in nats, over off-diagonal entries with P > 0."""
    _, Q = _student_t_q(Y)
    mask = P > 0.0
    return float(np.sum(P[mask] * np.log(P[mask] / Q[mask])))


def kl_gradient(P: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Analytic gradient of KL(P || Q(Y)) with respect to Y."""
    num, Q = _student_t_q(Y)
    PQ = (P - Q) * num
    return 4.0 * (Y * PQ.sum(axis=1)[:, None] - PQ @ Y)


def tsne(
    X: np.ndarray,
    params: TsneParams | None = None,
    init: np.ndarray | None = None,
) -> TsneResult:
    """Embed the rows of X into 2-D.

    Deterministic given the seed: initial coordinates are drawn from a
    seeded Gaussian with std 1e-4 (or taken from ``init``), and all
    arithmetic is fixed-order. The KL(P||Q) value is recorded right
    after the exaggeration phase ends and at the final iteration, always
    against the plain (unexaggerated) P.
    """
    params = params or TsneParams()
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    params.check_feasible(n)

    P = pairwise_affinities(X, params.perplexity)
    if init is not None:
        Y = np.array(init, dtype=float)
        if Y.shape != (n, 2):
            raise ValueError(f"init must have shape ({n}, 2), got {Y.shape}")
    else:
        rng = np.random.default_rng(params.seed)
        Y = rng.normal(0.0, 1e-4, size=(n, 2))

    exaggeration_end = min(EXAGGERATION_ITERS, params.n_iter)
    velocity = np.zeros_like(Y)
    kl_post_exaggeration = math.nan
    trace: list[tuple[int, float]] = []

    for it in range(params.n_iter):
        P_run = P * params.early_exaggeration_factor if it < exaggeration_end else P
        grad = kl_gradient(P_run, Y)

        momentum = params.momentum_early if it < MOMENTUM_SWITCH_ITER else params.momentum_late
        velocity = momentum * velocity - params.learning_rate * grad
        Y = Y + velocity
        Y = Y - Y.mean(axis=0)
        if not np.all(np.isfinite(Y)):
            raise FloatingPointError(f"embedding overflowed at iteration {it}")

        if it == exaggeration_end - 1:
            kl_post_exaggeration = kl_divergence(P, Y)
        if (it + 1) % 50 == 0 or it == params.n_iter - 1:
            trace.append((it + 1, kl_divergence(P, Y)))

    kl_final = kl_divergence(P, Y)
    return TsneResult(
        coords=Y,
        kl_post_exaggeration=kl_post_exaggeration,
        kl_final=kl_final,
        kl_trace=trace,
    )


def export_embedding(
    coords: np.ndarray,
    records: Sequence[ImageRecord],
    predictions: Mapping[str, float] | None = None,
) -> str:
    """Comma-separated embedding rows joined with survival and predictions.

    One row per input image, ``records`` order. When ``predictions`` is
    None the predicted_extent column is omitted entirely; unknown
    survival is emitted as "unknown".
    """
    coords = np.asarray(coords, dtype=float)
    if coords.shape != (len(records), 2):
        raise ValueError(
            f"coords must have shape ({len(records)}, 2), got {coords.shape}"
        )
    if not np.all(np.isfinite(coords)):
        raise ValueError("coordinates must be finite")
    if predictions is not None:
        missing = [r.image_id for r in records if r.image_id not in predictions]
        if missing:
            raise ValueError(f"no prediction for images: {missing[:5]}")

    if predictions is None:
        lines = ["image_id,x,y,survival"]
        for rec, (x, y) in zip(records, coords):
            lines.append(f"{rec.image_id},{float(x)!r},{float(y)!r},{rec.survival}")
    else:
        lines = ["image_id,x,y,predicted_extent,survival"]
        for rec, (x, y) in zip(records, coords):
            pred = float(predictions[rec.image_id])
            lines.append(
                f"{rec.image_id},{float(x)!r},{float(y)!r},{pred!r},{rec.survival}"
            )
    return "\n".join(lines) + "\n"
