"""Linear probing of a frozen extractor: squared-error / binary-cross-entropy
losses, the closed-form least-squares optimum, gradient descent with exact
line search, and the norm-ratio convergence diagnostic."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, InvalidLabels
from .spectral import Array, as_matrix

LOGIT_CLAMP = 30.0
STALL_TOL = 1e-14


class LossKind(str, enum.Enum):
    SQUARED_ERROR = "squared_error"
    BINARY_CROSS_ENTROPY = "binary_cross_entropy"


@dataclass(frozen=True)
class ProbeProblem:
    """Probe a frozen square extractor ``theta`` on data (x, y)."""

    x: Array
    y: Array
    theta: Array
    loss: LossKind = LossKind.SQUARED_ERROR

    def __post_init__(self):
        x = as_matrix(self.x, "x")
        y = as_matrix(self.y, "y")
        t = as_matrix(self.theta, "theta")
        if x.shape[0] != y.shape[0]:
            raise DimensionMismatch(
                f"x has {x.shape[0]} rows but y has {y.shape[0]}"
            )
        if t.shape[0] != t.shape[1] or t.shape[0] != x.shape[1]:
            raise DimensionMismatch(
                f"theta {t.shape} must be square with side {x.shape[1]}"
            )
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "theta", t)


@dataclass
class ProbeTrajectory:
    """Per-step probe weights plus the derived convergence diagnostics."""

    weights: list[Array] = field(default_factory=list)
    norm_ratios: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    step_sizes: list[float] = field(default_factory=list)

    def csv_rows(self):
        """Rows (step, loss, norm_ratio, step_size); the final step size is empty."""
        rows = []
        for t, (loss, ratio) in enumerate(zip(self.losses, self.norm_ratios)):
            step = self.step_sizes[t] if t < len(self.step_sizes) else ""
            rows.append((t, loss, ratio, step))
        return rows


def probe_features(problem: ProbeProblem) -> Array:
    """Features X @ theta seen by the probe classifier."""
    return problem.x @ problem.theta


def closed_form_optimum(problem: ProbeProblem) -> Array:
    """Minimum-norm least-squares optimum pinv(X theta) @ Y."""
    if problem.loss is not LossKind.SQUARED_ERROR:
        raise InvalidLabels("closed-form optimum exists only for squared error")
    a = probe_features(problem)
    w, *_ = np.linalg.lstsq(a, problem.y, rcond=None)
    return w


def probe_loss_and_grad(problem: ProbeProblem, w) -> tuple[float, Array]:
    """Loss (summed over samples) and its gradient in the probe weights.

    Squared error: |A w - Y|_F^2 with A = X theta.
    Binary cross-entropy: sigmoid link on a single {0,1} target column, with
    logits clamped at +-30 before the link.
    """
    weights = as_matrix(w, "w")
    a = probe_features(problem)
    if weights.shape != (a.shape[1], problem.y.shape[1]):
        raise DimensionMismatch(
            f"w has shape {weights.shape}, expected {(a.shape[1], problem.y.shape[1])}"
        )
    if problem.loss is LossKind.SQUARED_ERROR:
        resid = a @ weights - problem.y
        return float(np.sum(resid * resid)), 2.0 * (a.T @ resid)

    y = problem.y
    if y.shape[1] != 1 or not np.all((y == 0.0) | (y == 1.0)):
        raise InvalidLabels("binary cross-entropy needs a single {0,1} column")
    z = np.clip(a @ weights, -LOGIT_CLAMP, LOGIT_CLAMP)
    # log(1 + e^z) - y*z, stable on both tails
    loss = float(np.sum(np.logaddexp(0.0, z) - y * z))
    p = 1.0 / (1.0 + np.exp(-z))
    return loss, a.T @ (p - y)


def gd_exact_line_search(
    problem: ProbeProblem, iters: int, w0: Array | None = None
) -> ProbeTrajectory:
    """Steepest descent on the squared-error probe with the per-step size that
    exactly minimizes the quadratic loss along the gradient.

    Records weights, losses, step sizes, and the squared-distance ratio
    |w_t - w*|^2 / |w_0 - w*|^2 against the closed-form optimum. Stops early
    once the gradient stalls below 1e-14.
    """
    if problem.loss is not LossKind.SQUARED_ERROR:
        raise InvalidLabels("exact line search is defined for the quadratic loss only")
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    a = probe_features(problem)
    gram = a.T @ a
    w_star = closed_form_optimum(problem)
    w = np.zeros((a.shape[1], problem.y.shape[1])) if w0 is None else as_matrix(w0).copy()

    d0 = float(np.sum((w - w_star) ** 2))
    ratio_scale = d0 if d0 > 0.0 else 1.0

    traj = ProbeTrajectory()

    def record(weights):
        resid = a @ weights - problem.y
        traj.weights.append(weights.copy())
        traj.losses.append(float(np.sum(resid * resid)))
        traj.norm_ratios.append(float(np.sum((weights - w_star) ** 2)) / ratio_scale)

    record(w)
    if d0 == 0.0:
        traj.norm_ratios[0] = 1.0  # ratio is 1 by definition at step 0
    for _ in range(iters):
        g = 2.0 * (a.T @ (a @ w - problem.y))
        gg = float(np.sum(g * g))
        if np.sqrt(gg) < STALL_TOL:
            break
        curvature = float(np.sum(g * (gram @ g)))
        if curvature <= 0.0:
            break
        eta = gg / (2.0 * curvature)
        w = w - eta * g
        traj.step_sizes.append(eta)
        record(w)
    return traj
