"""Dense spectral substrate: compact SVD, condition numbers, probe Hessians,
and the ridge-regularized covariance solve used as a preconditioner.

Everything here is a pure function of float64 arrays; symmetric inputs are
routed through a symmetric eigendecomposition so that PSD matrices get
structurally identical left/right singular vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import (
    DimensionMismatch,
    EmptyMatrix,
    NumericalFailure,
    SingularSystem,
    ZeroMatrix,
)

Array = np.ndarray

_EPS = float(np.finfo(np.float64).eps)


def as_matrix(m, name: str = "matrix") -> Array:
    """Validate and return ``m`` as a finite float64 2-D array."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {a.shape}")
    if a.shape[0] == 0 or a.shape[1] == 0:
        raise EmptyMatrix(f"{name} has a zero dimension: {a.shape}")
    if not np.isfinite(a).all():
        raise NumericalFailure(f"{name} contains non-finite entries")
    return a


@dataclass(frozen=True)
class SpectralDecomposition:
    """Compact SVD ``left @ diag(singulars) @ right.T`` of numerical rank ``rank``.

    Singular values are sorted descending and all exceed the rank cutoff.
    For symmetric PSD input ``left`` and ``right`` are the same array object.
    """

    left: Array
    singulars: Array
    right: Array
    rank: int


@dataclass(frozen=True)
class Spectrum:
    sigma_max: float
    sigma_min: float
    kappa: float


def default_rank_tolerance(m: Array) -> float:
    """Relative cutoff max(p_r, p_c) * eps applied against sigma_max."""
    return max(m.shape) * _EPS


def svd_compact(m, rank_tolerance: float | None = None) -> SpectralDecomposition:
    """Compact SVD retaining triples with sigma_i > rank_tolerance * sigma_max.

    ``rank_tolerance`` is relative; ``None`` selects max(p_r, p_c) * eps.
    A zero matrix yields rank 0 with empty factors.
    """
    a = as_matrix(m)
    if rank_tolerance is None:
        rank_tolerance = default_rank_tolerance(a)
    if rank_tolerance < 0:
        raise ValueError(f"rank_tolerance must be >= 0, got {rank_tolerance}")

    symmetric = a.shape[0] == a.shape[1] and np.array_equal(a, a.T)
    try:
        if symmetric:
            evals, q = np.linalg.eigh(a)
            order = np.argsort(-np.abs(evals), kind="stable")
            evals = evals[order]
            sing = np.abs(evals)
            v = q[:, order]
            if np.any(evals < 0.0):
                u = v * np.where(evals < 0.0, -1.0, 1.0)
            else:
                u = v  # PSD: enforce left is right structurally
        else:
            u, sing, vt = np.linalg.svd(a, full_matrices=False)
            v = vt.T
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"SVD did not converge: {exc}") from exc

    sigma_max = float(sing[0]) if sing.size else 0.0
    k = int(np.count_nonzero(sing > rank_tolerance * sigma_max)) if sigma_max > 0.0 else 0
    if u is v:
        left = right = v[:, :k]
    else:
        left, right = u[:, :k], v[:, :k]
    return SpectralDecomposition(left=left, singulars=sing[:k].copy(), right=right, rank=k)


def condition_number(m, rank_tolerance: float | None = None) -> Spectrum:
    """kappa = sigma_max / sigma_min over the retained (nonzero) singulars."""
    dec = svd_compact(m, rank_tolerance)
    if dec.rank == 0:
        raise ZeroMatrix("condition number undefined: all singular values below tolerance")
    smax = float(dec.singulars[0])
    smin = float(dec.singulars[dec.rank - 1])
    return Spectrum(sigma_max=smax, sigma_min=smin, kappa=smax / smin)


def covariance(x) -> Array:
    """Gram matrix X^T X of a feature matrix, symmetrized to kill BLAS drift."""
    a = as_matrix(x, "features")
    k = a.T @ a
    return (k + k.T) * 0.5


def hessian(theta, k) -> Array:
    """Curvature theta^T K theta of the squared-error probe on features X theta.

    ``k`` must be the (symmetric PSD) covariance of the raw inputs.
    """
    t = as_matrix(theta, "theta")
    c = as_matrix(k, "covariance")
    if t.shape[0] != t.shape[1]:
        raise DimensionMismatch(f"theta must be square, got {t.shape}")
    if c.shape != t.shape:
        raise DimensionMismatch(f"covariance shape {c.shape} does not match theta {t.shape}")
    h = t.T @ c @ t
    return (h + h.T) * 0.5


def predicted_singular_values(theta, k) -> Array:
    """Hessian spectrum predicted from theta's SVD and the covariance eigenpairs.

    Computes, for every i, the sum over j of
    (sigma_theta_i * <u_theta_i, q_j> * sqrt(gamma_j))^2 with (gamma_j, q_j)
    the eigenpairs of the covariance; returns the values sorted descending.
    Exact when theta's left singular vectors coincide with the covariance
    eigenvectors; a diagnostic elsewhere.
    """
    t = as_matrix(theta, "theta")
    c = as_matrix(k, "covariance")
    if t.shape[0] != t.shape[1] or c.shape != t.shape:
        raise DimensionMismatch(
            f"theta {t.shape} and covariance {c.shape} must be square and equal-shaped"
        )
    u_t, s_t, _ = np.linalg.svd(t)
    gamma, q = np.linalg.eigh((c + c.T) * 0.5)
    gamma = np.clip(gamma, 0.0, None)
    align = u_t.T @ q  # (i, j) inner products
    contrib = (s_t[:, None] * align) ** 2 * gamma[None, :]
    return np.sort(contrib.sum(axis=1))[::-1]


def precond_apply(k, g, ridge: float = 1e-6) -> Array:
    """Solve (K + ridge I) Z = G with a symmetric positive-definite factorization."""
    c = as_matrix(k, "covariance")
    rhs = as_matrix(g, "gradient")
    if c.shape[0] != c.shape[1]:
        raise DimensionMismatch(f"covariance must be square, got {c.shape}")
    if rhs.shape[0] != c.shape[0]:
        raise DimensionMismatch(
            f"gradient rows {rhs.shape[0]} do not match covariance side {c.shape[0]}"
        )
    if ridge < 0:
        raise ValueError(f"ridge must be >= 0, got {ridge}")
    system = c if ridge == 0.0 else c + ridge * np.eye(c.shape[0])
    try:
        factor = cho_factor(system, lower=True, check_finite=False)
        z = cho_solve(factor, rhs, check_finite=False)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - scipy raises its own
        raise SingularSystem(str(exc)) from exc
    except Exception as exc:
        raise SingularSystem(f"regularized covariance is not positive definite: {exc}") from exc
    if not np.isfinite(z).all():
        raise SingularSystem("preconditioned gradient is non-finite")
    return z
