"""Spectral penalties that drive a matrix's condition number down (well) or up
(ill), their closed-form gradients in matrix space and through the probe
Hessian H(theta) = theta^T K theta, and the step-size bounds under which
single gradient updates move kappa monotonically.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSpectrum, NonUniqueExtreme, RankOne, ZeroMatrix
from .spectral import (
    Array,
    SpectralDecomposition,
    Spectrum,
    as_matrix,
    hessian,
    svd_compact,
)

# Uniqueness of the extreme singular values is tested with a relative gap;
# the penalty denominators with a relative floor (both invented knobs: the
# theory only assumes exact uniqueness / positivity).
GAP_TOL_REL = 1e-9
DENOM_TOL_REL = 1e-12


class StepSource(str, enum.Enum):
    WELL_ON_S = "well_on_s"
    ILL_ON_S = "ill_on_s"
    WELL_ON_THETA = "well_on_theta"
    ILL_ON_THETA = "ill_on_theta"
    FALLBACK = "fallback"


@dataclass(frozen=True)
class StepBound:
    max_step: float
    source: StepSource


@dataclass(frozen=True)
class RegEval:
    """Penalty value with its gradient (when requested) and spectral context.

    ``denom`` is the ill-penalty denominator
    ``|S|_F^2 / (2k) - sigma_min^2 / 2``; it is NaN for the well penalty.
    """

    value: float
    grad: Array | None
    spectrum: Spectrum
    denom: float


def _frob2(a: Array) -> float:
    return float(np.sum(a * a))


def _nonzero_decomposition(a: Array) -> SpectralDecomposition:
    dec = svd_compact(a)
    if dec.rank == 0:
        raise ZeroMatrix("penalty undefined for the zero matrix")
    return dec


def _spectrum(dec: SpectralDecomposition) -> Spectrum:
    smax = float(dec.singulars[0])
    smin = float(dec.singulars[dec.rank - 1])
    return Spectrum(sigma_max=smax, sigma_min=smin, kappa=smax / smin)


def _require_unique_max(dec: SpectralDecomposition) -> None:
    smax = float(dec.singulars[0])
    second = float(dec.singulars[1]) if dec.rank >= 2 else 0.0
    if smax - second <= GAP_TOL_REL * smax:
        raise NonUniqueExtreme(
            f"largest singular value is tied: {smax} vs {second}"
        )


def _require_unique_min(dec: SpectralDecomposition) -> None:
    if dec.rank < 2:
        return
    smin = float(dec.singulars[dec.rank - 1])
    prev = float(dec.singulars[dec.rank - 2])
    if prev - smin <= GAP_TOL_REL * float(dec.singulars[0]):
        raise NonUniqueExtreme(
            f"smallest singular value is tied: {smin} vs {prev}"
        )


def _ill_denominator(a: Array, dec: SpectralDecomposition) -> float:
    k = dec.rank
    smin = float(dec.singulars[k - 1])
    return _frob2(a) / (2.0 * k) - 0.5 * smin * smin


def _require_positive_denom(denom: float, dec: SpectralDecomposition) -> None:
    smax = float(dec.singulars[0])
    if denom <= DENOM_TOL_REL * smax * smax:
        raise DegenerateSpectrum(
            f"all retained singular values coincide (denominator {denom})"
        )


def _well_value_from(a: Array, dec: SpectralDecomposition) -> float:
    p = min(a.shape)
    smax = float(dec.singulars[0])
    return 0.5 * smax * smax - _frob2(a) / (2.0 * p)


def r_well_value(s) -> float:
    """Well-conditioning penalty sigma_max^2 / 2 - |S|_F^2 / (2p).

    Nonnegative; zero exactly for full-rank matrices with kappa = 1.
    """
    a = as_matrix(s)
    return _well_value_from(a, _nonzero_decomposition(a))


def r_well_grad(s) -> Array:
    """Gradient sigma_1 u_1 v_1^T - S/p; requires a unique sigma_max."""
    a = as_matrix(s)
    dec = _nonzero_decomposition(a)
    _require_unique_max(dec)
    p = min(a.shape)
    u1 = dec.left[:, 0]
    v1 = dec.right[:, 0]
    return float(dec.singulars[0]) * np.outer(u1, v1) - a / p


def _ill_value_from(a: Array, dec: SpectralDecomposition) -> RegEval:
    denom = _ill_denominator(a, dec)
    _require_positive_denom(denom, dec)
    return RegEval(value=1.0 / denom, grad=None, spectrum=_spectrum(dec), denom=denom)


def r_ill_value(s) -> RegEval:
    """Ill-conditioning penalty 1 / (|S|_F^2 / (2k) - sigma_min^2 / 2).

    Diverges as the retained spectrum flattens; that case raises
    DegenerateSpectrum instead of returning infinity.
    """
    a = as_matrix(s)
    return _ill_value_from(a, _nonzero_decomposition(a))


def r_ill_grad(s) -> Array:
    """Gradient (sigma_k u_k v_k^T - S/k) / denom^2; requires a unique sigma_min."""
    a = as_matrix(s)
    dec = _nonzero_decomposition(a)
    denom = _ill_denominator(a, dec)
    _require_positive_denom(denom, dec)
    _require_unique_min(dec)
    k = dec.rank
    uk = dec.left[:, k - 1]
    vk = dec.right[:, k - 1]
    core = float(dec.singulars[k - 1]) * np.outer(uk, vk) - a / k
    return core / (denom * denom)


def _well_grad_theta_from(t: Array, c: Array, h: Array,
                          dec: SpectralDecomposition) -> Array:
    _require_unique_max(dec)
    d_in = t.shape[0]
    v1 = dec.right[:, 0]
    core = float(dec.singulars[0]) * np.outer(v1, v1) - h / d_in
    return 2.0 * (c @ t @ core)


def r_well_grad_theta(theta, k) -> Array:
    """Extractor-space gradient 2 K theta (sigma_1 v_1 v_1^T - H/D) of the
    well penalty of H(theta) = theta^T K theta."""
    t = as_matrix(theta, "theta")
    c = as_matrix(k, "covariance")
    h = hessian(t, c)
    return _well_grad_theta_from(t, c, h, _nonzero_decomposition(h))


def _ill_grad_theta_from(t: Array, c: Array, h: Array,
                         dec: SpectralDecomposition) -> Array:
    denom = _ill_denominator(h, dec)
    _require_positive_denom(denom, dec)
    _require_unique_min(dec)
    rank = dec.rank
    vk = dec.right[:, rank - 1]
    core = float(dec.singulars[rank - 1]) * np.outer(vk, vk) - h / rank
    return 2.0 * (c @ t @ core) / (denom * denom)


def r_ill_grad_theta(theta, k) -> Array:
    """Extractor-space gradient 2 K theta (sigma_k v_k v_k^T - H/k) / denom^2
    of the ill penalty of H(theta)."""
    t = as_matrix(theta, "theta")
    c = as_matrix(k, "covariance")
    h = hessian(t, c)
    return _ill_grad_theta_from(t, c, h, _nonzero_decomposition(h))


def safe_step_well_on_s(s) -> StepBound:
    """Largest step (exclusive) with guaranteed kappa decrease for
    S' = S - eta * r_well_grad(S): (kappa - 1) / ((1 - 1/p) kappa + 1/p)."""
    a = as_matrix(s)
    dec = _nonzero_decomposition(a)
    if dec.rank < 2:
        raise RankOne("kappa is identically 1 at rank 1; no well step exists")
    _require_unique_max(dec)
    p = min(a.shape)
    kappa = _spectrum(dec).kappa
    bound = (kappa - 1.0) / ((1.0 - 1.0 / p) * kappa + 1.0 / p)
    return StepBound(max_step=bound, source=StepSource.WELL_ON_S)


def safe_step_ill_on_s(s) -> StepBound:
    """Largest step with guaranteed kappa increase for
    S' = S - eta * r_ill_grad(S): k/(k-1) * denom^2."""
    a = as_matrix(s)
    dec = _nonzero_decomposition(a)
    if dec.rank < 2:
        raise RankOne("ill penalty undefined at rank 1")
    _require_unique_min(dec)
    denom = _ill_denominator(a, dec)
    _require_positive_denom(denom, dec)
    k = dec.rank
    bound = k / (k - 1.0) * denom * denom
    return StepBound(max_step=bound, source=StepSource.ILL_ON_S)


def safe_step_well_on_theta(h_p, d_in: int) -> StepBound:
    """Step bound for the preconditioned extractor update against the well
    penalty.

    The update maps the Hessian's singular values to
    s1 (1 - 2 eta (1 - 1/D) s1)^2 and s_i (1 + 2 eta s_i / D)^2 for i > 1,
    so kappa decreases exactly while the shrunken top value still dominates
    the grown runner-up:

        eta < (sqrt(s1) - sqrt(s2)) / (2 ((1 - 1/D) s1^1.5 + s2^1.5 / D)).
    """
    h = as_matrix(h_p, "hessian")
    dec = _nonzero_decomposition(h)
    if dec.rank < 2:
        raise RankOne("need at least two retained singular values")
    _require_unique_max(dec)
    s1 = float(dec.singulars[0])
    s2 = float(dec.singulars[1])
    bound = (np.sqrt(s1) - np.sqrt(s2)) / (
        2.0 * ((1.0 - 1.0 / d_in) * s1 ** 1.5 + s2 ** 1.5 / d_in))
    return StepBound(max_step=bound, source=StepSource.WELL_ON_THETA)


def safe_step_ill_on_theta(h_h) -> StepBound:
    """Step bound for the preconditioned extractor update against the ill
    penalty: min of denom^2 / (1 - 2 sigma_min / k) and the sharp requirement
    denom^2 / ((1 - 1/k) sigma_min).

    The second term keeps the bottom singular value's update factor
    (1 - 2 eta (1 - 1/k) sigma_min / denom^2)^2 strictly inside (0, 1) for
    every step below the bound, which is what actually shrinks the min and
    forces kappa up; the first term alone lets that factor cross zero once
    sigma_min > 1/2, annihilating the min singular value. When the first
    term's prefactor is non-positive the matrix-space ill bound is returned,
    tagged FALLBACK.
    """
    h = as_matrix(h_h, "hessian")
    dec = _nonzero_decomposition(h)
    if dec.rank < 2:
        raise RankOne("need at least two retained singular values")
    _require_unique_min(dec)
    denom = _ill_denominator(h, dec)
    _require_positive_denom(denom, dec)
    k = dec.rank
    smin = float(dec.singulars[k - 1])
    factor = 1.0 - 2.0 * smin / k
    if factor <= 0.0:
        fallback = k / (k - 1.0) * denom * denom
        return StepBound(max_step=fallback, source=StepSource.FALLBACK)
    no_collapse = denom * denom / (2.0 * (1.0 - 1.0 / k) * smin)
    return StepBound(max_step=min(denom * denom / factor, no_collapse),
                     source=StepSource.ILL_ON_THETA)
