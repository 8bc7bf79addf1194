"""Executable checks of every analytic claim the package relies on:
finite-difference gradient validation, Monte-Carlo monotonicity of kappa
under safe-step updates, the penalty bound inequalities, and the aligned-case
Hessian spectrum prediction."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import regularizers as reg
from .immunizer import kappa_grad_theta
from .spectral import Array, condition_number, hessian, svd_compact

FD_STEP = 1e-5
GRAD_TOL = 1e-6
KAPPA_GRAD_TOL = 1e-5
BOUND_SLACK = 1e-9
PREDICTION_TOL = 1e-10


@dataclass
class ClauseResult:
    name: str
    trials: int
    failures: int
    worst: float  # largest relative error / tightest margin seen

    @property
    def passed(self) -> bool:
        return self.failures == 0


# ---------------------------------------------------------------------------
# random instances
# ---------------------------------------------------------------------------


def random_orthogonal(rng, n: int) -> Array:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def gapped_spectrum(rng, n: int, gap: float = 0.1, low: float = 0.3) -> Array:
    """Descending positive values with every adjacent gap at least ``gap``."""
    increments = gap + rng.uniform(0.0, 0.5, size=n - 1)
    values = low + rng.uniform(0.0, 0.2) + np.concatenate([[0.0], np.cumsum(increments)])
    return values[::-1].copy()


def random_gapped_matrix(rng, n: int = 8, gap: float = 0.1) -> Array:
    u = random_orthogonal(rng, n)
    v = random_orthogonal(rng, n)
    return (u * gapped_spectrum(rng, n, gap)) @ v.T


def random_pd_covariance(rng, n: int, low: float = 0.5, high: float = 3.0) -> Array:
    q = random_orthogonal(rng, n)
    evals = rng.uniform(low, high, size=n)
    return (q * evals) @ q.T


def theta_with_hessian_spectrum(rng, k: Array, spectrum: Array) -> Array:
    """Extractor whose probe Hessian on covariance ``k`` has exactly the
    requested eigenvalues: theta = K^{-1/2} W diag(sqrt(s)) W^T."""
    evals, q = np.linalg.eigh(k)
    k_inv_half = (q / np.sqrt(evals)) @ q.T
    w = random_orthogonal(rng, k.shape[0])
    return k_inv_half @ (w * np.sqrt(spectrum)) @ w.T


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def finite_difference_grad(f, x: Array, h: float = FD_STEP) -> Array:
    g = np.empty_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def _rel_error(analytic: Array, numeric: Array) -> float:
    scale = max(float(np.linalg.norm(analytic)), 1e-300)
    return float(np.linalg.norm(analytic - numeric)) / scale


def _grad_clause(name, trials, rng, make_instance, analytic, value, tol) -> ClauseResult:
    failures, worst = 0, 0.0
    for _ in range(trials):
        x = make_instance(rng)
        err = _rel_error(analytic(x), finite_difference_grad(lambda m: value(m), x))
        worst = max(worst, err)
        if err >= tol:
            failures += 1
    return ClauseResult(name=name, trials=trials, failures=failures, worst=worst)


def check_grad_well_s(trials: int, rng, size: int = 8) -> ClauseResult:
    return _grad_clause(
        "well penalty gradient matches finite differences (matrix space)",
        trials, rng, lambda r: random_gapped_matrix(r, size),
        reg.r_well_grad, reg.r_well_value, GRAD_TOL)


def check_grad_ill_s(trials: int, rng, size: int = 8) -> ClauseResult:
    return _grad_clause(
        "ill penalty gradient matches finite differences (matrix space)",
        trials, rng, lambda r: random_gapped_matrix(r, size),
        reg.r_ill_grad, lambda m: reg.r_ill_value(m).value, GRAD_TOL)


def _theta_instance(rng, size: int):
    k = random_pd_covariance(rng, size)
    theta = theta_with_hessian_spectrum(rng, k, gapped_spectrum(rng, size))
    return theta, k


def _theta_grad_clause(name, trials, rng, size, analytic, value, tol) -> ClauseResult:
    failures, worst = 0, 0.0
    for _ in range(trials):
        theta, k = _theta_instance(rng, size)
        err = _rel_error(
            analytic(theta, k),
            finite_difference_grad(lambda t: value(t, k), theta))
        worst = max(worst, err)
        if err >= tol:
            failures += 1
    return ClauseResult(name=name, trials=trials, failures=failures, worst=worst)


def check_grad_well_theta(trials: int, rng, size: int = 8) -> ClauseResult:
    return _theta_grad_clause(
        "well penalty gradient matches finite differences (extractor space)",
        trials, rng, size, reg.r_well_grad_theta,
        lambda t, k: reg.r_well_value(hessian(t, k)), GRAD_TOL)


def check_grad_ill_theta(trials: int, rng, size: int = 8) -> ClauseResult:
    return _theta_grad_clause(
        "ill penalty gradient matches finite differences (extractor space)",
        trials, rng, size, reg.r_ill_grad_theta,
        lambda t, k: reg.r_ill_value(hessian(t, k)).value, GRAD_TOL)


def check_grad_kappa_theta(trials: int, rng, size: int = 8) -> ClauseResult:
    return _theta_grad_clause(
        "kappa gradient matches finite differences (extractor space)",
        trials, rng, size, kappa_grad_theta,
        lambda t, k: condition_number(hessian(t, k)).kappa, KAPPA_GRAD_TOL)


# ---------------------------------------------------------------------------
# bound inequalities
# ---------------------------------------------------------------------------


def check_bounds_well(trials: int, rng, size: int = 8) -> ClauseResult:
    """Nonnegativity and kappa <= exp(p sigma_min^-2 value) on random matrices."""
    failures, worst = 0, math.inf
    for _ in range(trials):
        s = rng.standard_normal((size, size))
        value = reg.r_well_value(s)
        spec = condition_number(s)
        exponent = min(size, size) * value / (spec.sigma_min ** 2)
        # the bound holds trivially once exp() would overflow
        bound = math.exp(exponent) if exponent < 700.0 else math.inf
        margin = bound + BOUND_SLACK - spec.kappa
        worst = min(worst, margin)
        if value < 0.0 or margin < 0.0:
            failures += 1
    return ClauseResult("well penalty nonnegative and bounds log-kappa",
                        trials, failures, worst)


def check_bounds_ill(trials: int, rng, size: int = 8) -> ClauseResult:
    """Nonnegativity and 1/log(kappa) <= sigma_max^2 value on random matrices."""
    failures, worst = 0, math.inf
    for _ in range(trials):
        s = rng.standard_normal((size, size))
        ev = reg.r_ill_value(s)
        kappa = ev.spectrum.kappa
        margin = ev.spectrum.sigma_max ** 2 * ev.value + BOUND_SLACK - 1.0 / math.log(kappa)
        worst = min(worst, margin)
        if ev.value < 0.0 or margin < 0.0:
            failures += 1
    return ClauseResult("ill penalty nonnegative and bounds 1/log-kappa",
                        trials, failures, worst)


# ---------------------------------------------------------------------------
# monotonicity under safe steps
# ---------------------------------------------------------------------------


def check_mono_well_s(trials: int, rng, size: int = 8,
                      step_fraction: float = 0.5) -> ClauseResult:
    failures, worst = 0, math.inf
    for _ in range(trials):
        s = random_gapped_matrix(rng, size)
        kappa0 = condition_number(s).kappa
        eta = step_fraction * reg.safe_step_well_on_s(s).max_step
        kappa1 = condition_number(s - eta * reg.r_well_grad(s)).kappa
        worst = min(worst, kappa0 - kappa1)
        if not kappa1 < kappa0:
            failures += 1
    return ClauseResult("kappa strictly decreases under safe well step (matrix space)",
                        trials, failures, worst)


def check_mono_ill_s(trials: int, rng, size: int = 8,
                     step_fraction: float = 0.5) -> ClauseResult:
    failures, worst = 0, math.inf
    for _ in range(trials):
        s = random_gapped_matrix(rng, size)
        kappa0 = condition_number(s).kappa
        eta = step_fraction * reg.safe_step_ill_on_s(s).max_step
        kappa1 = condition_number(s - eta * reg.r_ill_grad(s)).kappa
        worst = min(worst, kappa1 - kappa0)
        if not kappa1 > kappa0:
            failures += 1
    return ClauseResult("kappa strictly increases under safe ill step (matrix space)",
                        trials, failures, worst)


def _precond_theta_step(theta, k, grad, eta):
    evals, q = np.linalg.eigh(k)
    k_inv = (q / evals) @ q.T
    return theta - eta * (k_inv @ grad)


def check_mono_well_theta(trials: int, rng, size: int = 8,
                          step_fraction: float = 0.5) -> ClauseResult:
    failures, worst = 0, math.inf
    for _ in range(trials):
        theta, k = _theta_instance(rng, size)
        h = hessian(theta, k)
        kappa0 = condition_number(h).kappa
        eta = step_fraction * reg.safe_step_well_on_theta(h, size).max_step
        theta1 = _precond_theta_step(theta, k, reg.r_well_grad_theta(theta, k), eta)
        kappa1 = condition_number(hessian(theta1, k)).kappa
        worst = min(worst, kappa0 - kappa1)
        if not kappa1 < kappa0:
            failures += 1
    return ClauseResult(
        "kappa strictly decreases under safe preconditioned well step (extractor space)",
        trials, failures, worst)


def check_mono_ill_theta(trials: int, rng, size: int = 8,
                         step_fraction: float = 0.5) -> ClauseResult:
    failures, worst = 0, math.inf
    done = 0
    while done < trials:
        theta, k = _theta_instance(rng, size)
        h = hessian(theta, k)
        bound = reg.safe_step_ill_on_theta(h)
        if bound.source is not reg.StepSource.ILL_ON_THETA:
            continue  # vacuous-prefactor regime: not covered by the guarantee
        done += 1
        kappa0 = condition_number(h).kappa
        eta = step_fraction * bound.max_step
        theta1 = _precond_theta_step(theta, k, reg.r_ill_grad_theta(theta, k), eta)
        kappa1 = condition_number(hessian(theta1, k)).kappa
        worst = min(worst, kappa1 - kappa0)
        if not kappa1 > kappa0:
            failures += 1
    return ClauseResult(
        "kappa strictly increases under safe preconditioned ill step (extractor space)",
        trials, failures, worst)


# ---------------------------------------------------------------------------
# Hessian spectrum prediction
# ---------------------------------------------------------------------------


def check_prediction_aligned(trials: int, rng, size: int = 6) -> ClauseResult:
    """Exactness of the predicted Hessian spectrum when the extractor's left
    singular vectors coincide with the covariance eigenvectors."""
    from .spectral import predicted_singular_values

    failures, worst = 0, 0.0
    for _ in range(trials):
        k = random_pd_covariance(rng, size)
        _, q = np.linalg.eigh(k)
        s_theta = gapped_spectrum(rng, size)
        w = random_orthogonal(rng, size)
        theta = (q * s_theta) @ w.T  # left singular vectors are exactly q
        predicted = predicted_singular_values(theta, k)
        actual = svd_compact(hessian(theta, k)).singulars
        actual = np.pad(actual, (0, size - actual.size))
        err = float(np.max(np.abs(predicted - actual))) / max(float(actual[0]), 1e-300)
        worst = max(worst, err)
        if err >= PREDICTION_TOL:
            failures += 1
    return ClauseResult("predicted Hessian spectrum exact in the aligned case",
                        trials, failures, worst)


def survey_prediction_general(trials: int, rng, size: int = 6):
    """Largest relative discrepancy of the spectrum prediction on general
    (non-aligned) extractors. Reported, never asserted."""
    from .spectral import predicted_singular_values

    worst = 0.0
    for _ in range(trials):
        k = random_pd_covariance(rng, size)
        theta = rng.standard_normal((size, size))
        predicted = predicted_singular_values(theta, k)
        actual = svd_compact(hessian(theta, k)).singulars
        actual = np.pad(actual, (0, size - actual.size))
        err = float(np.max(np.abs(predicted - actual))) / max(float(actual[0]), 1e-300)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# suite driver
# ---------------------------------------------------------------------------

LEVEL_TRIALS = {"fast": 100, "full": 1000}


def run_suite(level: str = "fast", seed: int = 0) -> list[ClauseResult]:
    trials = LEVEL_TRIALS[level]
    grad_trials = min(trials, 200)
    rng = np.random.default_rng(seed)
    results = [
        check_grad_well_s(grad_trials, rng),
        check_grad_ill_s(grad_trials, rng),
        check_grad_well_theta(grad_trials, rng),
        check_grad_ill_theta(grad_trials, rng),
        check_grad_kappa_theta(grad_trials, rng),
        check_bounds_well(trials, rng),
        check_bounds_ill(trials, rng),
        check_mono_well_s(trials, rng),
        check_mono_ill_s(trials, rng),
        check_mono_well_theta(trials, rng),
        check_mono_ill_theta(trials, rng),
        check_prediction_aligned(min(trials, 100), rng),
    ]
    return results


def render_results(results, general_discrepancy: float | None = None) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"[{status}] {r.name}: {r.trials - r.failures}/{r.trials} "
                     f"(worst {r.worst:.3e})")
    if general_discrepancy is not None:
        lines.append(f"[INFO] spectrum prediction discrepancy on general extractors: "
                     f"{general_discrepancy:.3e} (recorded, not asserted)")
    return "\n".join(lines)
