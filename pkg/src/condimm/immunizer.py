"""Immunization training: the preconditioned condition-number-regularized
descent loop plus the three reference baselines (ill-penalty-only descent,
direct kappa-difference descent, and bi-level ascent with an unrolled inner
loop), with full-batch deterministic execution and per-epoch telemetry."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import regularizers as reg
from .datasets import Dataset
from .errors import (
    CondimmError,
    DegenerateSpectrum,
    DimensionMismatch,
    NonFiniteUpdate,
    NonUniqueExtreme,
    RankOne,
    ZeroMatrix,
)
from .probe import LossKind
from .spectral import (
    Array,
    as_matrix,
    condition_number,
    covariance,
    hessian,
    precond_apply,
    svd_compact,
)


class Method(str, enum.Enum):
    OURS = "ours"
    RILL_ONLY = "rill_only"
    OPT_KAPPA = "opt_kappa"
    IMMA = "imma"


class OptimizerKind(str, enum.Enum):
    GRADIENT_DESCENT = "gd"
    ADAM = "adam"


@dataclass(frozen=True)
class AdamParams:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class ImmunizationConfig:
    eta: float
    lambda_p: float
    lambda_h: float
    epochs: int
    loss: LossKind = LossKind.SQUARED_ERROR
    ridge: float = 1e-6
    method: Method = Method.OURS
    optimizer: OptimizerKind = OptimizerKind.GRADIENT_DESCENT
    adam: AdamParams = AdamParams()
    seed: int = 0
    auto_balance: bool = False
    auto_balance_base: float = 1.0
    theta0: str = "identity"  # or "random"
    imma_inner_steps: int = 1
    imma_inner_lr: float | None = None
    imma_inner_var: str = "theta"  # lower-level variable: "theta" or "w"

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError(f"eta must be > 0, got {self.eta}")
        if self.lambda_p < 0 or self.lambda_h < 0:
            raise ValueError("lambda_p and lambda_h must be >= 0")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.theta0 not in ("identity", "random"):
            raise ValueError(f"theta0 must be 'identity' or 'random', got {self.theta0!r}")
        if self.imma_inner_var not in ("theta", "w"):
            raise ValueError(f"imma_inner_var must be 'theta' or 'w', got {self.imma_inner_var!r}")


@dataclass
class EpochRecord:
    epoch: int
    kappa_p: float
    kappa_h: float
    supervised_loss: float
    r_well: float
    r_ill: float
    grad_norm_supervised: float
    grad_norm_well: float
    grad_norm_ill: float
    rir: float


@dataclass
class TrainReport:
    method: Method
    records: list[EpochRecord] = field(default_factory=list)
    theta_final: Array | None = None
    warnings: list[str] = field(default_factory=list)
    lambda_p: float = 0.0
    lambda_h: float = 0.0
    kappa_ref_p: float = math.nan
    kappa_ref_h: float = math.nan

    TELEMETRY_COLUMNS = (
        "epoch", "kappa_p", "kappa_h", "supervised_loss", "r_well", "r_ill",
        "grad_norm_supervised", "grad_norm_well", "grad_norm_ill", "rir",
    )

    def telemetry_rows(self):
        for r in self.records:
            yield (r.epoch, r.kappa_p, r.kappa_h, r.supervised_loss, r.r_well,
                   r.r_ill, r.grad_norm_supervised, r.grad_norm_well,
                   r.grad_norm_ill, r.rir)


# ---------------------------------------------------------------------------
# supervised loss plumbing
# ---------------------------------------------------------------------------

_LOGIT_CLAMP = 30.0


def supervised_loss_and_grads(x: Array, y: Array, theta: Array, omega: Array,
                              loss: LossKind) -> tuple[float, Array, Array]:
    """Full-batch supervised loss with gradients in the classifier and the
    extractor.

    Training losses are averaged over samples (mean squared error / mean
    binary cross-entropy), so learning rates stay meaningful across dataset
    sizes. The probe module keeps the summed convention instead; the two
    differ only by the constant 1/N.
    """
    n = x.shape[0]
    feats = x @ theta
    if loss is LossKind.SQUARED_ERROR:
        resid = feats @ omega - y
        value = float(np.sum(resid * resid)) / n
        g_omega = 2.0 * (feats.T @ resid) / n
        g_theta = 2.0 * (x.T @ (resid @ omega.T)) / n
        return value, g_omega, g_theta
    z = np.clip(feats @ omega, -_LOGIT_CLAMP, _LOGIT_CLAMP)
    value = float(np.sum(np.logaddexp(0.0, z) - y * z)) / n
    p = 1.0 / (1.0 + np.exp(-z))
    g_omega = feats.T @ (p - y) / n
    g_theta = x.T @ ((p - y) @ omega.T) / n
    return value, g_omega, g_theta


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: Array
    v: Array
    t: int = 0

    @classmethod
    def zeros_like(cls, template: Array) -> "AdamState":
        return cls(m=np.zeros_like(template), v=np.zeros_like(template))


def adam_step(state: AdamState, grad: Array, eta: float,
              params: AdamParams = AdamParams()) -> tuple[AdamState, Array]:
    """Bias-corrected moment update; returns the new state and the signed
    increment to add to the parameters."""
    t = state.t + 1
    m = params.beta1 * state.m + (1.0 - params.beta1) * grad
    v = params.beta2 * state.v + (1.0 - params.beta2) * (grad * grad)
    m_hat = m / (1.0 - params.beta1 ** t)
    v_hat = v / (1.0 - params.beta2 ** t)
    update = -eta * m_hat / (np.sqrt(v_hat) + params.eps)
    return AdamState(m=m, v=v, t=t), update


class _ParamOptimizer:
    """One parameter tensor's update rule under the configured optimizer."""

    def __init__(self, cfg: ImmunizationConfig, template: Array):
        self._cfg = cfg
        self._adam = AdamState.zeros_like(template) if cfg.optimizer is OptimizerKind.ADAM else None

    def apply(self, param: Array, grad: Array) -> Array:
        if self._adam is None:
            return param - self._cfg.eta * grad
        self._adam, update = adam_step(self._adam, grad, self._cfg.eta, self._cfg.adam)
        return param + update


# ---------------------------------------------------------------------------
# shared run helpers
# ---------------------------------------------------------------------------


def initial_theta(cfg: ImmunizationConfig, d_in: int) -> Array:
    if cfg.theta0 == "identity":
        return np.eye(d_in)
    rng = np.random.default_rng(cfg.seed)
    return rng.standard_normal((d_in, d_in)) / np.sqrt(d_in)


def _check_finite(report: TrainReport, **params) -> None:
    for name, value in params.items():
        if not np.isfinite(value).all():
            raise NonFiniteUpdate(f"{name} became non-finite", report=report)


def _safe_kappa(h: Array) -> float:
    try:
        return condition_number(h).kappa
    except (ZeroMatrix, CondimmError):
        return math.nan


def _kappa_from(dec) -> float:
    if dec.rank == 0:
        return math.nan
    return float(dec.singulars[0]) / float(dec.singulars[dec.rank - 1])


def _epoch_rir(kappa_p: float, kappa_h: float, ref_p: float, ref_h: float) -> float:
    if any(math.isnan(v) for v in (kappa_p, kappa_h, ref_p, ref_h)):
        return math.nan
    return (kappa_h / ref_h) / (kappa_p / ref_p)


class _CachedPreconditioner:
    """Factor (K + ridge I) once; equivalent to precond_apply per call."""

    def __init__(self, k: Array, ridge: float):
        from scipy.linalg import cho_factor

        self._factor = cho_factor(k + ridge * np.eye(k.shape[0]), lower=True,
                                  check_finite=False)

    def solve(self, g: Array) -> Array:
        from scipy.linalg import cho_solve

        return cho_solve(self._factor, g, check_finite=False)


# ---------------------------------------------------------------------------
# the main training loop
# ---------------------------------------------------------------------------


def immunize(cfg: ImmunizationConfig, d_p: Dataset, x_h,
             theta0: Array | None = None,
             omega0: Array | None = None) -> tuple[Array, TrainReport]:
    """Full-batch immunization training.

    Per epoch: classifier step on the supervised gradient, then an extractor
    step on the supervised gradient plus the covariance-preconditioned
    gradients of the well penalty (pretrain Hessian) and the ill penalty
    (harmful Hessian), each scaled by its lambda. Spectral-tie failures in a
    penalty skip that term for the epoch with a recorded warning.
    """
    x_p = as_matrix(d_p.x, "pretrain features")
    y_p = as_matrix(d_p.y, "pretrain targets")
    xh = as_matrix(x_h, "harmful features")
    d_in = x_p.shape[1]
    if xh.shape[1] != d_in:
        raise DimensionMismatch(
            f"harmful features have {xh.shape[1]} columns, pretrain has {d_in}"
        )

    theta = initial_theta(cfg, d_in) if theta0 is None else as_matrix(theta0).copy()
    if theta.shape != (d_in, d_in):
        raise DimensionMismatch(f"theta0 must be {d_in}x{d_in}, got {theta.shape}")
    omega = np.zeros((d_in, y_p.shape[1])) if omega0 is None else as_matrix(omega0).copy()

    k_p = covariance(x_p)
    k_h = covariance(xh)

    report = TrainReport(method=Method.OURS, lambda_p=cfg.lambda_p, lambda_h=cfg.lambda_h,
                         kappa_ref_p=_safe_kappa(k_p), kappa_ref_h=_safe_kappa(k_h))

    if cfg.auto_balance:
        lam_p, lam_h = auto_balance_lambdas(d_p, xh, theta, base=cfg.auto_balance_base,
                                            loss=cfg.loss, ridge=cfg.ridge, omega=omega)
        report.lambda_p, report.lambda_h = lam_p, lam_h
        report.warnings.append(f"auto-balanced lambdas: lambda_p={lam_p}, lambda_h={lam_h}")
    else:
        lam_p, lam_h = cfg.lambda_p, cfg.lambda_h

    pre_p = _CachedPreconditioner(k_p, cfg.ridge) if lam_p > 0 else None
    pre_h = _CachedPreconditioner(k_h, cfg.ridge) if lam_h > 0 else None
    opt_theta = _ParamOptimizer(cfg, theta)
    opt_omega = _ParamOptimizer(cfg, omega)

    for epoch in range(cfg.epochs):
        loss_value, g_omega, g_theta = supervised_loss_and_grads(
            x_p, y_p, theta, omega, cfg.loss)
        omega = opt_omega.apply(omega, g_omega)

        # one decomposition per Hessian per epoch; kappa, penalty values, and
        # penalty gradients all read from it
        h_p = hessian(theta, k_p)
        h_h = hessian(theta, k_h)
        dec_p = svd_compact(h_p)
        dec_h = svd_compact(h_h)
        kappa_p = _kappa_from(dec_p)
        kappa_h = _kappa_from(dec_h)

        r_well_val = r_ill_val = math.nan
        if dec_p.rank > 0:
            r_well_val = reg._well_value_from(h_p, dec_p)
        try:
            if dec_h.rank > 0:
                r_ill_val = reg._ill_value_from(h_h, dec_h).value
        except CondimmError:
            pass

        combined = g_theta
        norm_well = norm_ill = math.nan
        if lam_p > 0:
            try:
                if dec_p.rank == 0:
                    raise ZeroMatrix("pretrain Hessian vanished")
                term = pre_p.solve(reg._well_grad_theta_from(theta, k_p, h_p, dec_p))
                norm_well = float(np.linalg.norm(term))
                combined = combined + lam_p * term
            except (NonUniqueExtreme, DegenerateSpectrum, RankOne, ZeroMatrix) as exc:
                report.warnings.append(f"epoch {epoch}: well penalty skipped ({exc})")
        if lam_h > 0:
            try:
                if dec_h.rank == 0:
                    raise ZeroMatrix("harmful Hessian vanished")
                term = pre_h.solve(reg._ill_grad_theta_from(theta, k_h, h_h, dec_h))
                norm_ill = float(np.linalg.norm(term))
                combined = combined + lam_h * term
            except (NonUniqueExtreme, DegenerateSpectrum, RankOne, ZeroMatrix) as exc:
                report.warnings.append(f"epoch {epoch}: ill penalty skipped ({exc})")

        theta = opt_theta.apply(theta, combined)

        report.records.append(EpochRecord(
            epoch=epoch, kappa_p=kappa_p, kappa_h=kappa_h,
            supervised_loss=loss_value, r_well=r_well_val, r_ill=r_ill_val,
            grad_norm_supervised=float(np.linalg.norm(g_theta)),
            grad_norm_well=norm_well, grad_norm_ill=norm_ill,
            rir=_epoch_rir(kappa_p, kappa_h, report.kappa_ref_p, report.kappa_ref_h),
        ))
        _check_finite(report, theta=theta, omega=omega)

    report.theta_final = theta
    return theta, report


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


def baseline_rill_only(cfg: ImmunizationConfig, x_h, theta0: Array | None = None,
                       clip_to_safe_step: bool = False) -> tuple[Array, TrainReport]:
    """Descend the ill penalty of the harmful Hessian alone, unpreconditioned.

    ``clip_to_safe_step`` limits each step to half the extractor-space safe
    bound, which keeps kappa growth monotone in practice.
    """
    xh = as_matrix(x_h, "harmful features")
    k_h = covariance(xh)
    d_in = k_h.shape[0]
    theta = initial_theta(cfg, d_in) if theta0 is None else as_matrix(theta0).copy()
    report = TrainReport(method=Method.RILL_ONLY, lambda_h=1.0,
                         kappa_ref_h=_safe_kappa(k_h))
    opt = _ParamOptimizer(cfg, theta)

    for epoch in range(cfg.epochs):
        h_h = hessian(theta, k_h)
        dec_h = svd_compact(h_h)
        kappa_h = _kappa_from(dec_h)
        r_ill_val = math.nan
        grad = None
        try:
            if dec_h.rank == 0:
                raise ZeroMatrix("harmful Hessian vanished")
            r_ill_val = reg._ill_value_from(h_h, dec_h).value
            grad = reg._ill_grad_theta_from(theta, k_h, h_h, dec_h)
        except (NonUniqueExtreme, DegenerateSpectrum, RankOne, ZeroMatrix) as exc:
            report.warnings.append(f"epoch {epoch}: ill penalty skipped ({exc})")
        norm_ill = math.nan
        if grad is not None:
            norm_ill = float(np.linalg.norm(grad))
            if clip_to_safe_step:
                bound = reg.safe_step_ill_on_theta(h_h).max_step
                step = min(cfg.eta, 0.5 * bound)
                theta = theta - step * grad
            else:
                theta = opt.apply(theta, grad)
        report.records.append(EpochRecord(
            epoch=epoch, kappa_p=math.nan, kappa_h=kappa_h,
            supervised_loss=math.nan, r_well=math.nan, r_ill=r_ill_val,
            grad_norm_supervised=math.nan, grad_norm_well=math.nan,
            grad_norm_ill=norm_ill, rir=math.nan,
        ))
        _check_finite(report, theta=theta)

    report.theta_final = theta
    return theta, report


def _kappa_grad_theta_from(t: Array, c: Array, dec) -> Array:
    if dec.rank < 2:
        raise RankOne("kappa gradient needs at least rank 2")
    reg._require_unique_max(dec)
    reg._require_unique_min(dec)
    smax = float(dec.singulars[0])
    smin = float(dec.singulars[dec.rank - 1])
    v1 = dec.right[:, 0]
    vk = dec.right[:, dec.rank - 1]
    core = np.outer(v1, v1) / smin - (smax / (smin * smin)) * np.outer(vk, vk)
    return 2.0 * (c @ t @ core)


def kappa_grad_theta(theta, k) -> Array:
    """Gradient of kappa(H(theta)) in the extractor:
    2 K theta ((1/sigma_min) v_1 v_1^T - (sigma_max/sigma_min^2) v_k v_k^T)."""
    t = as_matrix(theta, "theta")
    c = as_matrix(k, "covariance")
    h = hessian(t, c)
    return _kappa_grad_theta_from(t, c, reg._nonzero_decomposition(h))


def baseline_opt_kappa(cfg: ImmunizationConfig, d_p: Dataset, x_h,
                       theta0: Array | None = None) -> tuple[Array, TrainReport]:
    """Descend kappa(H_P(theta)) - kappa(H_H(theta)) directly; epochs where a
    kappa gradient is undefined skip that component with a warning."""
    x_p = as_matrix(d_p.x, "pretrain features")
    xh = as_matrix(x_h, "harmful features")
    if x_p.shape[1] != xh.shape[1]:
        raise DimensionMismatch("pretrain and harmful feature widths differ")
    k_p = covariance(x_p)
    k_h = covariance(xh)
    d_in = k_p.shape[0]
    theta = initial_theta(cfg, d_in) if theta0 is None else as_matrix(theta0).copy()
    report = TrainReport(method=Method.OPT_KAPPA,
                         kappa_ref_p=_safe_kappa(k_p), kappa_ref_h=_safe_kappa(k_h))
    opt = _ParamOptimizer(cfg, theta)

    for epoch in range(cfg.epochs):
        h_p = hessian(theta, k_p)
        h_h = hessian(theta, k_h)
        kappa_p = _safe_kappa(h_p)
        kappa_h = _safe_kappa(h_h)
        grad = np.zeros_like(theta)
        have_any = False
        for sign, cov, label in ((1.0, k_p, "pretrain"), (-1.0, k_h, "harmful")):
            try:
                grad = grad + sign * kappa_grad_theta(theta, cov)
                have_any = True
            except (NonUniqueExtreme, DegenerateSpectrum, RankOne, ZeroMatrix) as exc:
                report.warnings.append(
                    f"epoch {epoch}: kappa gradient on {label} skipped ({exc})")
        if have_any:
            theta = opt.apply(theta, grad)
        report.records.append(EpochRecord(
            epoch=epoch, kappa_p=kappa_p, kappa_h=kappa_h,
            supervised_loss=math.nan, r_well=math.nan, r_ill=math.nan,
            grad_norm_supervised=math.nan, grad_norm_well=math.nan,
            grad_norm_ill=float(np.linalg.norm(grad)),
            rir=_epoch_rir(kappa_p, kappa_h, report.kappa_ref_p, report.kappa_ref_h),
        ))
        _check_finite(report, theta=theta)

    report.theta_final = theta
    return theta, report


# ---------------------------------------------------------------------------
# bi-level baseline with exact unrolled differentiation
# ---------------------------------------------------------------------------


def _loss_grad_theta_only(x, y, theta, w, loss):
    _, _, g_theta = supervised_loss_and_grads(x, y, theta, w, loss)
    return g_theta


def _theta_hvp(x, y, theta, w, v, loss):
    """Directional derivative of the theta-gradient of the loss along v."""
    n = x.shape[0]
    if loss is LossKind.SQUARED_ERROR:
        return 2.0 * (x.T @ ((x @ v) @ (w @ w.T))) / n
    z = x @ theta @ w
    inside = np.abs(z) < _LOGIT_CLAMP
    zc = np.clip(z, -_LOGIT_CLAMP, _LOGIT_CLAMP)
    p = 1.0 / (1.0 + np.exp(-zc))
    weight = np.where(inside, p * (1.0 - p), 0.0)
    return x.T @ ((weight * (x @ v @ w)) @ w.T) / n


def _w_grad(x, y, theta, w, loss):
    n = x.shape[0]
    feats = x @ theta
    if loss is LossKind.SQUARED_ERROR:
        return 2.0 * (feats.T @ (feats @ w - y)) / n
    z = np.clip(feats @ w, -_LOGIT_CLAMP, _LOGIT_CLAMP)
    p = 1.0 / (1.0 + np.exp(-z))
    return feats.T @ (p - y) / n


def _w_step_vjps(x, y, theta, w, v_w, loss):
    """VJPs of the map (w, theta) -> grad_w L with adjoint v_w.

    Returns the pair (contribution to the w adjoint, contribution to the
    theta gradient)."""
    n = x.shape[0]
    feats = x @ theta
    if loss is LossKind.SQUARED_ERROR:
        resid = feats @ w - y
        to_w = 2.0 * (feats.T @ (feats @ v_w)) / n
        to_theta = (2.0 * (x.T @ (resid @ v_w.T))
                    + 2.0 * (x.T @ (feats @ v_w)) @ w.T) / n
        return to_w, to_theta
    z = feats @ w
    inside = np.abs(z) < _LOGIT_CLAMP
    zc = np.clip(z, -_LOGIT_CLAMP, _LOGIT_CLAMP)
    p = 1.0 / (1.0 + np.exp(-zc))
    s = np.where(inside, p * (1.0 - p), 0.0)
    to_w = feats.T @ (s * (feats @ v_w)) / n
    to_theta = (x.T @ ((p - y) @ v_w.T) + x.T @ ((s * (feats @ v_w)) @ w.T)) / n
    return to_w, to_theta


def imma_outer_objective(d_p: Dataset, d_h: Dataset, theta, w, omega,
                         inner_steps: int, inner_lr: float, loss: LossKind,
                         inner_var: str = "theta") -> float:
    """L(harmful) - L(pretrain) evaluated after the unrolled inner loop."""
    if inner_var == "theta":
        phi = theta
        for _ in range(inner_steps):
            phi = phi - inner_lr * _loss_grad_theta_only(d_h.x, d_h.y, phi, w, loss)
        lh, _, _ = supervised_loss_and_grads(d_h.x, d_h.y, phi, w, loss)
        lp, _, _ = supervised_loss_and_grads(d_p.x, d_p.y, phi, omega, loss)
        return lh - lp
    ws = w
    for _ in range(inner_steps):
        ws = ws - inner_lr * _w_grad(d_h.x, d_h.y, theta, ws, loss)
    lh, _, _ = supervised_loss_and_grads(d_h.x, d_h.y, theta, ws, loss)
    lp, _, _ = supervised_loss_and_grads(d_p.x, d_p.y, theta, omega, loss)
    return lh - lp


def imma_outer_gradient(d_p: Dataset, d_h: Dataset, theta, w, omega,
                        inner_steps: int, inner_lr: float, loss: LossKind,
                        inner_var: str = "theta") -> Array:
    """Exact gradient of the outer objective in theta, reverse-accumulated
    through the unrolled inner descent."""
    if inner_var == "theta":
        trace = [theta]
        phi = theta
        for _ in range(inner_steps):
            phi = phi - inner_lr * _loss_grad_theta_only(d_h.x, d_h.y, phi, w, loss)
            trace.append(phi)
        _, _, gh = supervised_loss_and_grads(d_h.x, d_h.y, phi, w, loss)
        _, _, gp = supervised_loss_and_grads(d_p.x, d_p.y, phi, omega, loss)
        adjoint = gh - gp
        for s in range(inner_steps - 1, -1, -1):
            adjoint = adjoint - inner_lr * _theta_hvp(
                d_h.x, d_h.y, trace[s], w, adjoint, loss)
        return adjoint

    trace = [w]
    ws = w
    for _ in range(inner_steps):
        ws = ws - inner_lr * _w_grad(d_h.x, d_h.y, theta, ws, loss)
        trace.append(ws)
    lh_grads = supervised_loss_and_grads(d_h.x, d_h.y, theta, ws, loss)
    lp_grads = supervised_loss_and_grads(d_p.x, d_p.y, theta, omega, loss)
    g_theta = lh_grads[2] - lp_grads[2]
    adj_w = _w_grad(d_h.x, d_h.y, theta, ws, loss)  # dL_H/dw at the unrolled end
    for s in range(inner_steps - 1, -1, -1):
        to_w, to_theta = _w_step_vjps(d_h.x, d_h.y, theta, trace[s], adj_w, loss)
        g_theta = g_theta - inner_lr * to_theta
        adj_w = adj_w - inner_lr * to_w
    return g_theta


def baseline_imma(cfg: ImmunizationConfig, d_p: Dataset, d_h: Dataset,
                  theta0: Array | None = None, w0: Array | None = None,
                  omega0: Array | None = None,
                  inner_steps: int | None = None,
                  inner_lr: float | None = None) -> tuple[Array, TrainReport]:
    """Bi-level baseline: classifiers descend their tasks, the extractor
    ascends L(harmful) - L(pretrain) evaluated after the unrolled inner loop."""
    steps = cfg.imma_inner_steps if inner_steps is None else inner_steps
    lr = inner_lr if inner_lr is not None else (
        cfg.imma_inner_lr if cfg.imma_inner_lr is not None else cfg.eta)
    x_p = as_matrix(d_p.x, "pretrain features")
    xh = as_matrix(d_h.x, "harmful features")
    if x_p.shape[1] != xh.shape[1]:
        raise DimensionMismatch("pretrain and harmful feature widths differ")
    d_in = x_p.shape[1]
    k_p = covariance(x_p)
    k_h = covariance(xh)
    theta = initial_theta(cfg, d_in) if theta0 is None else as_matrix(theta0).copy()
    w = np.zeros((d_in, d_h.y.shape[1])) if w0 is None else as_matrix(w0).copy()
    omega = np.zeros((d_in, d_p.y.shape[1])) if omega0 is None else as_matrix(omega0).copy()

    report = TrainReport(method=Method.IMMA,
                         kappa_ref_p=_safe_kappa(k_p), kappa_ref_h=_safe_kappa(k_h))
    opt_theta = _ParamOptimizer(cfg, theta)
    opt_w = _ParamOptimizer(cfg, w)
    opt_omega = _ParamOptimizer(cfg, omega)

    for epoch in range(cfg.epochs):
        lp, g_omega, _ = supervised_loss_and_grads(x_p, d_p.y, theta, omega, cfg.loss)
        lh, g_w, _ = supervised_loss_and_grads(xh, d_h.y, theta, w, cfg.loss)
        omega = opt_omega.apply(omega, g_omega)
        w = opt_w.apply(w, g_w)

        outer_grad = imma_outer_gradient(d_p, d_h, theta, w, omega, steps, lr,
                                         cfg.loss, cfg.imma_inner_var)
        theta = opt_theta.apply(theta, -outer_grad)  # ascend the outer objective

        kappa_p = _safe_kappa(hessian(theta, k_p))
        kappa_h = _safe_kappa(hessian(theta, k_h))
        report.records.append(EpochRecord(
            epoch=epoch, kappa_p=kappa_p, kappa_h=kappa_h,
            supervised_loss=lp, r_well=math.nan, r_ill=math.nan,
            grad_norm_supervised=float(np.linalg.norm(g_omega)),
            grad_norm_well=math.nan,
            grad_norm_ill=float(np.linalg.norm(outer_grad)),
            rir=_epoch_rir(kappa_p, kappa_h, report.kappa_ref_p, report.kappa_ref_h),
        ))
        _check_finite(report, theta=theta, w=w, omega=omega)

    report.theta_final = theta
    return theta, report


# ---------------------------------------------------------------------------
# lambda balancing
# ---------------------------------------------------------------------------

_SNAP_MANTISSAS = (1.0, 2.0, 3.0, 5.0)


def snap_to_grid(value: float) -> float:
    """Nearest {1,2,3,5} x 10^m grid point in log distance."""
    if value <= 0 or not math.isfinite(value):
        raise ValueError(f"cannot snap {value} to the positive grid")
    best, best_dist = None, math.inf
    exponent = math.floor(math.log10(value))
    for m in (exponent - 1, exponent, exponent + 1):
        for mant in _SNAP_MANTISSAS:
            candidate = mant * 10.0 ** m
            dist = abs(math.log10(value) - math.log10(candidate))
            if dist < best_dist:
                best, best_dist = candidate, dist
    return best


def auto_balance_lambdas(d_p: Dataset, x_h, theta0, base: float = 1.0,
                         loss: LossKind = LossKind.SQUARED_ERROR,
                         ridge: float = 1e-6,
                         omega: Array | None = None) -> tuple[float, float]:
    """Pick lambdas so each preconditioned penalty gradient matches
    ``base`` times the supervised gradient norm at theta0, snapped to the
    {1,2,3,5} x 10^m grid.

    The supervised scale is taken at the least-squares classifier when no
    omega is supplied (a zero classifier would zero the extractor gradient).
    """
    from .probe import ProbeProblem, closed_form_optimum

    x_p = as_matrix(d_p.x, "pretrain features")
    theta = as_matrix(theta0, "theta0")
    k_p = covariance(x_p)
    k_h = covariance(as_matrix(x_h, "harmful features"))
    if omega is None or not np.any(omega):
        omega = closed_form_optimum(
            ProbeProblem(x=x_p, y=d_p.y, theta=theta, loss=LossKind.SQUARED_ERROR))
    _, _, g_theta = supervised_loss_and_grads(x_p, d_p.y, theta, omega, loss)
    sup_norm = float(np.linalg.norm(g_theta))
    well_norm = float(np.linalg.norm(
        precond_apply(k_p, reg.r_well_grad_theta(theta, k_p), ridge)))
    ill_norm = float(np.linalg.norm(
        precond_apply(k_h, reg.r_ill_grad_theta(theta, k_h), ridge)))
    target = base * sup_norm
    if target <= 0:
        raise ZeroMatrix("supervised gradient vanished at theta0; cannot balance")
    return snap_to_grid(target / well_norm), snap_to_grid(target / ill_norm)


# ---------------------------------------------------------------------------
# method dispatch
# ---------------------------------------------------------------------------


def run_method(cfg: ImmunizationConfig, d_p: Dataset, d_h: Dataset,
               theta0: Array | None = None) -> tuple[Array, TrainReport]:
    """Run the configured method on a (pretrain, harmful) dataset pair."""
    if cfg.method is Method.OURS:
        return immunize(cfg, d_p, d_h.x, theta0=theta0)
    if cfg.method is Method.RILL_ONLY:
        return baseline_rill_only(cfg, d_h.x, theta0=theta0)
    if cfg.method is Method.OPT_KAPPA:
        return baseline_opt_kappa(cfg, d_p, d_h.x, theta0=theta0)
    if cfg.method is Method.IMMA:
        return baseline_imma(cfg, d_p, d_h, theta0=theta0)
    raise ValueError(f"unknown method {cfg.method}")
