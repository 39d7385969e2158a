"""CIRCE family: E-M estimation of the mean (bias) and variances of calibration
variables from model-data residuals and sensitivities, iterative CIRCE, and the
block-structured MLE/MAP variant.

Every QoI ``j`` is modelled as ``d_j = s_j . theta_j + e_j`` with
``theta_j ~ N(b, diag(sigma^2))`` and ``e_j ~ N(0, eps_j^2)``; the E-M
iteration keeps the covariance diagonal.
"""

import itertools
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import CollinearityError, NumericalError, ValidationError
from .models import jacobian_fd, predict_for
from .stats import TRANSFORMS, GaussianParamSpec, change_of_variable, to_model_parameters

__all__ = [
    "change_of_variable", "CirceInputs", "CirceEstimate", "circe_loglik", "circe_em_step",
    "circe_no_bias", "circe_with_bias", "IterativeCirceConfig", "IterativeCirceResult",
    "iterative_circe", "linearity_deviation", "select_change_of_variable",
    "MleBlock", "ConjugatePrior", "mle_map_estimate", "blocks_from_circe_inputs",
]

log = logging.getLogger(__name__)

X_FLOOR = 1e-30
MONOTONE_SLACK = 1e-8
COLLINEAR_COS = 0.999
LINEARITY_THRESHOLD = 0.05
_LOG_2PI = np.log(2 * np.pi)


class CirceWarning(UserWarning):
    pass


@dataclass
class CirceInputs:
    """Residuals ``d_j = yE_j - yM_j``, sensitivities ``(J, I)`` and ``eps_j^2``."""

    residuals: np.ndarray
    sensitivities: np.ndarray
    noise_vars: np.ndarray = None
    estimate_bias: bool = False
    max_iter: int = 10_000
    tol: float = 1e-8
    sigma0: np.ndarray = None
    b0: np.ndarray = None
    transform: tuple = None

    def __post_init__(self):
        self.residuals = np.ravel(np.asarray(self.residuals, dtype=float))
        S = np.asarray(self.sensitivities, dtype=float)
        if S.ndim == 1:
            S = S[:, None]
        self.sensitivities = S
        J, I = S.shape
        if self.residuals.size != J:
            raise ValidationError(f"{self.residuals.size} residuals but {J} sensitivity rows")
        nv = np.zeros(J) if self.noise_vars is None else np.ravel(np.asarray(self.noise_vars, float))
        if nv.size == 1:
            nv = np.full(J, nv[0])
        if nv.size != J or np.any(nv < 0):
            raise ValidationError("noise_vars must be J non-negative values")
        self.noise_vars = nv
        if not (np.all(np.isfinite(self.residuals)) and np.all(np.isfinite(S))):
            raise ValidationError("residuals and sensitivities must be finite")
        self.sigma0 = np.ones(I) if self.sigma0 is None else np.broadcast_to(
            np.asarray(self.sigma0, dtype=float), (I,)).copy()
        self.b0 = np.zeros(I) if self.b0 is None else np.broadcast_to(
            np.asarray(self.b0, dtype=float), (I,)).copy()

    @property
    def n_qoi(self):
        return self.sensitivities.shape[0]

    @property
    def n_params(self):
        return self.sensitivities.shape[1]


@dataclass
class CirceEstimate:
    spec: GaussianParamSpec
    iterations: int
    converged: bool
    loglik_trace: list
    warnings: list = field(default_factory=list)
    unidentifiable: list = field(default_factory=list)
    clamped: bool = False

    @property
    def b(self):
        return self.spec.mean

    @property
    def var(self):
        return self.spec.var

    @property
    def monotone(self):
        tr = np.asarray(self.loglik_trace)
        return bool(np.all(np.diff(tr) >= -MONOTONE_SLACK)) if tr.size > 1 else True

    def to_dict(self):
        return {"spec": self.spec.to_dict(), "iterations": self.iterations,
                "converged": self.converged, "final_loglik": self.loglik_trace[-1],
                "monotone": self.monotone, "warnings": list(self.warnings),
                "unidentifiable": list(self.unidentifiable), "clamped": self.clamped}


def _xvals(S, eps2, s2):
    return eps2 + (S**2) @ s2


def circe_loglik(residuals, sensitivities, noise_vars, b, var):
    """Gaussian log-likelihood of independent residuals ``N(s_j . b, X_j)``."""
    S = np.atleast_2d(np.asarray(sensitivities, dtype=float))
    if S.shape[0] == 1 and np.size(residuals) != 1:
        S = S.T
    d = np.ravel(residuals)
    X = np.maximum(_xvals(S, np.ravel(noise_vars), np.ravel(var)), X_FLOOR)
    r = d - S @ np.ravel(b)
    return float(-0.5 * (d.size * _LOG_2PI + np.sum(np.log(X)) + np.sum(r**2 / X)))


def circe_em_step(r, S, eps2, s2):
    """One E-M update of the diagonal covariance given centred residuals ``r``.

    Returns the new diagonal and whether any ``X_j`` had to be clamped.
    """
    X = _xvals(S, eps2, s2)
    clamped = bool(np.any(X < X_FLOOR))
    X = np.maximum(X, X_FLOOR)
    # diagonal of Y_j = Sigma s_j s_j^T Sigma, per j
    Ydiag = (S**2) * (s2**2)[None, :]
    w = (r**2 / X - 1.0) / X
    return s2 + (Ydiag * w[:, None]).mean(axis=0), clamped


def _check_design(S, J, I, messages):
    if I > 3:
        messages.append(f"{I} parameters estimated; CIRCE is recommended for at most 3")
    if J < I:
        messages.append(f"fewer QoIs ({J}) than parameters ({I})")
    zero = [i for i in range(I) if not np.any(S[:, i])]
    norms = np.linalg.norm(S, axis=0)
    for i, k in itertools.combinations(range(I), 2):
        if norms[i] > 0 and norms[k] > 0:
            cos = abs(S[:, i] @ S[:, k]) / (norms[i] * norms[k])
            if cos > COLLINEAR_COS:
                messages.append(f"sensitivity columns {i} and {k} are nearly collinear "
                                f"(|cos| = {cos:.5f})")
    for i in zero:
        messages.append(f"parameter {i} has zero sensitivity; its variance is unidentifiable")
    return zero


def _emit(messages):
    for m in messages:
        warnings.warn(m, CirceWarning, stacklevel=3)


def _rel_change(new, old, scale):
    return float(np.max(np.abs(new - old) / np.maximum(scale, 1e-300))) if new.size else 0.0


def circe_no_bias(inp):
    """Estimate ``diag(sigma^2)`` with the bias held at zero."""
    S, d, eps2 = inp.sensitivities, inp.residuals, inp.noise_vars
    J, I = S.shape
    messages = []
    zero = _check_design(S, J, I, messages)
    b = np.zeros(I)
    s2 = inp.sigma0.copy()
    trace = [circe_loglik(d, S, eps2, b, s2)]
    converged = clamped = False
    it = 0
    for it in range(1, inp.max_iter + 1):
        new, c = circe_em_step(d, S, eps2, s2)
        clamped |= c
        if not np.all(np.isfinite(new)):
            raise NumericalError(f"CIRCE diverged at iteration {it}")
        new = np.maximum(new, 0.0)
        change = _rel_change(new, s2, np.abs(new))
        s2 = new
        trace.append(circe_loglik(d, S, eps2, b, s2))
        if change < inp.tol:
            converged = True
            break
    if clamped:
        messages.append("total variance X_j fell below 1e-30 and was clamped")
    est = CirceEstimate(GaussianParamSpec(b, s2, inp.transform), it, converged, trace,
                        messages, zero, clamped)
    if not est.monotone:
        messages.append("log-likelihood decreased between E-M iterations")
    _emit(messages)
    return est


def _collinear_pair(A):
    dg = np.sqrt(np.clip(np.diag(A), 1e-300, None))
    C = A / np.outer(dg, dg)
    np.fill_diagonal(C, 0.0)
    if C.size == 0 or C.shape[0] < 2:
        return (0,)
    i, k = np.unravel_index(np.argmax(np.abs(C)), C.shape)
    return tuple(sorted((int(i), int(k))))


def solve_bias(d, S, X):
    """Solve the weighted normal equations for the bias given total variances ``X``."""
    Xi = 1.0 / X
    A = S.T @ (S * Xi[:, None])
    rhs = S.T @ (d * Xi)
    ok = True
    try:
        c = linalg.cho_factor(A, lower=True)
        if np.linalg.cond(A) > 1e12:
            ok = False
    except linalg.LinAlgError:
        ok = False
    if not ok:
        pair = _collinear_pair(A)
        if len(pair) == 1 or pair[0] == pair[1]:
            raise CollinearityError("bias normal equations are singular (zero sensitivity)",
                                    pair=pair)
        raise CollinearityError(f"bias not identifiable: sensitivity columns {pair[0]} and "
                                f"{pair[1]} are collinear", pair=pair)
    return linalg.cho_solve(c, rhs)


def circe_with_bias(inp):
    """Joint estimation of the bias ``b`` and ``diag(sigma^2)``.

    Each iteration updates the variances with the previous bias, then solves the
    weighted normal equations for the new bias at the new variances.
    """
    S, d, eps2 = inp.sensitivities, inp.residuals, inp.noise_vars
    J, I = S.shape
    messages = []
    zero = _check_design(S, J, I, messages)
    b = inp.b0.copy()
    s2 = inp.sigma0.copy()
    trace = [circe_loglik(d, S, eps2, b, s2)]
    converged = clamped = False
    it = 0
    for it in range(1, inp.max_iter + 1):
        new_s2, c = circe_em_step(d - S @ b, S, eps2, s2)
        clamped |= c
        if not np.all(np.isfinite(new_s2)):
            raise NumericalError(f"CIRCE diverged at iteration {it}")
        new_s2 = np.maximum(new_s2, 0.0)
        X = np.maximum(_xvals(S, eps2, new_s2), X_FLOOR)
        new_b = solve_bias(d, S, X)
        ch_s = _rel_change(new_s2, s2, np.abs(new_s2))
        ch_b = _rel_change(new_b, b, np.maximum(np.abs(new_b), np.sqrt(new_s2)))
        s2, b = new_s2, new_b
        trace.append(circe_loglik(d, S, eps2, b, s2))
        if max(ch_s, ch_b) < inp.tol:
            converged = True
            break
    if clamped:
        messages.append("total variance X_j fell below 1e-30 and was clamped")
    est = CirceEstimate(GaussianParamSpec(b, s2, inp.transform), it, converged, trace,
                        messages, zero, clamped)
    if not est.monotone:
        messages.append("log-likelihood decreased between E-M iterations")
    _emit(messages)
    return est


# --------------------------------------------------------------------------
# iterative CIRCE on a model
# --------------------------------------------------------------------------

@dataclass
class IterativeCirceConfig:
    outer_max: int = 10
    outer_tol: float = 1e-4
    transform: tuple = None
    rel_step: float = None
    tol: float = 1e-8
    max_iter: int = 10_000


@dataclass
class IterativeCirceResult:
    estimate: CirceEstimate
    outer_iterations: int
    converged: bool
    bias_trace: list
    linearity: float = None
    advisories: list = field(default_factory=list)

    @property
    def spec(self):
        return self.estimate.spec

    def to_dict(self):
        out = self.estimate.to_dict()
        out.update(outer_iterations=self.outer_iterations, outer_converged=self.converged,
                   bias_trace=[np.asarray(b).tolist() for b in self.bias_trace],
                   linearity_deviation=self.linearity, advisories=list(self.advisories))
        return out


def _stack(model, experiments, theta, kinds, rel_step):
    """Residuals, noise variances and sensitivities in CIRCE-variable space."""
    nominal = model.nominal.values
    d, e, rows = [], [], []

    def pred(rec, t):
        return predict_for(model, rec, to_model_parameters(t, nominal, kinds)).ravel()

    for rec in experiments:
        d.append(rec.observed.values.ravel() - pred(rec, theta))
        e.append(rec.noise_var.ravel())
        J, _ = jacobian_fd(lambda t: pred(rec, t), theta, rel_step, model.param_labels)
        rows.append(J)
    return np.concatenate(d), np.concatenate(e), np.vstack(rows)


def iterative_circe(model, experiments, theta_start=None, config=None):
    """Repeat CIRCE with the expansion point moved to the previous bias estimate.

    Stops when the new bias shift is below ``outer_tol`` or when the model is
    exactly linear over the shift (a further run would return a zero shift).
    """
    config = config or IterativeCirceConfig()
    if config.outer_max < 1:
        raise ValidationError("outer_max must be >= 1")
    I = model.n_params
    kinds = tuple(config.transform or ("additive",) * I)
    rel_step = model.rel_step if config.rel_step is None else config.rel_step
    theta = np.zeros(I) if theta_start is None else np.asarray(theta_start, float).copy()
    d, eps2, S = _stack(model, experiments, theta, kinds, rel_step)
    sigma0 = None
    bias_trace = []
    converged = False
    est = None
    k = 0
    for k in range(1, config.outer_max + 1):
        inp = CirceInputs(d, S, eps2, estimate_bias=True, tol=config.tol,
                          max_iter=config.max_iter, sigma0=sigma0, transform=kinds)
        est = circe_with_bias(inp)
        shift = est.b
        theta_new = theta + shift
        bias_trace.append(theta_new.copy())
        sigma0 = np.maximum(est.var, 1e-12)
        if np.max(np.abs(shift)) < config.outer_tol:
            theta = theta_new
            converged = True
            break
        d_new, _, S_new = _stack(model, experiments, theta_new, kinds, rel_step)
        pred_d = d - S @ shift
        scale_d = np.max(np.abs(d)) + np.max(np.abs(d_new)) + 1e-300
        scale_s = np.max(np.abs(S)) + 1e-300
        theta = theta_new
        if (np.max(np.abs(S_new - S)) <= 1e-8 * scale_s
                and np.max(np.abs(d_new - pred_d)) <= 1e-9 * scale_d):
            converged = True
            break
        d, S = d_new, S_new
    spec = GaussianParamSpec(theta, est.var, kinds)
    final = CirceEstimate(spec, est.iterations, est.converged, est.loglik_trace,
                          est.warnings, est.unidentifiable, est.clamped)
    result = IterativeCirceResult(final, k, converged, bias_trace)
    if not converged:
        result.advisories.append(f"iterative CIRCE did not converge in {config.outer_max} "
                                 "outer iterations")
    result.linearity = linearity_deviation(model, experiments, spec, rel_step)
    if result.linearity > LINEARITY_THRESHOLD:
        result.advisories.append(
            f"linearity deviation {result.linearity:.3f} inside b +/- 2 sigma exceeds "
            f"{LINEARITY_THRESHOLD:.2f}; re-run iterative CIRCE or change the variable")
    return result


def linearity_deviation(model, experiments, spec, rel_step=None):
    """Largest relative departure of the model from its tangent plane at ``b +/- 2 sigma``.

    For each parameter and sign the deviation ``|y - y_tangent|`` is divided by
    the largest model variation ``|y - y(b)|`` over the QoIs of that probe.
    """
    rel_step = model.rel_step if rel_step is None else rel_step
    nominal = model.nominal.values
    kinds = spec.transform
    worst = 0.0
    for rec in experiments:
        def pred(t, rec=rec):
            return predict_for(model, rec, to_model_parameters(t, nominal, kinds)).ravel()

        y0 = pred(spec.mean)
        S, _ = jacobian_fd(pred, spec.mean, rel_step)
        for i in range(spec.dim):
            for sign in (-1.0, 1.0):
                step = np.zeros(spec.dim)
                step[i] = sign * 2.0 * spec.sd[i]
                if step[i] == 0.0:
                    continue
                y = pred(spec.mean + step)
                var = np.max(np.abs(y - y0))
                if var == 0.0:
                    continue
                worst = max(worst, float(np.max(np.abs(y - y0 - S @ step)) / var))
    return worst


def select_change_of_variable(model, experiments, config=None):
    """Run iterative CIRCE for every additive/exponential combination and keep the
    one with the smallest linearity deviation (ties favour additive)."""
    config = config or IterativeCirceConfig()
    I = model.n_params
    combos = sorted(itertools.product(TRANSFORMS, repeat=I),
                    key=lambda c: sum(k == "exponential" for k in c))
    best, table = None, []
    for kinds in combos:
        if any(k == "exponential" and v == 0.0 for k, v in zip(kinds, model.nominal.values)):
            continue
        cfg = IterativeCirceConfig(**{**config.__dict__, "transform": kinds})
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", CirceWarning)
            res = iterative_circe(model, experiments, config=cfg)
        table.append((kinds, res.linearity))
        if best is None or res.linearity < best.linearity:
            best = res
    return best.spec.transform, best, table


# --------------------------------------------------------------------------
# MLE / MAP with block-structured experiments
# --------------------------------------------------------------------------

@dataclass
class MleBlock:
    """One experiment: ``d ~ N(S mu, S Sigma S^T + diag(noise_vars))``."""

    residuals: np.ndarray
    sensitivities: np.ndarray
    noise_vars: np.ndarray

    def __post_init__(self):
        self.residuals = np.ravel(np.asarray(self.residuals, float))
        self.sensitivities = np.atleast_2d(np.asarray(self.sensitivities, float))
        self.noise_vars = np.broadcast_to(np.ravel(np.asarray(self.noise_vars, float)),
                                          self.residuals.shape).copy()
        if self.sensitivities.shape[0] != self.residuals.size:
            raise ValidationError("block sensitivities do not match residuals")


@dataclass
class ConjugatePrior:
    """Normal / scaled-inverse-chi-square prior per parameter.

    ``mu | sigma^2 ~ N(mean, sigma^2 / kappa)`` and
    ``sigma^2 ~ Inv-chi^2(dof, scale)``.
    """

    mean: np.ndarray
    kappa: np.ndarray
    scale: np.ndarray
    dof: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, float))
        n = self.mean.size
        for name in ("kappa", "scale", "dof"):
            v = np.broadcast_to(np.asarray(getattr(self, name), float), (n,)).copy()
            if np.any(v < 0):
                raise ValidationError(f"prior {name} must be non-negative")
            setattr(self, name, v)

    def logpdf(self, mu, var):
        var = np.maximum(var, 1e-300)
        return float(np.sum(-0.5 * np.log(var) - self.kappa * (mu - self.mean)**2 / (2 * var)
                            - (0.5 * self.dof + 1.0) * np.log(var)
                            - self.dof * self.scale / (2 * var)))


def blocks_from_circe_inputs(inp):
    """One scalar block per QoI: the same data CIRCE sees."""
    return [MleBlock(inp.residuals[j:j + 1], inp.sensitivities[j:j + 1], inp.noise_vars[j:j + 1])
            for j in range(inp.n_qoi)]


def _group(blocks):
    groups = {}
    for b in blocks:
        groups.setdefault(b.residuals.size, []).append(b)
    out = []
    for blist in groups.values():
        out.append((np.stack([b.residuals for b in blist]),
                    np.stack([b.sensitivities for b in blist]),
                    np.stack([b.noise_vars for b in blist])))
    return out


def _block_moments(groups, mu, s2):
    """E-step: posterior means/variances of each block's latent vector, and log-likelihood."""
    means, pvars, ll = [], [], 0.0
    for d, S, R in groups:
        n = d.shape[1]
        SS = S * s2[None, None, :]                       # S Sigma
        C = SS @ np.swapaxes(S, 1, 2) + R[:, :, None] * np.eye(n)[None]
        r = d - S @ mu
        try:
            L = np.linalg.cholesky(C)
        except np.linalg.LinAlgError:
            raise NumericalError("block covariance not positive definite; "
                                 "add measurement noise or check sensitivities") from None
        z = np.linalg.solve(L, r[:, :, None])[:, :, 0]
        ll += float(-0.5 * np.sum(n * _LOG_2PI + 2 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(1)
                                  + np.sum(z**2, axis=1)))
        Ci_r = np.linalg.solve(C, r[:, :, None])[:, :, 0]
        means.append(mu + np.einsum("bni,bn->bi", SS, Ci_r))
        Ci_SS = np.linalg.solve(C, SS)                   # C^-1 S Sigma
        pvars.append(s2 - np.einsum("bni,bni->bi", SS, Ci_SS))
    return np.vstack(means), np.vstack(pvars), ll


def mle_map_estimate(blocks, prior=None, max_iter=10_000, tol=1e-8, mu0=None, sigma0=None):
    """E-M maximization of the block likelihood (MLE) or of the posterior (MAP)."""
    blocks = list(blocks)
    if not blocks:
        raise ValidationError("no experiment blocks")
    I = blocks[0].sensitivities.shape[1]
    if any(b.sensitivities.shape[1] != I for b in blocks):
        raise ValidationError("blocks have different numbers of parameters")
    Sall = np.vstack([b.sensitivities for b in blocks])
    messages = []
    zero = _check_design(Sall, Sall.shape[0], I, messages)
    solve_bias(np.zeros(Sall.shape[0]), Sall, np.ones(Sall.shape[0]))  # identifiability guard
    groups = _group(blocks)
    n = len(blocks)
    mu = np.zeros(I) if mu0 is None else np.asarray(mu0, float).copy()
    s2 = np.ones(I) if sigma0 is None else np.asarray(sigma0, float).copy()

    def objective(ll, mu, s2):
        return ll + (prior.logpdf(mu, s2) if prior is not None else 0.0)

    m, p, ll = _block_moments(groups, mu, s2)
    trace = [objective(ll, mu, s2)]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if prior is None:
            new_mu = m.mean(axis=0)
            new_s2 = ((m - new_mu)**2 + p).mean(axis=0)
        else:
            new_mu = (m.sum(axis=0) + prior.kappa * prior.mean) / (n + prior.kappa)
            new_s2 = ((((m - new_mu)**2 + p).sum(axis=0) + prior.kappa * (new_mu - prior.mean)**2
                       + prior.dof * prior.scale) / (n + prior.dof + 3.0))
        new_s2 = np.maximum(new_s2, 0.0)
        if not (np.all(np.isfinite(new_mu)) and np.all(np.isfinite(new_s2))):
            raise NumericalError(f"MLE/MAP E-M diverged at iteration {it}")
        ch = max(_rel_change(new_s2, s2, np.abs(new_s2)),
                 _rel_change(new_mu, mu, np.maximum(np.abs(new_mu), np.sqrt(new_s2))))
        mu, s2 = new_mu, new_s2
        m, p, ll = _block_moments(groups, mu, s2)
        trace.append(objective(ll, mu, s2))
        if ch < tol:
            converged = True
            break
    est = CirceEstimate(GaussianParamSpec(mu, s2), it, converged, trace, messages, zero)
    if not est.monotone:
        messages.append("objective decreased between E-M iterations")
    _emit(messages)
    return est
