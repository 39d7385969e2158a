"""Model calibration through data assimilation.

A linearity gate decides between a closed-form regularized update (linear
systems) and MCMC sampling of the posterior (non-linear systems). The closed
form minimizes

    C(theta) = alpha^2 (theta - theta_p)^T Sp^-1 (theta - theta_p) + r^T Se^-1 r,
    r = d - S (theta - theta_p),

with the regularization weight ``alpha`` chosen from the L-curve corner.
"""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .errors import ValidationError
from .mcmc import McmcConfig, mh_sample
from .models import finite_difference_sensitivity, jacobian_fd, predict_for, evaluate_model
from .stats import check_cov, log_mvn_pdf, solve_spd

__all__ = ["LinearityReport", "McdaPosterior", "LCurve", "linearity_test", "mcda_cost",
           "mcda_deterministic", "select_alpha_lcurve", "mcda_probabilistic",
           "stacked_predictor", "mcda"]

log = logging.getLogger(__name__)

R2_THRESHOLD = 0.99
MIN_CHAIN = 10_000
STALL = 1e-3


class McdaWarning(UserWarning):
    pass


def _as_cov(c, n, name):
    c = np.asarray(c, dtype=float)
    if c.ndim <= 1:
        c = np.diag(np.broadcast_to(c, (n,)))
    if c.shape != (n, n):
        raise ValidationError(f"{name} must be {n}x{n}")
    return check_cov(c, name)


@dataclass
class LinearityReport:
    r2: np.ndarray
    route: str
    probes: np.ndarray
    threshold: float = R2_THRESHOLD

    @property
    def min_r2(self):
        return float(np.min(self.r2))

    def to_dict(self):
        return {"r2": self.r2.tolist(), "min_r2": self.min_r2, "route": self.route,
                "threshold": self.threshold, "n_probe": int(self.probes.shape[0])}


def linearity_test(model, x, theta_prior, sigma_prior, n_probe=16, threshold=R2_THRESHOLD,
                   seed=0, rel_step=None):
    """R^2 of the tangent-plane prediction at Latin-hypercube probes in ``theta_p +/- 2 sigma``.

    ``sigma_prior`` is a vector of standard deviations or a covariance matrix.
    QoIs that do not vary across the probes count as linear (R^2 = 1).
    """
    if n_probe < 8:
        raise ValidationError("n_probe must be >= 8")
    tp = np.atleast_1d(np.asarray(theta_prior, dtype=float))
    sp = np.asarray(sigma_prior, dtype=float)
    sd = np.sqrt(np.diag(sp)) if sp.ndim == 2 else np.broadcast_to(sp, tp.shape)
    u = qmc.LatinHypercube(d=tp.size, seed=np.random.default_rng(seed)).random(n_probe)
    probes = tp + (4.0 * u - 2.0) * sd
    y0 = evaluate_model(model, x, tp).flat
    S = finite_difference_sensitivity(model, x, tp, rel_step).entries
    Y = np.array([evaluate_model(model, x, t).flat for t in probes])
    Yt = y0 + (probes - tp) @ S.T
    ss_res = np.sum((Y - Yt)**2, axis=0)
    ss_tot = np.sum((Y - Y.mean(axis=0))**2, axis=0)
    scale = np.maximum(np.abs(Y).max(axis=0), 1e-300)
    flat = ss_tot <= (1e-12 * scale)**2 * n_probe
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = np.where(flat, 1.0, 1.0 - ss_res / np.where(flat, 1.0, ss_tot))
    route = "deterministic" if np.min(r2) >= threshold else "probabilistic"
    return LinearityReport(r2, route, probes, threshold)


@dataclass
class McdaPosterior:
    theta_post: np.ndarray
    cov_theta_post: np.ndarray
    cov_y_post: np.ndarray
    alpha: float
    route: str
    chain: object = None
    cov_y_prior: np.ndarray = None
    gain: np.ndarray = None
    advisories: list = field(default_factory=list)

    def __post_init__(self):
        if self.route == "probabilistic" and self.chain is None:
            raise ValidationError("probabilistic route requires a chain")

    def to_dict(self):
        out = {"theta_post": self.theta_post.tolist(), "cov_theta_post": self.cov_theta_post.tolist(),
               "cov_y_post": None if self.cov_y_post is None else self.cov_y_post.tolist(),
               "alpha": self.alpha, "route": self.route, "advisories": list(self.advisories)}
        if self.chain is not None:
            out["acceptance_rate"] = self.chain.acceptance_rate
            out["ess"] = self.chain.ess.tolist()
        return out


def mcda_cost(theta, d, S, cov_prior, cov_eps, alpha, theta_prior=None):
    """The regularized least-squares cost of the linearized problem."""
    theta = np.asarray(theta, dtype=float)
    tp = np.zeros_like(theta) if theta_prior is None else np.asarray(theta_prior, dtype=float)
    dt = theta - tp
    r = np.asarray(d, dtype=float) - np.asarray(S, dtype=float) @ dt
    return float(alpha**2 * dt @ solve_spd(cov_prior, dt) + r @ solve_spd(cov_eps, r))


def _gain(S, Sp, Se, alpha):
    SeS = solve_spd(Se, S)                        # Se^-1 S
    A = S.T @ SeS + alpha**2 * solve_spd(Sp, np.eye(Sp.shape[0]))
    return solve_spd(A, SeS.T)                    # (S^T Se^-1 S + a^2 Sp^-1)^-1 S^T Se^-1


def mcda_deterministic(d, S_prior, cov_prior, cov_eps, alpha=1.0, theta_prior=None,
                       sensitivity_post=None):
    """Closed-form regularized update for a linear(ized) system.

    Parameters
    ----------
    d : array_like
        Residual ``y_E - y_M(theta_prior)``.
    S_prior : array_like, shape (J, I)
        Sensitivities at ``theta_prior``.
    sensitivity_post : callable or array, optional
        Sensitivities at the posterior mean, or a function ``theta -> S``
        (finite differences on the model); the prior sensitivities are reused
        when omitted.
    """
    S = np.atleast_2d(np.asarray(S_prior, dtype=float))
    J, I = S.shape
    d = np.ravel(np.asarray(d, dtype=float))
    if d.size != J:
        raise ValidationError("residual length does not match sensitivities")
    if alpha < 0:
        raise ValidationError("alpha must be non-negative")
    Sp = _as_cov(cov_prior, I, "cov_prior")
    Se = _as_cov(cov_eps, J, "cov_eps")
    tp = np.zeros(I) if theta_prior is None else np.asarray(theta_prior, dtype=float)
    K = _gain(S, Sp, Se, alpha)
    theta_post = tp + K @ d
    KS = K @ S
    cov_post = Sp - Sp @ KS.T - KS @ Sp + K @ (Se + S @ Sp @ S.T) @ K.T
    cov_post = 0.5 * (cov_post + cov_post.T)
    if callable(sensitivity_post):
        S_post = np.atleast_2d(sensitivity_post(theta_post))
    elif sensitivity_post is not None:
        S_post = np.atleast_2d(np.asarray(sensitivity_post, dtype=float))
    else:
        S_post = S
    cov_y = S_post @ cov_post @ S_post.T
    return McdaPosterior(theta_post, cov_post, 0.5 * (cov_y + cov_y.T), float(alpha),
                         "deterministic", cov_y_prior=S @ Sp @ S.T, gain=K)


@dataclass
class LCurve:
    alphas: np.ndarray
    mismatch: np.ndarray
    regularization: np.ndarray
    curvature: np.ndarray
    alpha_star: float
    fallback: bool = False

    def to_dict(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}


def lcurve_terms(d, S, cov_prior, cov_eps, alphas):
    """Mismatch and regularization terms of the update for every ``alpha``."""
    S = np.atleast_2d(np.asarray(S, dtype=float))
    J, I = S.shape
    Sp = _as_cov(cov_prior, I, "cov_prior")
    Se = _as_cov(cov_eps, J, "cov_eps")
    d = np.ravel(d)
    mis, reg = [], []
    for a in alphas:
        dt = _gain(S, Sp, Se, a) @ d
        r = d - S @ dt
        mis.append(r @ solve_spd(Se, r))
        reg.append(dt @ solve_spd(Sp, dt))
    return np.array(mis), np.array(reg)


def lcurve_curvature(log_alpha, x, y):
    """Signed curvature of ``(x(t), y(t))``; positive for counter-clockwise turns."""
    x1 = np.gradient(x, log_alpha)
    y1 = np.gradient(y, log_alpha)
    x2 = np.gradient(x1, log_alpha)
    y2 = np.gradient(y1, log_alpha)
    speed = np.hypot(x1, y1)
    # where the curve barely moves the curvature is round-off; leave it at zero
    moving = speed > STALL * speed.max()
    with np.errstate(divide="ignore", invalid="ignore"):
        k = np.where(moving, (x1 * y2 - y1 * x2) / speed**3, 0.0)
    return k


def select_alpha_lcurve(d, S, cov_prior, cov_eps, alphas=None):
    """Regularization weight at the corner (largest signed curvature) of the L-curve.

    The curve is ``(log mismatch, log regularization)`` traced with increasing
    ``alpha``. Without a convex corner the data carry no conflict with the
    prior and the smallest ``alpha`` is returned. A flat curve falls back to
    ``alpha = 1`` with a warning.
    """
    alphas = np.logspace(-4, 4, 401) if alphas is None else np.asarray(alphas, dtype=float)
    if alphas.size < 20:
        raise ValidationError("alpha grid needs at least 20 nodes")
    if np.any(alphas <= 0) or np.any(np.diff(alphas) <= 0):
        raise ValidationError("alpha grid must be positive and increasing")
    if np.log10(alphas[-1] / alphas[0]) < 4.0:
        raise ValidationError("alpha grid must span at least 4 decades")
    mis, reg = lcurve_terms(d, S, cov_prior, cov_eps, alphas)
    t = np.log(alphas)
    floor = 1e-300
    ok = (mis > floor) & (reg > floor)
    fallback = False
    if ok.sum() < 3 or np.ptp(np.log(mis[ok])) < 1e-8 or np.ptp(np.log(reg[ok])) < 1e-8:
        warnings.warn("L-curve is degenerate; using alpha = 1", McdaWarning, stacklevel=2)
        return LCurve(alphas, mis, reg, np.zeros_like(alphas), 1.0, True)
    x = np.log(np.maximum(mis, floor))
    y = np.log(np.maximum(reg, floor))
    kappa = lcurve_curvature(t, x, y)
    k = int(np.argmax(kappa))
    if kappa[k] <= 0:
        log.info("L-curve has no convex corner; smallest alpha selected")
        k = 0
    return LCurve(alphas, mis, reg, kappa, float(alphas[k]), fallback)


def stacked_predictor(model, experiments):
    """``theta -> concatenated model outputs`` aligned with the experiments' data."""
    experiments = list(experiments)

    def predict(theta):
        return np.concatenate([np.ravel(predict_for(model, rec, theta)) for rec in experiments])

    y = np.concatenate([rec.observed.values.ravel() for rec in experiments])
    e = np.concatenate([rec.noise_var.ravel() for rec in experiments])
    return predict, y, e


def mcda_probabilistic(predict, y_obs, cov_eps, theta_prior, cov_prior, config=None, init=None,
                       n_predict=500):
    """Sample the posterior of a Gaussian prior times a Gaussian likelihood.

    Both densities keep their log-determinant terms. The posterior mean and
    covariance come from the chain; the QoI covariance from model runs at
    ``n_predict`` evenly thinned chain states.
    """
    config = config or McmcConfig()
    if config.length < MIN_CHAIN:
        raise ValidationError(f"chain length must be >= {MIN_CHAIN} for MCDA", field="length")
    tp = np.atleast_1d(np.asarray(theta_prior, dtype=float))
    I = tp.size
    y_obs = np.ravel(np.asarray(y_obs, dtype=float))
    Sp = _as_cov(cov_prior, I, "cov_prior")
    Se = _as_cov(cov_eps, y_obs.size, "cov_eps")

    def log_target(theta):
        try:
            y = np.ravel(predict(theta))
        except Exception:  # a failed run is a rejected proposal
            return np.nan
        return log_mvn_pdf(theta, tp, Sp) + log_mvn_pdf(y_obs, y, Se)

    if config.proposal_cov is None:
        config = McmcConfig(**{**config.__dict__, "proposal_cov": 0.1 * Sp})
    chain = mh_sample(log_target, tp if init is None else init, config)
    Y = np.array([np.ravel(predict(t)) for t in chain.thin(n_predict)])
    cov_y = np.atleast_2d(np.cov(Y, rowvar=False))
    return McdaPosterior(chain.mean, chain.cov, cov_y, None, "probabilistic", chain)


def mcda(model, experiments, theta_prior, cov_prior, alpha=None, config=None, n_probe=16,
         seed=0):
    """Linearity gate followed by the matching route, on all experiments jointly."""
    experiments = list(experiments)
    tp = np.atleast_1d(np.asarray(theta_prior, dtype=float))
    Sp = _as_cov(cov_prior, tp.size, "cov_prior")
    reports = [linearity_test(model, rec.design, tp, Sp, n_probe, seed=seed) for rec in experiments]
    r2 = np.concatenate([r.r2 for r in reports])
    predict, y, e = stacked_predictor(model, experiments)
    if np.any(e <= 0):
        raise ValidationError("MCDA needs positive measurement variances")
    if np.min(r2) >= R2_THRESHOLD:
        d = y - predict(tp)
        S, _ = jacobian_fd(predict, tp, model.rel_step)
        curve = None
        if alpha is None:
            curve = select_alpha_lcurve(d, S, Sp, e)
            alpha = curve.alpha_star
        post = mcda_deterministic(d, S, Sp, e, alpha, tp,
                                  lambda t: jacobian_fd(predict, t, model.rel_step)[0])
        post.advisories.append(f"min R^2 = {np.min(r2):.4f}; deterministic route")
        post.lcurve = curve
        return post
    post = mcda_probabilistic(predict, y, e, tp, Sp, config)
    post.advisories.append(f"min R^2 = {np.min(r2):.4f}; probabilistic route")
    return post
