"""Modular Bayesian calibration.

The posterior of the calibration parameters is

    log p(theta | y) = log p(theta)
                       + sum_k log N(yE_k - yM_k(theta) - delta_k; 0, S_exp + S_bias + S_code)

with all covariances diagonal. ``yM`` comes from the model itself or from GP
emulators over theta (which add their predictive variance as ``S_code``);
``delta`` and ``S_bias`` come from GPs over the design variables trained on
residuals at a reference parameter value, using a split of the experiments
that is then withheld from the calibration.
"""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats
from scipy.stats import qmc

from .errors import NumericalError, SurrogateError, ValidationError
from .gp import GpConfig, gp_fit
from .mcmc import AM_SCALE, McmcConfig, diagnostics, mh_sample
from .models import ModelSpec, jacobian_fd, predict_for
from .stats import NUGGET_REL, RngStream

__all__ = ["PriorSpec", "LikelihoodParts", "LogPosterior", "BiasGpSet", "SurrogateSet",
           "MbaOptions", "MbaResult", "build_log_posterior", "train_bias_gp",
           "fit_surrogates", "mba_iuq", "conjugate_posterior"]

log = logging.getLogger(__name__)

MIN_BIAS_EXPERIMENTS = 6
SURROGATE_TOL = 0.10
_LOG_2PI = np.log(2 * np.pi)


class BiasExtrapolationWarning(UserWarning):
    pass


@dataclass
class PriorSpec:
    """Independent per-parameter priors: ``("uniform", lo, hi)`` or ``("normal", mean, sd)``."""

    dists: list
    labels: tuple = None

    def __post_init__(self):
        clean = []
        for k, d in enumerate(self.dists):
            kind, a, b = d[0], float(d[1]), float(d[2])
            if kind == "uniform" and not a < b:
                raise ValidationError("uniform prior needs lo < hi", field=f"prior[{k}]")
            if kind == "normal" and not b > 0:
                raise ValidationError("normal prior needs sd > 0", field=f"prior[{k}]")
            if kind not in ("uniform", "normal"):
                raise ValidationError(f"unknown prior kind {kind!r}", field=f"prior[{k}]")
            clean.append((kind, a, b))
        self.dists = clean
        if self.labels is None:
            self.labels = tuple(f"theta{i}" for i in range(len(clean)))

    @classmethod
    def normal(cls, mean, sd):
        return cls([("normal", m, s) for m, s in zip(np.ravel(mean), np.ravel(sd))])

    @classmethod
    def uniform(cls, lo, hi):
        return cls([("uniform", a, b) for a, b in zip(np.ravel(lo), np.ravel(hi))])

    @property
    def dim(self):
        return len(self.dists)

    @property
    def mean(self):
        return np.array([0.5 * (a + b) if k == "uniform" else a for k, a, b in self.dists])

    @property
    def sd(self):
        return np.array([(b - a) / np.sqrt(12.0) if k == "uniform" else b for k, a, b in self.dists])

    @property
    def bounds(self):
        return [(a, b) if k == "uniform" else (-np.inf, np.inf) for k, a, b in self.dists]

    def logpdf(self, theta):
        theta = np.atleast_1d(theta)
        total = 0.0
        for t, (k, a, b) in zip(theta, self.dists):
            if k == "uniform":
                if not a <= t <= b:
                    return -np.inf
                total -= np.log(b - a)
            else:
                total += -0.5 * (_LOG_2PI + 2 * np.log(b) + ((t - a) / b)**2)
        return float(total)

    def ppf(self, u):
        """Map unit-cube points to the prior; normals are truncated at +/- 3 sd."""
        u = np.atleast_2d(u)
        out = np.empty_like(u, dtype=float)
        lo_p, hi_p = stats.norm.cdf(-3.0), stats.norm.cdf(3.0)
        for i, (k, a, b) in enumerate(self.dists):
            if k == "uniform":
                out[:, i] = a + u[:, i] * (b - a)
            else:
                out[:, i] = a + b * stats.norm.ppf(lo_p + u[:, i] * (hi_p - lo_p))
        return out

    def to_dict(self):
        return {"dists": [list(d) for d in self.dists], "labels": list(self.labels)}


@dataclass
class LikelihoodParts:
    var_exp: np.ndarray
    var_bias: np.ndarray
    var_code: np.ndarray
    delta: np.ndarray

    @property
    def total(self):
        return self.var_exp + self.var_bias + self.var_code


class BiasGpSet:
    """One GP over the design variables per QoI index."""

    def __init__(self, gps, x_lo, x_hi):
        self.gps = gps
        self.x_lo = x_lo
        self.x_hi = x_hi

    def predict(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        mv = [gp.predict(x[None, :]) for gp in self.gps]
        mean = np.array([float(m[0]) for m, _ in mv])
        var = np.array([float(v[0]) for _, v in mv])
        return mean, var

    def extrapolates(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return bool(np.any(x < self.x_lo - 1e-12) or np.any(x > self.x_hi + 1e-12))


def _split(n, fraction, seed):
    n_train = int(round(fraction * n))
    perm = RngStream(seed, 11).generator().permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def train_bias_gp(model, experiments, theta_ref, split_fraction=0.8, seed=0, gp_config=None):
    """Fit bias GPs on a training split of the experiments.

    Returns ``(bias_set, train_records, held_out_records)``.
    """
    experiments = list(experiments)
    n = len(experiments)
    if n < MIN_BIAS_EXPERIMENTS:
        raise ValidationError(f"{n} experiments are too few to train a bias term (need "
                              f">= {MIN_BIAS_EXPERIMENTS}); disable the bias term")
    if not 0.5 < split_fraction < 0.95:
        raise ValidationError("split_fraction must lie in (0.5, 0.95)", field="split_fraction")
    tr, te = _split(n, split_fraction, seed)
    if tr.size < 4:
        raise ValidationError("bias training split has fewer than 4 experiments")
    train = [experiments[i] for i in tr]
    held = [experiments[i] for i in te]
    theta_ref = np.atleast_1d(np.asarray(theta_ref, dtype=float))
    X = np.array([r.design.values for r in train])
    R = np.array([np.ravel(r.observed.values - predict_for(model, r, theta_ref)) for r in train])
    E = np.array([np.ravel(r.noise_var) for r in train])
    gps = []
    for j in range(R.shape[1]):
        cfg = gp_config or GpConfig(seed=seed)
        if np.any(E[:, j] > 0):
            cfg = GpConfig(**{**cfg.__dict__, "noise_var": E[:, j]})
        gps.append(gp_fit(X, R[:, j], cfg))
    return BiasGpSet(gps, X.min(axis=0), X.max(axis=0)), train, held


class SurrogateSet:
    """GP emulators over theta, one per (experiment, QoI) pair."""

    def __init__(self, gps, sizes, validation_rmse, ranges):
        self.gps = gps
        self.sizes = sizes
        self.validation_rmse = validation_rmse
        self.ranges = ranges

    def predict(self, theta):
        theta = np.atleast_2d(theta)
        m = np.empty(len(self.gps))
        v = np.empty(len(self.gps))
        for k, gp in enumerate(self.gps):
            mk, vk = gp.predict(theta)
            m[k], v[k] = mk[0], vk[0]
        return m, v


def fit_surrogates(model, experiments, prior, n_train=None, seed=0, validation=0.2):
    """LHS design over the prior support, GP per output, held-out validation.

    Raises :class:`SurrogateError` when any emulator's validation RMSE exceeds
    10% of the output range.
    """
    I = prior.dim
    n_fit = max(10 * I, int(n_train or 0))
    n_val = max(int(np.ceil(validation * n_fit / (1.0 - validation))), 2)
    u = qmc.LatinHypercube(d=I, seed=np.random.default_rng(RngStream(seed, 13).generator()
                                                           .integers(2**32))).random(n_fit + n_val)
    T = prior.ppf(u)
    Y = np.array([np.concatenate([np.ravel(predict_for(model, r, t)) for r in experiments])
                  for t in T])
    Tf, Tv, Yf, Yv = T[:n_fit], T[n_fit:], Y[:n_fit], Y[n_fit:]
    gps, rmse, ranges = [], [], []
    for k in range(Y.shape[1]):
        gp = gp_fit(Tf, Yf[:, k], GpConfig(seed=seed))
        pred, _ = gp.predict(Tv)
        e = float(np.sqrt(np.mean((pred - Yv[:, k])**2)))
        rng_k = float(np.ptp(Y[:, k]))
        if rng_k > 0 and e > SURROGATE_TOL * rng_k:
            raise SurrogateError(f"surrogate for output {k} has validation RMSE {e:.3g} > 10% of "
                                 f"its range {rng_k:.3g}; increase the training budget")
        gps.append(gp)
        rmse.append(e)
        ranges.append(rng_k)
    return SurrogateSet(gps, [np.size(r.observed.values) for r in experiments],
                        np.array(rmse), np.array(ranges))


class LogPosterior:
    """Callable log posterior with access to the likelihood decomposition."""

    def __init__(self, prior, experiments, predictor, bias=None):
        self.prior = prior
        self.experiments = list(experiments)
        if not self.experiments:
            raise ValidationError("no experiments for the likelihood")
        self.predictor = predictor
        self.bias = bias
        self.y = np.concatenate([np.ravel(r.observed.values) for r in self.experiments])
        self.var_exp = np.concatenate([np.ravel(r.noise_var) for r in self.experiments])
        if bias is not None:
            parts = [bias.predict(r.design.values) for r in self.experiments]
            self.delta = np.concatenate([p[0] for p in parts])
            self.var_bias = np.concatenate([p[1] for p in parts])
            if self.delta.size != self.y.size:
                raise ValidationError("bias GPs do not cover every QoI")
        else:
            self.delta = np.zeros_like(self.y)
            self.var_bias = np.zeros_like(self.y)

    def predict(self, theta):
        if isinstance(self.predictor, ModelSpec):
            y = np.concatenate([np.ravel(predict_for(self.predictor, r, theta))
                                for r in self.experiments])
            return y, np.zeros_like(y)
        return self.predictor.predict(theta)

    def parts(self, theta):
        _, var_code = self.predict(theta)
        return LikelihoodParts(self.var_exp, self.var_bias, var_code, self.delta)

    def log_likelihood(self, theta):
        ym, var_code = self.predict(theta)
        var = self.var_exp + self.var_bias + var_code
        if np.any(var <= 0):
            g = NUGGET_REL * np.sum(var) / var.size
            if not g > 0:
                raise NumericalError("likelihood covariance is zero; give measurement noise")
            var = var + g
        r = self.y - ym - self.delta
        return float(-0.5 * np.sum(_LOG_2PI + np.log(var) + r**2 / var))

    def __call__(self, theta):
        lp = self.prior.logpdf(theta)
        if lp == -np.inf:
            return -np.inf
        return lp + self.log_likelihood(theta)


def build_log_posterior(prior, experiments, predictor, bias=None):
    return LogPosterior(prior, experiments, predictor, bias)


def conjugate_posterior(S, c, y, noise_var, prior_mean, prior_sd):
    """Closed-form posterior of ``y = S theta + c + e`` under a normal prior."""
    S = np.atleast_2d(S)
    W = 1.0 / np.asarray(noise_var, dtype=float)
    P0 = np.diag(1.0 / np.asarray(prior_sd, dtype=float)**2)
    A = S.T @ (S * W[:, None]) + P0
    cov = np.linalg.inv(A)
    mean = cov @ (S.T @ (W * (np.asarray(y) - c)) + P0 @ np.asarray(prior_mean, dtype=float))
    return mean, cov


@dataclass
class MbaOptions:
    use_surrogate: bool = False
    use_bias: bool = False
    mcmc: McmcConfig = None
    split_fraction: float = 0.8
    theta_ref: np.ndarray = None
    n_surrogate: int = None
    seed: int = 0


@dataclass
class MbaResult:
    chain: object
    mean: np.ndarray
    sd: np.ndarray
    ci95: np.ndarray
    correlation: np.ndarray
    map_estimate: np.ndarray
    sensitivity: np.ndarray
    diagnostics: object
    settings: dict
    warnings: list = field(default_factory=list)
    n_calibration: int = 0

    def to_dict(self):
        return {"mean": self.mean.tolist(), "sd": self.sd.tolist(), "ci95": self.ci95.tolist(),
                "correlation": self.correlation.tolist(), "map": self.map_estimate.tolist(),
                "sensitivity": self.sensitivity.tolist(), "diagnostics": self.diagnostics.to_dict(),
                "settings": self.settings, "warnings": list(self.warnings),
                "n_calibration_experiments": self.n_calibration}


def _find_map(logpost, prior):
    x0 = prior.mean
    bounds = [(None if np.isinf(a) else a, None if np.isinf(b) else b) for a, b in prior.bounds]

    def f(t):
        v = logpost(t)
        return 1e300 if not np.isfinite(v) else -v

    res = optimize.minimize(f, x0, method="L-BFGS-B", bounds=bounds)
    return res.x if np.isfinite(res.fun) and res.fun < 1e300 else x0


def _hessian_cov(logpost, theta, prior):
    """Inverse of the negative FD Hessian, or a prior-scaled fallback."""
    d = theta.size
    h = 1e-4 * np.maximum(np.abs(theta), prior.sd)
    H = np.empty((d, d))
    f0 = logpost(theta)
    for i in range(d):
        for j in range(i, d):
            ei = np.zeros(d)
            ej = np.zeros(d)
            ei[i] = h[i]
            ej[j] = h[j]
            v = (logpost(theta + ei + ej) - logpost(theta + ei - ej)
                 - logpost(theta - ei + ej) + logpost(theta - ei - ej)) / (4 * h[i] * h[j])
            H[i, j] = H[j, i] = v
    try:
        C = np.linalg.inv(-H)
        np.linalg.cholesky(C)
        if np.all(np.isfinite(C)) and np.isfinite(f0):
            return 0.5 * (C + C.T)
    except np.linalg.LinAlgError:
        pass
    return np.diag((0.1 * prior.sd)**2)


def mba_iuq(model, experiments, prior, options=None):
    """Full modular pipeline: surrogate, bias, posterior assembly, MCMC, summary."""
    options = options or MbaOptions()
    experiments = list(experiments)
    if prior.dim != model.n_params:
        raise ValidationError("prior dimension does not match the model")
    msgs = []
    calib = experiments
    bias = None
    if options.use_bias:
        theta_ref = prior.mean if options.theta_ref is None else np.asarray(options.theta_ref)
        bias, _, calib = train_bias_gp(model, experiments, theta_ref, options.split_fraction,
                                       options.seed)
        for r in calib:
            if bias.extrapolates(r.design.values):
                msgs.append(f"bias GP extrapolates to design {r.label!r} outside its training range")
                warnings.warn(msgs[-1], BiasExtrapolationWarning, stacklevel=2)
    predictor = model
    if options.use_surrogate:
        predictor = fit_surrogates(model, calib, prior, options.n_surrogate, options.seed)
    logpost = build_log_posterior(prior, calib, predictor, bias)
    theta_map = _find_map(logpost, prior)
    cfg = options.mcmc or McmcConfig(seed=options.seed)
    if cfg.proposal_cov is None:
        cov = _hessian_cov(logpost, theta_map, prior) * AM_SCALE / prior.dim
        cfg = McmcConfig(**{**cfg.__dict__, "proposal_cov": cov})
    chain = mh_sample(logpost, theta_map, cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        diag = diagnostics(chain)
    msgs.extend(str(w.message) for w in caught)
    s = chain.samples
    mean = s.mean(axis=0)
    sd = s.std(axis=0, ddof=1)
    ci = np.percentile(s, [2.5, 97.5], axis=0).T
    corr = np.atleast_2d(np.corrcoef(s, rowvar=False)) if s.shape[1] > 1 else np.ones((1, 1))
    # dy/dtheta scaled by posterior sd: how strongly each QoI constrains each parameter
    sens = jacobian_fd(lambda t: logpost.predict(t)[0], mean, 1e-4)[0] * sd
    settings = {"use_surrogate": options.use_surrogate, "use_bias": options.use_bias,
                "split_fraction": options.split_fraction, "seed": options.seed,
                "chain_length": cfg.length, "burn_in": cfg.burn_in, "prior": prior.to_dict()}
    return MbaResult(chain, mean, sd, ci, corr, theta_map, sens, diag, settings, msgs, len(calib))
