"""Gaussian-process regression with a power-exponential kernel.

``k(x, x') = s2 * exp(-sum_i (|x_i - x'_i| / omega_i) ** p_i)`` on standardized
inputs, constant mean estimated by generalized least squares. A nugget of
``1e-8`` (relative to ``s2``) enters as a white-noise kernel term, so training
outputs are reproduced exactly while the factorization stays well conditioned.

Without observation noise the process variance is profiled out of the
likelihood and only the length-scales (and optionally the exponents) are
searched; with a known noise vector the log-variance joins the search.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize
from scipy.spatial.distance import pdist

from .errors import SurrogateError, ValidationError
from .stats import RngStream

__all__ = ["GpConfig", "GpHyper", "GpModel", "gp_fit", "gp_predict", "log_marginal_likelihood"]

log = logging.getLogger(__name__)

NUGGET = 1e-8
LOG_OMEGA_BOUNDS = (np.log(1e-2), np.log(1e2))
_LOG_2PI = np.log(2 * np.pi)


@dataclass
class GpConfig:
    p: float = 2.0
    fit_p: bool = False
    n_starts: int = 8
    nugget: float = NUGGET
    noise_var: np.ndarray = None
    dedup_tol: float = 1e-10
    seed: int = 0


@dataclass
class GpHyper:
    beta: float
    s2: float
    omega: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        if not (self.s2 > 0 and np.all(self.omega > 0) and np.all((self.p > 0) & (self.p <= 2))):
            raise ValidationError("invalid GP hyperparameters")

    def to_dict(self):
        return {"beta": float(self.beta), "s2": float(self.s2), "omega": self.omega.tolist(),
                "p": self.p.tolist()}


def _corr(A, B, omega, p):
    d = np.abs(A[:, None, :] - B[None, :, :]) / omega
    return np.exp(-np.sum(d**p, axis=-1))


def _assemble(Z, y, omega, p, s2, g, noise):
    """Covariance factor, GLS mean and profiled variance for one hyperparameter set."""
    n = y.size
    R = _corr(Z, Z, omega, p)
    R[np.diag_indices(n)] += g
    if noise is None:
        K = R
    else:
        K = s2 * R + np.diag(noise)
    c = linalg.cho_factor(K, lower=True)
    one = np.ones(n)
    Ki1 = linalg.cho_solve(c, one)
    beta = float(Ki1 @ y / (one @ Ki1))
    r = y - beta
    alpha = linalg.cho_solve(c, r)
    logdet = 2.0 * np.sum(np.log(np.diag(c[0])))
    if noise is None:
        s2 = float(r @ alpha / n)
    return c, beta, alpha, s2, logdet


def _loglik(Z, y, omega, p, s2, g, noise):
    n = y.size
    try:
        c, beta, alpha, s2, logdet = _assemble(Z, y, omega, p, s2, g, noise)
    except (linalg.LinAlgError, ValueError):
        return -np.inf
    r = y - beta
    if noise is None:
        if s2 <= 0:
            return -np.inf
        return float(-0.5 * (n * np.log(s2) + logdet + n + n * _LOG_2PI))
    return float(-0.5 * (r @ alpha + logdet + n * _LOG_2PI))


def log_marginal_likelihood(X, y, omega, p=2.0, s2=None, nugget=NUGGET, noise_var=None):
    """Log marginal likelihood in the standardized space of :func:`gp_fit`.

    ``X`` and ``y`` are already standardized; ``s2`` is profiled when no noise
    is given.
    """
    Z = np.atleast_2d(np.asarray(X, dtype=float))
    omega = np.broadcast_to(np.asarray(omega, dtype=float), (Z.shape[1],))
    p = np.broadcast_to(np.asarray(p, dtype=float), (Z.shape[1],))
    noise = None if noise_var is None else np.asarray(noise_var, dtype=float)
    return _loglik(Z, np.asarray(y, dtype=float), omega, p, s2, nugget, noise)


@dataclass
class GpModel:
    X: np.ndarray
    y: np.ndarray
    hyper: GpHyper
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_scale: float
    nugget: float
    noise_var: np.ndarray = None
    loglik: float = None
    _factor: tuple = field(default=None, repr=False)
    _alpha: np.ndarray = field(default=None, repr=False)

    @property
    def Z(self):
        return (self.X - self.x_mean) / self.x_scale

    @property
    def dim(self):
        return self.X.shape[1]

    @property
    def s2(self):
        """Process variance in output units."""
        return self.hyper.s2 * self.y_scale**2

    @property
    def nugget_variance(self):
        return self.nugget * self.s2

    def _prep(self):
        h = self.hyper
        ys = self.y / self.y_scale
        noise = None if self.noise_var is None else self.noise_var / self.y_scale**2
        c, _, _, _, _ = _assemble(self.Z, ys, h.omega, h.p, h.s2, self.nugget, noise)
        self._factor = c
        self._alpha = linalg.cho_solve(c, ys - h.beta)

    def predict(self, x, return_cov=False):
        """Predictive mean and variance at the rows of ``x`` (output units)."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.dim:
            if single and self.dim == 1:
                x = x.reshape(-1, 1)
                single = False
            else:
                raise ValidationError(f"GP expects {self.dim}-D inputs, got {x.shape[1]}")
        if self._factor is None:
            self._prep()
        h = self.hyper
        z = (x - self.x_mean) / self.x_scale
        r = _corr(z, self.Z, h.omega, h.p)
        # the nugget is a white-noise kernel term: it also links a query to a coincident input
        r[np.all(np.abs(z[:, None, :] - self.Z[None, :, :]) <= 1e-12, axis=-1)] += self.nugget
        if self.noise_var is None:
            k = r
        else:
            k = h.s2 * r
        mean = h.beta + k @ self._alpha
        v = linalg.cho_solve(self._factor, k.T)
        if self.noise_var is None:
            var = h.s2 * (1.0 + self.nugget - np.sum(r * v.T, axis=1))
        else:
            var = h.s2 * (1.0 + self.nugget) - np.sum(k * v.T, axis=1)
        var = np.maximum(var, 0.0) * self.y_scale**2
        mean = mean * self.y_scale
        if return_cov:
            kk = _corr(z, z, h.omega, h.p) + self.nugget * np.eye(z.shape[0])
            cov = (h.s2 * (kk - r @ v) if self.noise_var is None else h.s2 * kk - k @ v)
            return mean, var, cov * self.y_scale**2
        if single and x.shape[0] == 1:
            return float(mean[0]), float(var[0])
        return mean, var

    def loo_residuals(self):
        """Closed-form leave-one-out residuals and their predictive variances."""
        if self._factor is None:
            self._prep()
        n = self.y.size
        Kinv = linalg.cho_solve(self._factor, np.eye(n))
        scale = self.hyper.s2 if self.noise_var is None else 1.0
        d = np.diag(Kinv) / scale
        resid = (self._alpha / scale) / d * self.y_scale
        return resid, self.y_scale**2 / d

    def condition(self, X_new, y_new):
        """Same hyperparameters, training set augmented with new points."""
        X = np.vstack([self.X, np.atleast_2d(X_new)])
        y = np.concatenate([self.y, np.ravel(y_new)])
        noise = None
        if self.noise_var is not None:
            raise ValidationError("conditioning is only supported for noise-free GPs")
        m = GpModel(X, y, self.hyper, self.x_mean, self.x_scale, self.y_scale, self.nugget, noise)
        # the constant mean stays fixed at the fitted value
        m._prep()
        return m


def gp_predict(model, point):
    return model.predict(point)


def _standardize(X):
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    return mu, sd


def gp_fit(X, y, config=None):
    """Fit a GP by maximizing the marginal likelihood from several starts."""
    config = config or GpConfig()
    X = np.asarray(X, dtype=float)
    X = X.reshape(-1, 1) if X.ndim == 1 else X
    y = np.ravel(np.asarray(y, dtype=float))
    n, dim = X.shape
    if n < 4:
        raise ValidationError("a GP needs at least 4 training points")
    if y.size != n:
        raise ValidationError("inputs and outputs differ in length")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValidationError("training data must be finite")
    x_mean, x_scale = _standardize(X)
    Z = (X - x_mean) / x_scale
    if n > 1 and np.min(pdist(Z)) <= config.dedup_tol:
        raise ValidationError("duplicate training inputs")
    noise = None
    if config.noise_var is not None:
        noise = np.broadcast_to(np.asarray(config.noise_var, dtype=float), (n,)).copy()
        if np.any(noise < 0):
            raise ValidationError("noise variances must be non-negative")
    spread = float(np.std(y))
    y_scale = spread if spread > 0 else max(abs(float(np.mean(y))), 1.0)
    ys = y / y_scale
    noise_s = None if noise is None else noise / y_scale**2

    if spread == 0:
        # constant process: variance at its floor, any length-scale interpolates
        hyper = GpHyper(float(ys[0]), config.nugget, np.ones(dim), np.full(dim, float(config.p)))
        m = GpModel(X, y, hyper, x_mean, x_scale, y_scale, config.nugget, noise, None)
        m._prep()
        return m

    n_p = dim if config.fit_p else 0
    n_s = 1 if noise is not None else 0

    def unpack(v):
        omega = np.exp(v[:dim])
        p = (2.0 / (1.0 + np.exp(-v[dim:dim + n_p])) if n_p else np.full(dim, float(config.p)))
        s2 = float(np.exp(v[-1])) if n_s else None
        return omega, p, s2

    def nll(v):
        omega, p, s2 = unpack(v)
        ll = _loglik(Z, ys, omega, np.maximum(p, 1e-3), s2, config.nugget, noise_s)
        return 1e25 if not np.isfinite(ll) else -ll

    bounds = [LOG_OMEGA_BOUNDS] * dim + [(-4.0, 6.0)] * n_p + [(np.log(1e-6), np.log(1e2))] * n_s
    gen = RngStream(config.seed, 7).generator()
    starts = [np.concatenate([np.zeros(dim), np.full(n_p, 2.0), np.zeros(n_s)])]
    for _ in range(max(config.n_starts - 1, 0)):
        starts.append(np.array([gen.uniform(lo, hi) for lo, hi in bounds]))
    best = None
    for s in starts:
        try:
            res = optimize.minimize(nll, s, method="L-BFGS-B", bounds=bounds)
        except (ValueError, FloatingPointError):
            continue
        if np.isfinite(res.fun) and res.fun < 1e25 and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise SurrogateError("GP hyperparameter optimization failed at every start")
    omega, p, s2 = unpack(best.x)
    c, beta, alpha, s2, _ = _assemble(Z, ys, omega, p, s2, config.nugget, noise_s)
    s2 = max(s2, config.nugget)
    hyper = GpHyper(beta, s2, omega, p)
    m = GpModel(X, y, hyper, x_mean, x_scale, y_scale, config.nugget, noise, -float(best.fun))
    m._prep()
    return m
