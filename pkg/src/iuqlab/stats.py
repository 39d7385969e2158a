"""Statistical primitives: Gaussian densities, covariance algebra, seeded streams.

Nugget policy
-------------
Factorizations are attempted on the matrix as given. Only when that fails is a
nugget of ``1e-10 * trace(A) / k`` added to the diagonal and the factorization
retried. A matrix that still fails is reported with its smallest eigenvalue.

Random streams
--------------
:class:`RngStream` wraps NumPy's Philox-4x64-10 counter-based bit generator.
The 128-bit key is ``seed + 2**64 * stream``, the counter starts at zero.
Any implementation that keys Philox the same way reproduces the raw 64-bit
words; acceptance checks only depend on sample statistics.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import NotPositiveDefiniteError, ValidationError

NUGGET_REL = 1e-10
_LOG_2PI = np.log(2.0 * np.pi)

TRANSFORMS = ("additive", "exponential")


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream: int = 0

    def __post_init__(self):
        if not (0 <= int(self.seed) < 2**64 and 0 <= int(self.stream) < 2**64):
            raise ValidationError("seed and stream must be unsigned 64-bit integers")

    def generator(self):
        key = int(self.seed) + (int(self.stream) << 64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, index):
        """Independent sub-stream ``index`` of this stream (for worker fan-out)."""
        return RngStream(self.seed, (int(self.stream) * 65537 + int(index) + 1) % 2**64)


def change_of_variable(kind, theta):
    """Map a CIRCE variable to a dimensionless multiplier.

    Both maps satisfy ``f(0) = 1`` and ``f'(0) = 1``.
    """
    theta = np.asarray(theta, dtype=float)
    if kind == "additive":
        return 1.0 + theta
    if kind == "exponential":
        return np.exp(theta)
    raise ValidationError(f"unknown change-of-variable kind {kind!r}")


def to_model_parameters(theta, nominal, kinds):
    """Turn CIRCE variables into model parameter values.

    A parameter with nonzero nominal value ``v`` becomes ``v * f(theta)``; a
    parameter whose nominal value is zero becomes ``f(theta) - 1`` (a shift).
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    nominal = np.broadcast_to(np.asarray(nominal, dtype=float), theta.shape[-1:])
    out = np.empty_like(theta)
    for i, kind in enumerate(kinds):
        p = change_of_variable(kind, theta[..., i])
        out[..., i] = nominal[i] * p if nominal[i] != 0.0 else p - 1.0
    return out


@dataclass
class GaussianParamSpec:
    """Independent Gaussian law of calibration variables.

    Attributes
    ----------
    mean : ndarray, shape (I,)
        Mean (bias) vector ``b``.
    var : ndarray, shape (I,)
        Diagonal of the covariance, ``sigma_i**2``.
    transform : tuple of str
        Change-of-variable kind per parameter (``"additive"`` or ``"exponential"``).
    """

    mean: np.ndarray
    var: np.ndarray
    transform: tuple = field(default=None)

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.var = np.broadcast_to(np.asarray(self.var, dtype=float), self.mean.shape).copy()
        if self.transform is None:
            self.transform = ("additive",) * self.mean.size
        self.transform = tuple(self.transform)
        if len(self.transform) != self.mean.size:
            raise ValidationError("transform length does not match mean")
        for kind in self.transform:
            if kind not in TRANSFORMS:
                raise ValidationError(f"unknown change-of-variable kind {kind!r}")
        if np.any(self.var < 0) or not np.all(np.isfinite(self.var)):
            raise ValidationError("variances must be finite and non-negative")
        if not np.all(np.isfinite(self.mean)):
            raise ValidationError("mean must be finite")

    @property
    def dim(self):
        return self.mean.size

    @property
    def sd(self):
        return np.sqrt(self.var)

    @property
    def cov(self):
        return np.diag(self.var)

    def interval95(self):
        """``b +/- 2 sigma`` in CIRCE-variable space."""
        return self.mean - 2 * self.sd, self.mean + 2 * self.sd

    def multiplier_interval95(self):
        lo, hi = self.interval95()
        los = [change_of_variable(k, v) for k, v in zip(self.transform, lo)]
        his = [change_of_variable(k, v) for k, v in zip(self.transform, hi)]
        return np.array(los), np.array(his)

    def to_model(self, theta, nominal):
        return to_model_parameters(theta, nominal, self.transform)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "var": self.var.tolist(),
                "transform": list(self.transform)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mean"], d["var"], tuple(d.get("transform") or ()) or None)


def nugget(a):
    a = np.asarray(a, dtype=float)
    k = a.shape[0]
    return NUGGET_REL * np.trace(a) / k if k else 0.0


def check_cov(cov, name="cov"):
    """Validate a covariance matrix (symmetry and PSD up to round-off)."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValidationError(f"{name} must be square")
    if not np.all(np.isfinite(cov)):
        raise ValidationError(f"{name} has non-finite entries")
    scale = max(np.max(np.abs(cov)), 1e-300)
    if np.max(np.abs(cov - cov.T)) > 1e-12 * scale:
        raise ValidationError(f"{name} is not symmetric")
    eig = linalg.eigvalsh(cov)
    if eig.size and eig[0] < -1e-10 * max(np.trace(cov), 0.0) - 1e-300:
        raise NotPositiveDefiniteError(
            f"{name} is not positive semidefinite (smallest eigenvalue {eig[0]:.3e})",
            min_eigenvalue=float(eig[0]))
    return 0.5 * (cov + cov.T)


def cholesky(a):
    """Lower Cholesky factor, retrying once with the nugget."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    try:
        return linalg.cholesky(a, lower=True)
    except linalg.LinAlgError:
        pass
    try:
        return linalg.cholesky(a + nugget(a) * np.eye(a.shape[0]), lower=True)
    except linalg.LinAlgError:
        eig = linalg.eigvalsh(a)
        raise NotPositiveDefiniteError(
            f"matrix not positive definite after nugget (smallest eigenvalue {eig[0]:.3e})",
            min_eigenvalue=float(eig[0])) from None


def log_mvn_pdf(x, mean, cov):
    """Log density of ``N(mean, cov)`` at ``x``, including ``-0.5 log|cov|``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    k = x.size
    if mean.shape != x.shape or cov.shape != (k, k):
        raise ValidationError("dimension mismatch between x, mean and cov")
    L = cholesky(cov)
    z = linalg.solve_triangular(L, x - mean, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return float(-0.5 * (k * _LOG_2PI + logdet + z @ z))


def log_normal_diag(resid, var):
    """Log density of independent zero-mean normals with variances ``var``."""
    resid = np.asarray(resid, dtype=float)
    var = np.asarray(var, dtype=float)
    return float(-0.5 * np.sum(_LOG_2PI + np.log(var) + resid**2 / var))


def psd_factor(cov):
    """A matrix ``F`` with ``F @ F.T == cov`` for a PSD (possibly singular) ``cov``."""
    cov = check_cov(cov)
    try:
        return linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError:
        pass
    try:
        return linalg.cholesky(cov + nugget(cov) * np.eye(cov.shape[0]), lower=True)
    except linalg.LinAlgError:
        w, v = linalg.eigh(cov)
        return v * np.sqrt(np.clip(w, 0.0, None))


def draw_mvn(mean, cov, rng, n):
    """``n`` rows drawn from ``N(mean, cov)`` using stream ``rng``."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape != (mean.size, mean.size):
        raise ValidationError("cov shape does not match mean")
    F = psd_factor(cov)
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    z = gen.standard_normal((int(n), mean.size))
    return mean + z @ F.T


def solve_spd(a, rhs):
    """Solve ``a @ x = rhs`` for symmetric positive definite ``a``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    rhs = np.asarray(rhs, dtype=float)
    if a.shape[0] != a.shape[1] or a.shape[0] != rhs.shape[0]:
        raise ValidationError("dimension mismatch in solve_spd")
    try:
        c = linalg.cho_factor(a, lower=True)
    except linalg.LinAlgError:
        eig = linalg.eigvalsh(0.5 * (a + a.T))
        raise NotPositiveDefiniteError(
            f"matrix is not positive definite (smallest eigenvalue {eig[0]:.3e})",
            min_eigenvalue=float(eig[0])) from None
    return linalg.cho_solve(c, rhs)
