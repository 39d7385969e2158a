"""Random-walk Metropolis-Hastings with adaptive proposal covariance.

After ``adapt_start`` steps the Gaussian proposal uses the running chain
covariance scaled by ``2.38**2 / d`` plus a small ridge (Haario et al.). The
covariance is accumulated recursively (Welford) and the proposal factor is
refreshed every ``refresh`` steps.
"""

import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import NumericalError, ValidationError
from .stats import RngStream

__all__ = ["McmcConfig", "McmcChain", "McmcSummary", "mh_sample", "diagnostics",
           "effective_sample_size", "autocorrelation"]

log = logging.getLogger(__name__)

AM_SCALE = 2.38**2
ACCEPT_WINDOW = (0.15, 0.5)


class MixingWarning(UserWarning):
    pass


@dataclass
class McmcConfig:
    length: int = 20_000
    burn_in: float = 0.2
    proposal_cov: np.ndarray = None
    adapt: bool = True
    adapt_start: int = 1000
    refresh: int = 50
    ridge: float = 1e-10
    seed: int = 0
    stream: int = 0

    def __post_init__(self):
        if int(self.length) < 1000:
            raise ValidationError("chain length must be >= 1000", field="length")
        if not 0.0 <= self.burn_in <= 0.9:
            raise ValidationError("burn-in fraction must lie in [0, 0.9]", field="burn_in")
        if self.adapt_start < 2:
            raise ValidationError("adapt_start must be >= 2", field="adapt_start")
        if self.refresh < 1:
            raise ValidationError("refresh must be >= 1", field="refresh")


@dataclass
class McmcChain:
    samples: np.ndarray
    log_density: np.ndarray
    acceptance_rate: float
    ess: np.ndarray
    n_nonfinite: int = 0
    n_rejected_inf: int = 0
    proposal_cov: np.ndarray = None
    min_proposal_eig: float = None
    elapsed: float = 0.0

    @property
    def n(self):
        return self.samples.shape[0]

    @property
    def mean(self):
        return self.samples.mean(axis=0)

    @property
    def cov(self):
        return np.atleast_2d(np.cov(self.samples, rowvar=False))

    @property
    def mcse(self):
        return self.samples.std(axis=0, ddof=1) / np.sqrt(self.ess)

    def thin(self, n):
        """``n`` rows evenly spaced over the chain."""
        idx = np.linspace(0, self.n - 1, int(min(n, self.n))).round().astype(int)
        return self.samples[idx]


def mh_sample(log_target, init, config=None):
    """Run one Metropolis-Hastings chain.

    Non-finite log-density values other than ``-inf`` (NaN or ``+inf``) count
    as failures; they are rejected and tallied separately from ordinary
    ``-inf`` rejections.
    """
    config = config or McmcConfig()
    x = np.atleast_1d(np.asarray(init, dtype=float)).copy()
    d = x.size
    lp = float(log_target(x))
    if not np.isfinite(lp):
        raise NumericalError(f"log target is not finite at the initial point ({lp})")
    C0 = (0.01 * np.eye(d) if config.proposal_cov is None
          else np.atleast_2d(np.asarray(config.proposal_cov, dtype=float)))
    if C0.shape != (d, d):
        raise ValidationError("proposal covariance shape does not match init")
    ridge = config.ridge * max(np.trace(C0) / d, 1e-300)
    L = linalg.cholesky(C0, lower=True)
    min_eig = float(linalg.eigvalsh(C0)[0])

    n = int(config.length)
    gen = RngStream(config.seed, config.stream).generator()
    Z = gen.standard_normal((n, d))
    U = np.log(gen.random(n))

    chain = np.empty((n, d))
    logd = np.empty(n)
    moved = np.zeros(n, dtype=bool)
    mean = x.copy()
    M2 = np.zeros((d, d))
    nonfinite = rejected_inf = 0
    sd = AM_SCALE / d
    t0 = time.perf_counter()
    for t in range(n):
        y = x + L @ Z[t]
        lq = log_target(y)
        if lq == -np.inf:
            rejected_inf += 1
        elif not np.isfinite(lq):
            nonfinite += 1
        elif U[t] < lq - lp:
            x, lp = y, float(lq)
            moved[t] = True
        chain[t] = x
        logd[t] = lp
        # Welford update over the states visited so far (k = t + 2 states incl. init)
        k = t + 2
        delta = x - mean
        mean += delta / k
        M2 += np.outer(delta, x - mean)
        due = t + 1 >= config.adapt_start and (t + 1 - config.adapt_start) % config.refresh == 0
        if config.adapt and due:
            C = sd * (M2 / (k - 1)) + sd * ridge * np.eye(d)
            C = 0.5 * (C + C.T)
            try:
                L = linalg.cholesky(C, lower=True)
                min_eig = min(min_eig, float(linalg.eigvalsh(C)[0]))
            except linalg.LinAlgError:
                log.debug("adaptive proposal not PD at step %d; keeping previous", t)
    if nonfinite:
        log.warning("%d proposals gave non-finite log density and were rejected", nonfinite)
    burn = int(round(config.burn_in * n))
    kept = chain[burn:]
    return McmcChain(kept, logd[burn:], float(moved[burn:].mean()), effective_sample_size(kept),
                     nonfinite, rejected_inf, L @ L.T, min_eig, time.perf_counter() - t0)


def autocorrelation(x):
    """Normalized autocorrelation of a 1-D series via FFT (biased estimator)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    x = x - x.mean()
    size = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n]
    if acov[0] <= 0:
        return np.ones(n)
    return acov / acov[0]


def _ess_1d(x):
    n = x.size
    if n < 4 or np.ptp(x) == 0:
        return 1.0
    rho = autocorrelation(x)
    # initial positive, monotone sequence of paired sums
    m = (n - 1) // 2
    pairs = rho[0:2 * m:2] + rho[1:2 * m:2]
    tau_sum = 0.0
    prev = np.inf
    for g in pairs:
        if g <= 0:
            break
        g = min(g, prev)
        tau_sum += g
        prev = g
    tau = -1.0 + 2.0 * tau_sum
    return float(min(n / max(tau, 1e-12), n * np.log10(n)))


def effective_sample_size(samples):
    s = np.asarray(samples, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    return np.array([_ess_1d(s[:, i]) for i in range(s.shape[1])])


@dataclass
class McmcSummary:
    n: int
    acceptance_rate: float
    ess: np.ndarray
    split_discrepancy: np.ndarray
    warnings: list = field(default_factory=list)
    degenerate: bool = False

    def to_dict(self):
        return {"n": self.n, "acceptance_rate": self.acceptance_rate,
                "ess": np.asarray(self.ess).tolist(),
                "split_discrepancy": np.asarray(self.split_discrepancy).tolist(),
                "warnings": list(self.warnings), "degenerate": self.degenerate}


def diagnostics(chain, acceptance_rate=None):
    """Acceptance rate, ESS and split-half mean discrepancy in MC-SE units.

    ``chain`` is a :class:`McmcChain` or a raw sample matrix (then
    ``acceptance_rate`` may be given separately).
    """
    if isinstance(chain, McmcChain):
        s, acc = chain.samples, chain.acceptance_rate
    else:
        s = np.asarray(chain, dtype=float)
        s = s[:, None] if s.ndim == 1 else s
        acc = acceptance_rate
    n = s.shape[0]
    if n == 0:
        raise ValidationError("empty chain")
    ess = effective_sample_size(s)
    msgs = []
    if np.any(np.ptp(s, axis=0) == 0):
        msgs.append("chain is constant in at least one coordinate; no mixing")
    half = n // 2
    disc = np.zeros(s.shape[1])
    if half >= 4:
        a, b = s[:half], s[half:2 * half]
        se2 = (a.var(axis=0, ddof=1) / effective_sample_size(a)
               + b.var(axis=0, ddof=1) / effective_sample_size(b))
        with np.errstate(divide="ignore", invalid="ignore"):
            disc = np.where(se2 > 0, np.abs(a.mean(0) - b.mean(0)) / np.sqrt(se2), 0.0)
        if np.any(disc > 3.0):
            msgs.append("split-half means differ by more than 3 MC standard errors")
    degenerate = False
    if acc is not None:
        lo, hi = ACCEPT_WINDOW
        if not lo <= acc <= hi:
            msgs.append(f"acceptance rate {acc:.3f} outside [{lo}, {hi}]; "
                        + ("increase" if acc > hi else "decrease") + " the proposal scale")
        if acc > 0.95 and np.min(ess) < 0.01 * n:
            degenerate = True
            msgs.append("degenerate random walk: near-certain acceptance with tiny ESS")
    for m in msgs:
        warnings.warn(m, MixingWarning, stacklevel=2)
    return McmcSummary(n, acc, ess, disc, msgs, degenerate)
