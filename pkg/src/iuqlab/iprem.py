"""FFT-based accuracy metrics and IPREM range-of-variation quantification.

The Average Amplitude compares the spectrum of the error signal with the
spectrum of the experimental signal over all ``2**m`` discrete frequencies of a
uniform resampling. IPREM perturbs one parameter at a time and scores each run
against both the data and the nominal (reference) run. The parameter range is
read off where the resulting criterion crosses a threshold.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .models import ExperimentRecord, evaluate_model

__all__ = [
    "TimeSeriesSignal", "SpectralComparison", "IpremGrid", "IpremRange", "IpremResult",
    "resample_pow2", "default_exponent", "average_amplitude", "global_AA", "criterion_CR",
    "cr_bounds", "default_grid", "iprem_quantify", "combine_ranges",
]

log = logging.getLogger(__name__)

DEFAULT_ETA = 0.22
MAX_EXPONENT = 14
MIN_EXPONENT = 3


@dataclass(frozen=True)
class TimeSeriesSignal:
    times: np.ndarray
    values: np.ndarray
    label: str = ""

    def __post_init__(self):
        t = np.ravel(np.asarray(self.times, dtype=float))
        v = np.ravel(np.asarray(self.values, dtype=float))
        if t.size < 2:
            raise ValidationError("a signal needs at least 2 points")
        if t.size != v.size:
            raise ValidationError("times and values differ in length")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
            raise ValidationError("signal has non-finite entries")
        if np.any(np.diff(t) <= 0):
            raise ValidationError("times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @property
    def n(self):
        return self.times.size


@dataclass
class SpectralComparison:
    AA: float
    n_points: int
    numerator: float
    denominator: float


def default_exponent(n_raw):
    """Smallest ``m`` with ``2**m >= n_raw``, kept within [3, 14]."""
    m = int(np.ceil(np.log2(max(int(n_raw), 2))))
    return int(min(max(m, MIN_EXPONENT), MAX_EXPONENT))


def resample_pow2(signal, m, t_range=None):
    """Linear interpolation onto ``2**m`` uniform points spanning ``t_range``."""
    if not isinstance(signal, TimeSeriesSignal):
        signal = TimeSeriesSignal(*signal)
    if m < MIN_EXPONENT:
        raise ValidationError(f"m must be >= {MIN_EXPONENT}")
    t0, t1 = (signal.times[0], signal.times[-1]) if t_range is None else t_range
    if not t1 > t0:
        raise ValidationError("signal spans no positive duration")
    t = np.linspace(t0, t1, 2**int(m))
    return TimeSeriesSignal(t, np.interp(t, signal.times, signal.values), signal.label)


def _common_window(a, b):
    t0 = max(a.times[0], b.times[0])
    t1 = min(a.times[-1], b.times[-1])
    if not t1 > t0:
        raise ValidationError("signals do not share a time window")
    return t0, t1


def average_amplitude(exp, mod, m=None):
    """``AA = sum|F(mod - exp)| / sum|F(exp)|`` on the common window."""
    exp = exp if isinstance(exp, TimeSeriesSignal) else TimeSeriesSignal(*exp)
    mod = mod if isinstance(mod, TimeSeriesSignal) else TimeSeriesSignal(*mod)
    if m is None:
        m = default_exponent(max(exp.n, mod.n))
    window = _common_window(exp, mod)
    e = resample_pow2(exp, m, window).values
    y = resample_pow2(mod, m, window).values
    den = float(np.sum(np.abs(np.fft.fft(e))))
    if not den > 0:
        raise NumericalError("experimental spectrum vanishes; AA undefined")
    num = float(np.sum(np.abs(np.fft.fft(y - e))))
    return SpectralComparison(num / den, 2**int(m), num, den)


def global_AA(aas, weights=None):
    """Weighted mean of per-QoI AAs with weights normalized to sum to one."""
    aas = np.ravel(np.asarray(aas, dtype=float))
    if aas.size == 0:
        raise ValidationError("no QoIs to combine")
    w = np.ones(aas.size) if weights is None else np.ravel(np.asarray(weights, dtype=float))
    if w.size != aas.size:
        raise ValidationError("weights and AAs differ in length")
    if np.any(w <= 0):
        raise ValidationError("weights must be positive")
    return float(np.sum(w / w.sum() * aas))


def criterion_CR(aag_se, aag_sr, aag_re):
    """IPREM criterion ``(SE + SR - RE) / (1 - SE)``."""
    if min(aag_se, aag_sr, aag_re) < 0:
        raise ValidationError("AAG values must be non-negative")
    if aag_se >= 1.0:
        raise NumericalError(f"AAG_SE = {aag_se:.4g} >= 1; criterion undefined")
    return (aag_se + aag_sr - aag_re) / (1.0 - aag_se)


@dataclass
class IpremGrid:
    parameter: int
    values: np.ndarray
    cr: np.ndarray
    weights: np.ndarray

    @property
    def normalized_weights(self):
        return self.weights / self.weights.sum()


@dataclass
class IpremRange:
    parameter: int
    lower: float
    upper: float
    status: str
    advisories: list = field(default_factory=list)

    def to_dict(self):
        return {"parameter": self.parameter, "lower": self.lower, "upper": self.upper,
                "status": self.status, "advisories": list(self.advisories)}


def _crossing(x0, x1, c0, c1, eta):
    return float(x0 + (eta - c0) * (x1 - x0) / (c1 - c0))


def cr_bounds(grid, cr, nominal, eta=DEFAULT_ETA, parameter=0):
    """Threshold crossings of a CR profile nearest the nominal on each side.

    A crossing below the nominal is the lower bound, one above it the upper
    bound. Status is ``none`` when CR already exceeds ``eta`` at the nominal.
    """
    x = np.asarray(grid, dtype=float)
    c = np.asarray(cr, dtype=float)
    if x.size != c.size or x.size < 2:
        raise ValidationError("grid and CR must have the same length >= 2")
    if np.any(np.diff(x) <= 0):
        raise ValidationError("grid must be strictly increasing")
    if not x[0] <= nominal <= x[-1]:
        raise ValidationError("grid does not bracket the nominal value")
    c_nom = float(np.interp(nominal, x, c))
    advisories = []
    if c_nom > eta:
        advisories.append(f"CR at the nominal value exceeds eta = {eta}; reduce eta")
        return IpremRange(parameter, None, None, "none", advisories)
    # walk outward from the nominal along the piecewise-linear profile
    xs = np.concatenate(([nominal], x[x > nominal]))
    cs = np.concatenate(([c_nom], c[x > nominal]))
    upper, n_up = _walk(xs, cs, eta)
    xs = np.concatenate(([nominal], x[x < nominal][::-1]))
    cs = np.concatenate(([c_nom], c[x < nominal][::-1]))
    lower, n_lo = _walk(xs, cs, eta)
    if n_up > 1 or n_lo > 1:
        log.info("parameter %d: outer threshold crossings ignored (%d lower, %d upper)",
                 parameter, max(n_lo - 1, 0), max(n_up - 1, 0))
        advisories.append("multiple threshold crossings; nearest to the nominal kept")
    if lower is not None and upper is not None:
        status = "both-bounds"
    elif upper is not None:
        status = "upper-only"
    elif lower is not None:
        status = "lower-only"
    else:
        status = "none"
        advisories.append(f"CR never reaches eta = {eta} on the grid; reduce eta "
                          "or widen the grid")
    return IpremRange(parameter, lower, upper, status, advisories)


def _walk(xs, cs, eta):
    """First upward crossing of ``eta`` along ``xs`` and the number of crossings."""
    first, count = None, 0
    above = cs[0] > eta
    for k in range(1, xs.size):
        now = cs[k] > eta
        if now != above:
            count += 1
            if first is None:
                first = _crossing(xs[k - 1], xs[k], cs[k - 1], cs[k], eta)
        above = now
    return first, count


def default_grid(lo, hi, nominal, n=9):
    """``n`` evenly spaced values over ``[lo, hi]`` with the nominal inserted."""
    if not lo < hi or not lo <= nominal <= hi:
        raise ValidationError("prior range must bracket the nominal value")
    g = np.linspace(lo, hi, n)
    return np.unique(np.append(g, nominal))


@dataclass
class IpremResult:
    ranges: list
    grids: list
    aag_re: float

    def to_dict(self):
        return {"ranges": [r.to_dict() for r in self.ranges], "aag_re": self.aag_re,
                "grids": [{"parameter": g.parameter, "values": g.values.tolist(),
                           "cr": g.cr.tolist()} for g in self.grids]}


def _signals(record, y):
    obs = record.observed
    if not obs.is_time_series:
        raise ValidationError(f"IPREM needs time-series QoIs (record {record.label!r})")
    vals = np.atleast_2d(y.values)
    return [TimeSeriesSignal(y.times, row) for row in vals]


def _experiment_signals(record):
    obs = record.observed
    if not obs.is_time_series:
        raise ValidationError(f"IPREM needs time-series QoIs (record {record.label!r})")
    return [TimeSeriesSignal(obs.times, row) for row in np.atleast_2d(obs.values)]


def _aag(a_sigs, b_sigs, weights, m):
    return global_AA([average_amplitude(a, b, m).AA for a, b in zip(a_sigs, b_sigs)], weights)


def iprem_quantify(model, experiment, grids, weights=None, eta=DEFAULT_ETA, m=None,
                   nominal=None):
    """One-at-a-time IPREM ranges for every parameter with a grid.

    Parameters
    ----------
    model : ModelSpec
        Time-series model.
    experiment : ExperimentRecord
        Transient with one trace per QoI.
    grids : dict or sequence
        Parameter index -> perturbation values (model-parameter units).
    weights : array_like, optional
        Importance weights ``W_z`` per QoI; equal when omitted.
    """
    if not isinstance(experiment, ExperimentRecord):
        raise ValidationError("experiment must be an ExperimentRecord")
    nominal = model.nominal.values if nominal is None else np.asarray(nominal, dtype=float)
    grids = dict(grids) if isinstance(grids, dict) else dict(enumerate(grids))
    exp_sigs = _experiment_signals(experiment)
    n_raw = max(s.n for s in exp_sigs)
    m = default_exponent(n_raw) if m is None else int(m)
    w = np.ones(len(exp_sigs)) if weights is None else np.asarray(weights, dtype=float)
    if w.size != len(exp_sigs):
        raise ValidationError("one weight per QoI trace is required")
    ref_sigs = _signals(experiment, evaluate_model(model, experiment.design, nominal))
    aag_re = _aag(exp_sigs, ref_sigs, w, m)
    ranges, out_grids = [], []
    for i, values in sorted(grids.items()):
        values = np.asarray(values, dtype=float)
        if values.size < 2 or np.any(np.diff(values) <= 0):
            raise ValidationError(f"grid for parameter {i} must be strictly increasing", field=f"grids.{i}")
        if not values[0] <= nominal[i] <= values[-1]:
            raise ValidationError(f"grid for parameter {i} does not bracket the nominal",
                                  field=f"grids.{i}")
        cr = np.empty(values.size)
        for k, v in enumerate(values):
            theta = nominal.copy()
            theta[i] = v
            s_sigs = _signals(experiment, evaluate_model(model, experiment.design, theta))
            aag_se = _aag(exp_sigs, s_sigs, w, m)
            aag_sr = _aag(ref_sigs, s_sigs, w, m)
            cr[k] = criterion_CR(aag_se, aag_sr, aag_re)
        out_grids.append(IpremGrid(i, values, cr, w))
        ranges.append(cr_bounds(values, cr, nominal[i], eta, parameter=i))
    return IpremResult(ranges, out_grids, aag_re)


def combine_ranges(per_test):
    """Intersection and union of per-transient ranges for each parameter.

    Only ranges with both bounds take part; the result maps parameter index to
    ``{"intersection": (lo, hi) or None, "union": (lo, hi) or None}``.
    """
    out = {}
    for result in per_test:
        for r in result.ranges:
            if r.status == "both-bounds":
                out.setdefault(r.parameter, []).append((r.lower, r.upper))
    combined = {}
    for i, rs in out.items():
        lo = max(a for a, _ in rs)
        hi = min(b for _, b in rs)
        combined[i] = {"intersection": (lo, hi) if lo <= hi else None,
                       "union": (min(a for a, _ in rs), max(b for _, b in rs)),
                       "n_tests": len(rs)}
    return combined
