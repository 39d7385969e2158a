"""Forward propagation, envelope verification and the sample-adjusting loop."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..errors import ModelFailure, NumericalError, ValidationError
from ..mcmc import McmcChain
from ..models import jacobian_fd, predict_for
from ..stats import GaussianParamSpec, RngStream, draw_mvn

__all__ = ["UniformRanges", "MvnSource", "Bands", "EnvelopeReport", "SampleAdjustResult",
           "draw_parameters", "forward_uq", "envelope_check", "sample_adjust_iuq"]

log = logging.getLogger(__name__)

MAX_FAILURE_FRACTION = 0.01
BAND_LEVELS = (2.5, 50.0, 97.5)


@dataclass
class UniformRanges:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        self.hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if self.lo.shape != self.hi.shape or np.any(self.lo > self.hi):
            raise ValidationError("ranges need lo <= hi per parameter")
        if not (np.all(np.isfinite(self.lo)) and np.all(np.isfinite(self.hi))):
            raise ValidationError("ranges must be finite")


@dataclass
class MvnSource:
    """Gaussian law directly in model-parameter space (full covariance)."""

    mean: np.ndarray
    cov: np.ndarray


def draw_parameters(source, n, nominal, seed):
    """``n`` model-parameter vectors from a spec, ranges, Gaussian or chain."""
    rng = RngStream(seed, 21)
    if isinstance(source, GaussianParamSpec):
        theta = draw_mvn(source.mean, source.cov, rng, n)
        return source.to_model(theta, nominal)
    if isinstance(source, UniformRanges):
        u = rng.generator().random((n, source.lo.size))
        return source.lo + u * (source.hi - source.lo)
    if isinstance(source, MvnSource):
        return draw_mvn(source.mean, source.cov, rng, n)
    samples = source.samples if isinstance(source, McmcChain) else np.atleast_2d(source)
    idx = np.linspace(0, samples.shape[0] - 1, min(n, samples.shape[0])).round().astype(int)
    return samples[idx]


@dataclass
class Bands:
    labels: list
    lower: list
    median: list
    upper: list
    n_used: int
    n_failed: int = 0

    def to_dict(self):
        return {"labels": list(self.labels), "n_used": self.n_used, "n_failed": self.n_failed,
                "lower": [np.asarray(a).tolist() for a in self.lower],
                "median": [np.asarray(a).tolist() for a in self.median],
                "upper": [np.asarray(a).tolist() for a in self.upper]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["labels"], [np.array(a) for a in d["lower"]],
                   [np.array(a) for a in d["median"]], [np.array(a) for a in d["upper"]],
                   d["n_used"], d.get("n_failed", 0))


def _run_all(model, experiments, thetas, jobs):
    def one(theta):
        try:
            return [predict_for(model, rec, theta) for rec in experiments]
        except ModelFailure as exc:
            log.debug("FUQ sample failed: %s", exc)
            return None

    if jobs and jobs > 1:
        with ThreadPoolExecutor(max_workers=int(jobs)) as pool:
            return list(pool.map(one, thetas))
    return [one(t) for t in thetas]


def _propagate(model, experiments, thetas, levels, jobs=1):
    outs = _run_all(model, experiments, thetas, jobs)
    ok = [o for o in outs if o is not None]
    failed = len(outs) - len(ok)
    if failed > MAX_FAILURE_FRACTION * len(outs):
        raise NumericalError(f"{failed} of {len(outs)} forward runs failed (limit 1%)")
    if not ok:
        raise NumericalError("every forward run failed")
    lower, median, upper = [], [], []
    for k in range(len(experiments)):
        Y = np.stack([o[k] for o in ok])
        q = np.percentile(Y, levels, axis=0)
        lower.append(q[0])
        median.append(q[1])
        upper.append(q[2])
    return Bands([r.label for r in experiments], lower, median, upper, len(ok), failed)


def forward_uq(model, source, experiments, n_samples=1000, seed=0, jobs=1, levels=BAND_LEVELS):
    """Percentile bands of the model output at every experiment's design.

    Parameters
    ----------
    source : GaussianParamSpec, UniformRanges, MvnSource, McmcChain or ndarray
        Parameter law; chains are thinned evenly to ``n_samples`` states.
    """
    if n_samples < 200:
        raise ValidationError("n_samples must be >= 200", field="fuq.n_samples")
    experiments = list(experiments)
    thetas = draw_parameters(source, int(n_samples), model.nominal.values, seed)
    return _propagate(model, experiments, thetas, levels, jobs)


@dataclass
class EnvelopeReport:
    per_qoi: dict
    overall: float
    passed: bool
    target: float
    band_width: dict
    n_points: int

    def to_dict(self):
        return {"per_qoi": self.per_qoi, "overall": self.overall, "passed": self.passed,
                "target": self.target, "band_width": self.band_width, "n_points": self.n_points}


def _inside_masks(bands, experiments):
    experiments = list(experiments)
    if [r.label for r in experiments] != list(bands.labels):
        raise ValidationError("bands and experiments are not aligned by design")
    out = []
    for rec, lo, hi in zip(experiments, bands.lower, bands.upper):
        y = rec.observed.values
        if np.shape(lo) != y.shape:
            raise ValidationError(f"band shape differs from data for {rec.label!r}")
        out.append((rec, y >= lo, y <= hi))
    return out


def envelope_check(bands, experiments, target=0.95):
    """Fraction of data points inside the bands, per QoI label and overall."""
    counts, totals, widths = {}, {}, {}
    inside_all = total_all = 0
    for (rec, above_lo, below_hi), lo, hi in zip(_inside_masks(bands, experiments),
                                                  bands.lower, bands.upper):
        inside = above_lo & below_hi
        for z, label in enumerate(rec.observed.labels):
            row = inside[z] if inside.ndim > 1 else inside[z:z + 1]
            w = (np.asarray(hi) - np.asarray(lo))[z]
            counts[label] = counts.get(label, 0) + int(np.count_nonzero(row))
            totals[label] = totals.get(label, 0) + int(np.size(row))
            widths.setdefault(label, []).append(float(np.mean(w)))
        inside_all += int(np.count_nonzero(inside))
        total_all += inside.size
    if total_all == 0:
        raise ValidationError("no data points to check")
    per = {k: counts[k] / totals[k] for k in sorted(counts)}
    overall = inside_all / total_all
    return EnvelopeReport(per, overall, bool(overall >= target), float(target),
                          {k: float(np.mean(v)) for k, v in sorted(widths.items())}, total_all)


@dataclass
class SampleAdjustResult:
    lo: np.ndarray
    hi: np.ndarray
    converged: bool
    rounds: list = field(default_factory=list)

    def to_dict(self):
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist(), "converged": self.converged,
                "rounds": self.rounds}


def sample_adjust_iuq(model, experiments, lo, hi, n_samples=125, max_rounds=10, target=1.0,
                      expansion=1.25, seed=0, jobs=1):
    """Widen uniform parameter ranges until sampled runs envelop the data.

    Each round samples the current box, forms the min/max band over the runs
    and counts covered points. For every data point above (below) the band,
    each parameter whose output sensitivity would raise (lower) that point has
    the corresponding range end pushed out by ``(expansion - 1)`` times the
    current width. Ranges never shrink.
    """
    if max_rounds < 1:
        raise ValidationError("max_rounds must be >= 1")
    experiments = list(experiments)
    ranges = UniformRanges(lo, hi)
    lo, hi = ranges.lo.copy(), ranges.hi.copy()
    if np.any(lo >= hi):
        raise ValidationError("initial ranges need lo < hi")
    y = np.concatenate([np.ravel(r.observed.values) for r in experiments])
    rounds = []
    for k in range(1, int(max_rounds) + 1):
        gen = RngStream(seed, 100 + k).generator()
        thetas = lo + gen.random((int(n_samples), lo.size)) * (hi - lo)
        bands = _propagate(model, experiments, thetas, (0.0, 50.0, 100.0), jobs)
        b_lo = np.concatenate([np.ravel(a) for a in bands.lower])
        b_hi = np.concatenate([np.ravel(a) for a in bands.upper])
        above = y > b_hi
        below = y < b_lo
        coverage = 1.0 - float(np.count_nonzero(above | below)) / y.size
        entry = {"round": k, "lo": lo.tolist(), "hi": hi.tolist(), "coverage": coverage}
        rounds.append(entry)
        if coverage >= target:
            return SampleAdjustResult(lo, hi, True, rounds)

        def stacked(t):
            return np.concatenate([np.ravel(predict_for(model, r, t)) for r in experiments])

        centre = 0.5 * (lo + hi)
        S, _ = jacobian_fd(stacked, centre, model.rel_step)
        width = hi - lo
        # only count sensitivities that matter over the current width
        eff = S * width
        tiny = 1e-12 * max(np.max(np.abs(eff)), 1e-300)
        push_up = ((eff[above] > tiny).any(axis=0)) | ((eff[below] < -tiny).any(axis=0))
        push_down = ((eff[above] < -tiny).any(axis=0)) | ((eff[below] > tiny).any(axis=0))
        if not (push_up.any() or push_down.any()):
            entry["note"] = "no parameter can move the escaping points"
            break
        step = (expansion - 1.0) * width
        hi = np.where(push_up, hi + step, hi)
        lo = np.where(push_down, lo - step, lo)
        entry["expanded_hi"] = push_up.tolist()
        entry["expanded_lo"] = push_down.tolist()
    return SampleAdjustResult(lo, hi, False, rounds)
