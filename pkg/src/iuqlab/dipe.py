"""DIPE coverage-rate quantification.

For each value of a parameter the model is run and the fraction of data points
lying strictly above the simulated curve is recorded. Read against the
parameter, that fraction behaves like a (complementary) cumulative distribution
whose 2.5% and 97.5% levels give the parameter range.
"""

from dataclasses import dataclass

import numpy as np

from .errors import BracketError, ValidationError
from .models import predict_for

__all__ = ["CoverageCurve", "coverage_rate", "dipe_pseudo_cdf", "dipe_bounds",
           "coverage_raster", "is_monotone", "flip_diagnostic"]

MONOTONE_BAND = 0.02
MIN_NODES = 5


def coverage_rate(sim, data):
    """Fraction of data points strictly greater than the simulation at the same abscissa."""
    sim = np.ravel(getattr(sim, "values", sim)).astype(float)
    data = np.ravel(getattr(data, "values", data)).astype(float)
    if data.size == 0:
        raise ValidationError("coverage rate of an empty vector")
    if sim.size != data.size:
        raise ValidationError("simulation and data differ in length")
    return float(np.count_nonzero(data > sim)) / data.size


def is_monotone(p, band=MONOTONE_BAND):
    """``'increasing'``, ``'decreasing'`` or ``None`` within a tolerance band."""
    p = np.asarray(p, dtype=float)
    inc = bool(np.all(p >= np.maximum.accumulate(p) - band))
    dec = bool(np.all(p <= np.minimum.accumulate(p) + band))
    if inc and dec:
        return "increasing" if p[-1] >= p[0] else "decreasing"
    if inc:
        return "increasing"
    return "decreasing" if dec else None


@dataclass
class CoverageCurve:
    theta: np.ndarray
    P: np.ndarray
    monotone: bool
    direction: str = None
    parameter: int = 0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.P = np.asarray(self.P, dtype=float)
        if self.theta.shape != self.P.shape:
            raise ValidationError("theta and P differ in length")
        if np.any(np.diff(self.theta) <= 0):
            raise ValidationError("theta must be strictly increasing")
        if np.any((self.P < 0) | (self.P > 1)):
            raise ValidationError("coverage fractions must lie in [0, 1]")

    @classmethod
    def from_values(cls, theta, P, parameter=0):
        d = is_monotone(P)
        return cls(theta, P, d is not None, d, parameter)

    def to_dict(self):
        return {"parameter": self.parameter, "theta": self.theta.tolist(), "P": self.P.tolist(),
                "monotone": self.monotone, "direction": self.direction}


def _theta_at(nominal, i, v):
    t = np.array(nominal, dtype=float)
    t[i] = v
    return t


def dipe_pseudo_cdf(model, experiments, theta_grid, parameter=0, nominal=None):
    """Coverage fraction per grid node, averaged over experiments.

    The grid holds values of parameter ``parameter`` (model units); the other
    parameters stay at ``nominal``.
    """
    grid = np.asarray(theta_grid, dtype=float)
    if grid.size < MIN_NODES:
        raise ValidationError(f"theta grid needs at least {MIN_NODES} nodes")
    experiments = list(experiments)
    if not experiments:
        raise ValidationError("no experiments")
    nominal = model.nominal.values if nominal is None else nominal
    P = np.empty(grid.size)
    for k, v in enumerate(grid):
        theta = _theta_at(nominal, parameter, v)
        P[k] = np.mean([coverage_rate(predict_for(model, rec, theta), rec.observed.values)
                        for rec in experiments])
    return CoverageCurve.from_values(grid, P, parameter)


def _first_crossing(x, F, level):
    idx = np.nonzero(F >= level)[0]
    k = int(idx[0])
    if k == 0:
        return float(x[0])
    f0, f1 = F[k - 1], F[k]
    return float(x[k - 1] + (level - f0) * (x[k] - x[k - 1]) / (f1 - f0))


def dipe_bounds(curve, levels=(0.025, 0.975)):
    """Parameter values where the oriented pseudo-CDF reaches ``levels``.

    A decreasing coverage curve is read as ``F = 1 - P``. Non-monotone curves
    are refused; a level outside the attained range raises :class:`BracketError`.
    """
    if not curve.monotone:
        raise ValidationError("coverage curve is not monotone; DIPE bounds refused")
    F = 1.0 - curve.P if curve.direction == "decreasing" else curve.P
    F = np.maximum.accumulate(F)   # absorb in-band wiggles
    lo_att, hi_att = float(F[0]), float(F[-1])
    out = []
    for level in sorted(levels):
        if not (lo_att <= level and hi_att >= level) or lo_att == hi_att:
            raise BracketError(
                f"level {level} not bracketed: pseudo-CDF spans [{lo_att:.4f}, {hi_att:.4f}]; "
                "expand the parameter range", attainable=(lo_att, hi_att))
        if level == lo_att:
            out.append(float(curve.theta[np.nonzero(F == lo_att)[0][-1]]))
        else:
            out.append(_first_crossing(curve.theta, F, level))
    return tuple(out)


def coverage_raster(model, experiments, grid_a, grid_b, parameters=(0, 1), nominal=None):
    """Coverage over a 2-D parameter grid.

    The raster is not a joint CDF; it only shows which parameter pairs place a
    given fraction of the data above the simulation.
    """
    nominal = model.nominal.values if nominal is None else nominal
    i, k = parameters
    grid_a = np.asarray(grid_a, dtype=float)
    grid_b = np.asarray(grid_b, dtype=float)
    R = np.empty((grid_a.size, grid_b.size))
    for a, va in enumerate(grid_a):
        for b, vb in enumerate(grid_b):
            t = _theta_at(_theta_at(nominal, i, va), k, vb)
            R[a, b] = np.mean([coverage_rate(predict_for(model, rec, t), rec.observed.values)
                               for rec in experiments])
    return {"label": "coverage raster (not a joint CDF)", "parameters": list(parameters),
            "grid_a": grid_a.tolist(), "grid_b": grid_b.tolist(), "coverage": R.tolist()}


def flip_diagnostic(model, experiments, theta):
    """Fraction of points whose above/below status flips when data move by +/- 2 sd.

    Diagnostic only; measurement error does not enter the coverage rate.
    """
    flips = total = 0
    for rec in experiments:
        sim = np.ravel(predict_for(model, rec, theta))
        y = np.ravel(rec.observed.values)
        e = 2.0 * np.ravel(rec.noise_sd)
        flips += np.count_nonzero((y + e > sim) != (y - e > sim))
        total += y.size
    return flips / total if total else 0.0
