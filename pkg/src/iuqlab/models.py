"""Computer-model abstraction, synthetic benchmark models and experiment records."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ModelFailure, ValidationError
from .stats import GaussianParamSpec, RngStream

SCALAR_SET = "scalar-set"
TIME_SERIES = "time-series"

DEFAULT_REL_STEP = 1e-4
ODE_REL_STEP = 1e-2


def _labels(labels, n, prefix):
    if labels is None:
        return tuple(f"{prefix}{i}" for i in range(n))
    labels = tuple(str(s) for s in labels)
    if len(labels) != n:
        raise ValidationError(f"expected {n} labels, got {len(labels)}")
    return labels


@dataclass(frozen=True)
class DesignPoint:
    """Experiment conditions ``x`` (treated as exactly known)."""

    values: np.ndarray
    labels: tuple = None
    name: str = ""

    def __post_init__(self):
        v = np.atleast_1d(np.asarray(self.values, dtype=float))
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ValidationError("design values must be a finite 1-D sequence")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "labels", _labels(self.labels, v.size, "x"))


@dataclass(frozen=True)
class CalibrationVector:
    values: np.ndarray
    labels: tuple = None

    def __post_init__(self):
        v = np.atleast_1d(np.asarray(self.values, dtype=float))
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ValidationError("calibration values must be a finite 1-D sequence")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "labels", _labels(self.labels, v.size, "theta"))

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class QoIVector:
    """Model or measured quantities of interest.

    ``values`` is 1-D for a scalar set, or ``(Z, T)`` for ``Z`` time traces that
    share the strictly increasing ``times``.
    """

    values: np.ndarray
    times: np.ndarray = None
    labels: tuple = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if self.times is not None:
            t = np.asarray(self.times, dtype=float)
            v = np.atleast_2d(v)
            if t.ndim != 1 or v.shape[1] != t.size:
                raise ValidationError("time stamps do not match trace length")
            if t.size > 1 and np.any(np.diff(t) <= 0):
                raise ValidationError("time stamps must be strictly increasing")
            object.__setattr__(self, "times", t)
        else:
            v = np.atleast_1d(v)
        object.__setattr__(self, "values", v)
        n = v.shape[0]
        object.__setattr__(self, "labels", _labels(self.labels, n, "y"))

    @property
    def flat(self):
        return self.values.ravel()

    @property
    def size(self):
        return self.values.size

    @property
    def is_time_series(self):
        return self.times is not None


@dataclass
class ModelSpec:
    """A deterministic computer model ``y = f(x, theta)``.

    ``evaluator(x, theta)`` receives plain float arrays and returns either an
    array (scalar-set models) or a :class:`QoIVector` (time-series models).
    """

    evaluator: object
    nominal: CalibrationVector
    output_kind: str = SCALAR_SET
    name: str = "model"
    design_dim: int = None
    qoi_labels: tuple = None
    rel_step: float = DEFAULT_REL_STEP

    def __post_init__(self):
        if not isinstance(self.nominal, CalibrationVector):
            self.nominal = CalibrationVector(self.nominal)
        if self.output_kind not in (SCALAR_SET, TIME_SERIES):
            raise ValidationError(f"unknown output kind {self.output_kind!r}")

    @property
    def n_params(self):
        return len(self.nominal)

    @property
    def param_labels(self):
        return self.nominal.labels

    def __call__(self, x, theta):
        return evaluate_model(self, x, theta)


@dataclass
class ExperimentRecord:
    """One observation: design point, measured QoIs and measurement variances."""

    design: DesignPoint
    observed: QoIVector
    noise_var: np.ndarray = None
    label: str = ""

    def __post_init__(self):
        if not isinstance(self.design, DesignPoint):
            self.design = DesignPoint(self.design)
        if not isinstance(self.observed, QoIVector):
            self.observed = QoIVector(self.observed)
        if self.noise_var is None:
            self.noise_var = np.zeros_like(self.observed.values)
        nv = np.asarray(self.noise_var, dtype=float)
        if nv.shape != self.observed.values.shape:
            try:
                nv = np.broadcast_to(nv.reshape(nv.shape + (1,) * (self.observed.values.ndim - nv.ndim)),
                                     self.observed.values.shape).copy()
            except ValueError:
                raise ValidationError("noise_var does not match observed values") from None
        if np.any(nv < 0) or not np.all(np.isfinite(nv)):
            raise ValidationError("noise variances must be finite and non-negative")
        self.noise_var = nv
        if not self.label:
            self.label = self.design.name or "design"

    @property
    def noise_sd(self):
        return np.sqrt(self.noise_var)


@dataclass
class SensitivityMatrix:
    entries: np.ndarray
    evaluation_point: np.ndarray
    step_sizes: np.ndarray = field(default=None)

    @property
    def shape(self):
        return self.entries.shape


def _as_array(v):
    if isinstance(v, (DesignPoint, CalibrationVector)):
        return v.values
    return np.atleast_1d(np.asarray(v, dtype=float))


def evaluate_model(model, x, theta):
    """Evaluate ``model`` at design ``x`` and parameters ``theta``.

    Raises :class:`ValidationError` on a dimension mismatch and
    :class:`ModelFailure` when the evaluator raises or returns non-finite values.
    """
    xv = _as_array(x)
    tv = _as_array(theta)
    if tv.size != model.n_params:
        raise ValidationError(f"model expects {model.n_params} parameters, got {tv.size}")
    if model.design_dim is not None and xv.size != model.design_dim:
        raise ValidationError(f"model expects a {model.design_dim}-D design, got {xv.size}")
    try:
        out = model.evaluator(xv.copy(), tv.copy())
    except ModelFailure:
        raise
    except Exception as exc:  # evaluator errors are model failures by contract
        raise ModelFailure(f"model {model.name!r} failed: {exc}", x=xv, theta=tv) from exc
    if not isinstance(out, QoIVector):
        out = QoIVector(out, labels=model.qoi_labels if model.qoi_labels and
                        len(model.qoi_labels) == np.size(out) else None)
    if not np.all(np.isfinite(out.values)):
        raise ModelFailure(f"model {model.name!r} returned non-finite output at x={xv}, theta={tv}",
                           x=xv, theta=tv)
    return out


def predict_for(model, record, theta):
    """Model output aligned element-by-element with ``record.observed``."""
    out = evaluate_model(model, record.design, theta)
    obs = record.observed
    if obs.is_time_series:
        if not out.is_time_series:
            raise ValidationError("time-series data needs a time-series model")
        vals = out.values
        if vals.shape[0] != obs.values.shape[0]:
            raise ValidationError("model and data have different numbers of traces")
        if out.times.shape == obs.times.shape and np.array_equal(out.times, obs.times):
            return vals
        return np.vstack([np.interp(obs.times, out.times, row) for row in vals])
    if out.values.size != obs.values.size:
        raise ValidationError(
            f"model returns {out.values.size} QoIs but record {record.label!r} has {obs.values.size}")
    return out.flat.reshape(obs.values.shape)


def jacobian_fd(fun, theta0, rel_step, labels=None):
    """Central-difference Jacobian of ``fun`` (returning a flat array) at ``theta0``.

    Step for parameter ``i`` is ``rel_step * max(|theta0_i|, 1)``.
    """
    if not rel_step > 0:
        raise ValidationError("rel_step must be positive")
    t0 = np.atleast_1d(np.asarray(theta0, dtype=float))
    labels = labels or tuple(f"theta{i}" for i in range(t0.size))
    steps = rel_step * np.maximum(np.abs(t0), 1.0)
    cols = []
    for i, h in enumerate(steps):
        tp, tm = t0.copy(), t0.copy()
        tp[i] += h
        tm[i] -= h
        try:
            yp = np.ravel(fun(tp))
            ym = np.ravel(fun(tm))
        except ModelFailure as exc:
            raise ModelFailure(f"model failed while perturbing parameter {labels[i]!r}: {exc}",
                               x=exc.x, theta=exc.theta, parameter=i) from exc
        col = (yp - ym) / (2.0 * h)
        if not np.all(np.isfinite(col)):
            raise ModelFailure(f"non-finite difference for parameter {labels[i]!r}", parameter=i)
        cols.append(col)
    return np.column_stack(cols), steps


def finite_difference_sensitivity(model, x, theta0, rel_step=None):
    """Central-difference sensitivities ``d y_j / d theta_i`` of the flattened output."""
    rel_step = model.rel_step if rel_step is None else rel_step
    t0 = _as_array(theta0).astype(float)
    entries, steps = jacobian_fd(lambda t: evaluate_model(model, x, t).flat, t0, rel_step,
                                 model.param_labels)
    return SensitivityMatrix(entries, t0, steps)


def generate_synthetic_experiments(model, truth, designs, noise_sd, seed):
    """Identical-twin data: per design draw ``theta ~ truth``, evaluate, add noise.

    Draw order per design: ``I`` parameter normals, then one normal per QoI
    element, all from ``RngStream(seed, 0)``. ``truth`` lives in CIRCE-variable
    space; its change of variable is applied around the model nominal.
    """
    if not isinstance(truth, GaussianParamSpec):
        raise ValidationError("truth must be a GaussianParamSpec")
    if truth.dim != model.n_params:
        raise ValidationError("truth dimension does not match the model")
    noise_sd = np.asarray(noise_sd, dtype=float)
    if np.any(noise_sd < 0):
        raise ValidationError("noise_sd must be non-negative")
    gen = RngStream(int(seed), 0).generator()
    sd = truth.sd
    records = []
    for k, d in enumerate(designs):
        d = d if isinstance(d, DesignPoint) else DesignPoint(d, name=f"d{k}")
        theta = truth.mean + sd * gen.standard_normal(truth.dim)
        y = evaluate_model(model, d, truth.to_model(theta, model.nominal.values))
        vals = y.values
        nsd = noise_sd
        if vals.ndim == 2 and nsd.ndim == 1 and nsd.size == vals.shape[0]:
            nsd = nsd[:, None]
        nsd = np.broadcast_to(nsd, vals.shape)
        obs = vals + nsd * gen.standard_normal(vals.shape)
        records.append(ExperimentRecord(
            d, QoIVector(obs, times=y.times, labels=y.labels), nsd**2,
            label=d.name or f"d{k}"))
    return records


# --------------------------------------------------------------------------
# built-in synthetic models
# --------------------------------------------------------------------------

def affine_model(S, B=None, c=None, nominal=None, name="affine"):
    """``y = S theta + B x + c``. Parameters are additive shifts (nominal 0)."""
    S = np.atleast_2d(np.asarray(S, dtype=float))
    J, I = S.shape
    c = np.zeros(J) if c is None else np.asarray(c, dtype=float)
    B = None if B is None else np.atleast_2d(np.asarray(B, dtype=float))

    def f(x, theta):
        y = S @ theta + c
        if B is not None:
            y = y + B @ x
        return y

    return ModelSpec(f, CalibrationVector(np.zeros(I) if nominal is None else nominal),
                     name=name, design_dim=None if B is None else B.shape[1])


def exponential_model(nominal=(1.0, 1.0), name="exponential"):
    """``y_k = theta_1 * exp(theta_2 * x_k)`` for each design component ``x_k``."""

    def f(x, theta):
        return theta[0] * np.exp(theta[1] * x)

    return ModelSpec(f, CalibrationVector(nominal, ("amplitude", "rate")), name=name)


@dataclass(frozen=True)
class RefloodConstants:
    t_sat: float = 373.15          # K
    power: float = 1.5e4           # W/m2, rod surface heat flux
    heat_capacity: float = 5000.0  # J/(m2 K), lumped clad + pellet per unit area
    h_film: float = 30.0           # W/(m2 K), pre-quench film boiling
    h_quench: float = 5000.0       # W/(m2 K), wetted wall
    elevations: tuple = (0.8, 1.6)  # m
    front_width: float = 0.05      # m
    t_end: float = 120.0           # s
    n_out: int = 241
    substeps: int = 10


def reflood_trajectory(x, theta, const=RefloodConstants()):
    """Clad temperature traces at fixed elevations during bottom reflood.

    ``x = (initial temperature K, flooding velocity m/s)``,
    ``theta = (wall HTC multiplier, quench-front speed multiplier)``.
    Integrated with fixed-step RK4.
    """
    T0, v = float(x[0]), float(x[1])
    p_htc, p_qf = float(theta[0]), float(theta[1])
    z = np.asarray(const.elevations, dtype=float)
    h_pre = p_htc * const.h_film
    times = np.linspace(0.0, const.t_end, const.n_out)
    n_steps = (times.size - 1) * const.substeps
    dt = (times[1] - times[0]) / const.substeps
    # coefficients of dT/dt = a - b T on the half-step grid used by RK4
    t_half = 0.5 * dt * np.arange(2 * n_steps + 1)
    wet = 0.5 * (1.0 + np.tanh((p_qf * v * t_half[:, None] - z) / (2.0 * const.front_width)))
    b = (h_pre + (const.h_quench - h_pre) * wet) / const.heat_capacity
    a = (const.power + b * const.heat_capacity * const.t_sat) / const.heat_capacity
    out = np.empty((z.size, times.size))
    for iz in range(z.size):
        aa, bb = a[:, iz].tolist(), b[:, iz].tolist()
        T = T0
        trace = [T]
        for n in range(n_steps):
            i0, i1, i2 = 2 * n, 2 * n + 1, 2 * n + 2
            k1 = aa[i0] - bb[i0] * T
            k2 = aa[i1] - bb[i1] * (T + 0.5 * dt * k1)
            k3 = aa[i1] - bb[i1] * (T + 0.5 * dt * k2)
            k4 = aa[i2] - bb[i2] * (T + dt * k3)
            T = T + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if (n + 1) % const.substeps == 0:
                trace.append(T)
        out[iz] = trace
    return times, out


def reflood_model(const=RefloodConstants(), name="reflood"):
    labels = tuple(f"clad_temperature_z{zz:g}m" for zz in const.elevations)

    def f(x, theta):
        times, traces = reflood_trajectory(x, theta, const)
        return QoIVector(traces, times=times, labels=labels)

    return ModelSpec(f, CalibrationVector((1.0, 1.0), ("htc_multiplier", "quench_front_multiplier")),
                     output_kind=TIME_SERIES, name=name, design_dim=2, qoi_labels=labels,
                     rel_step=ODE_REL_STEP)
