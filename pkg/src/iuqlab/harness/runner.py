"""Scenario pipeline: generate -> IUQ -> FUQ -> envelope -> report."""

import dataclasses
import logging
from pathlib import Path

import numpy as np

from .. import circe, dipe, iprem, mba, mcda
from ..errors import ValidationError
from ..mcmc import McmcConfig
from ..models import (DesignPoint, affine_model, exponential_model, generate_synthetic_experiments,
                      reflood_model, TIME_SERIES)
from ..stats import GaussianParamSpec
from . import fuq as fuq_mod
from .dataio import read_experiments, write_experiments
from .report import build_report, emit_report, load_json, write_json

log = logging.getLogger(__name__)

EXPERIMENTS_NAME = "experiments.csv"
IUQ_NAME = "iuq.json"
BANDS_JSON = "bands.json"
ENVELOPE_NAME = "envelope.json"
CHAIN_KEEP = 5000


def build_model(section):
    if section.kind == "affine":
        m = affine_model(section.S, section.B, section.c, section.nominal)
    elif section.kind == "exponential":
        m = exponential_model(tuple(section.nominal) if section.nominal else (1.0, 1.0))
    else:
        m = reflood_model()
    if section.rel_step is not None:
        m = dataclasses.replace(m, rel_step=section.rel_step)
    return m


def build_designs(section):
    if section.designs is not None:
        pts = section.designs
    elif section.n_designs is not None:
        axes = [np.linspace(lo, hi, section.n_designs) for lo, hi in section.design_range]
        pts = np.column_stack(axes).tolist()
    else:
        pts = []
    return [DesignPoint(p, name=f"d{k}") for k, p in enumerate(pts)]


def truth_spec(cfg, model):
    t = cfg.truth
    if len(t.mean) != model.n_params:
        raise ValidationError(f"model has {model.n_params} parameters, truth gives {len(t.mean)}",
                              field="truth.mean")
    if len(t.var) != len(t.mean):
        raise ValidationError("var and mean differ in length", field="truth.var")
    return GaussianParamSpec(t.mean, t.var, tuple(t.transform) if t.transform else None)


def obtain_experiments(cfg, model, seed):
    designs = build_designs(cfg.experiments)
    if cfg.experiments.data_file:
        return read_experiments(cfg.experiments.data_file, {d.name: d.values for d in designs})
    return generate_synthetic_experiments(model, truth_spec(cfg, model), designs,
                                          cfg.experiments.noise_sd, seed)


# --------------------------------------------------------------------------
# parameter sources (serializable)
# --------------------------------------------------------------------------

def source_to_dict(src):
    if isinstance(src, GaussianParamSpec):
        return {"kind": "gaussian", "spec": src.to_dict()}
    if isinstance(src, fuq_mod.UniformRanges):
        return {"kind": "uniform", "lo": src.lo.tolist(), "hi": src.hi.tolist()}
    if isinstance(src, fuq_mod.MvnSource):
        return {"kind": "mvn", "mean": np.asarray(src.mean).tolist(),
                "cov": np.asarray(src.cov).tolist()}
    samples = src.samples if hasattr(src, "samples") else np.asarray(src)
    idx = np.linspace(0, samples.shape[0] - 1, min(CHAIN_KEEP, samples.shape[0])).round().astype(int)
    return {"kind": "chain", "samples": samples[idx].tolist()}


def source_from_dict(d):
    kind = d["kind"]
    if kind == "gaussian":
        return GaussianParamSpec.from_dict(d["spec"])
    if kind == "uniform":
        return fuq_mod.UniformRanges(d["lo"], d["hi"])
    if kind == "mvn":
        return fuq_mod.MvnSource(np.array(d["mean"]), np.array(d["cov"]))
    if kind == "chain":
        return np.array(d["samples"], dtype=float)
    raise ValidationError(f"unknown parameter source {kind!r}")


# --------------------------------------------------------------------------
# methods
# --------------------------------------------------------------------------

def _circe_transform(opts, model, records):
    kinds = opts.transform
    if kinds is None:
        return ("additive",) * model.n_params
    if "auto" in kinds:
        cfg = circe.IterativeCirceConfig(outer_max=opts.outer_max, outer_tol=opts.outer_tol,
                                         tol=opts.tol, max_iter=opts.max_iter)
        chosen, _, _ = circe.select_change_of_variable(model, records, cfg)
        return chosen
    if len(kinds) != model.n_params:
        raise ValidationError("one transform per parameter", field="method.circe.transform")
    return tuple(kinds)


def _run_circe(cfg, model, records, seed, jobs):
    opts = cfg.method.circe
    kinds = _circe_transform(opts, model, records)
    d, e, S = circe._stack(model, records, np.zeros(model.n_params), kinds, model.rel_step)
    est = circe.circe_no_bias(circe.CirceInputs(d, S, e, tol=opts.tol, max_iter=opts.max_iter,
                                                transform=kinds))
    out = est.to_dict()
    out["linearity_deviation"] = circe.linearity_deviation(model, records, est.spec)
    return out, est.spec


def _run_circe_bias(cfg, model, records, seed, jobs):
    opts = cfg.method.circe
    kinds = _circe_transform(opts, model, records)
    res = circe.iterative_circe(model, records, config=circe.IterativeCirceConfig(
        outer_max=opts.outer_max, outer_tol=opts.outer_tol, transform=kinds, tol=opts.tol,
        max_iter=opts.max_iter))
    return res.to_dict(), res.spec


def _run_mle_map(cfg, model, records, seed, jobs):
    opts = cfg.method.mle_map
    kinds = ("additive",) * model.n_params
    blocks = []
    for rec in records:
        d, e, S = circe._stack(model, [rec], np.zeros(model.n_params), kinds, model.rel_step)
        blocks.append(circe.MleBlock(d, S, e))
    prior = None
    if opts.prior_mean is not None:
        I = model.n_params
        prior = circe.ConjugatePrior(opts.prior_mean, opts.prior_kappa or [0.0] * I,
                                     opts.prior_scale or [0.0] * I, opts.prior_dof or [0.0] * I)
    est = circe.mle_map_estimate(blocks, prior, tol=opts.tol)
    spec = est.spec
    out = est.to_dict()
    out["estimator"] = "map" if prior is not None else "mle"
    return out, spec


def _iprem_box(results, nominal, eta):
    """Uniform box for propagation, intersected over tests.

    A side where CR stays below ``eta`` up to the grid end takes the grid end;
    a parameter whose CR already exceeds ``eta`` at the nominal stays fixed.
    """
    lo = np.full(nominal.size, -np.inf)
    hi = np.full(nominal.size, np.inf)
    fixed = np.zeros(nominal.size, dtype=bool)
    for res in results:
        for r, g in zip(res.ranges, res.grids):
            i = r.parameter
            k = int(np.argmin(np.abs(g.values - nominal[i])))
            if r.status == "none" and g.cr[k] > eta:
                fixed[i] = True
                continue
            lo[i] = max(lo[i], g.values[0] if r.lower is None else r.lower)
            hi[i] = min(hi[i], g.values[-1] if r.upper is None else r.upper)
    bad = fixed | ~np.isfinite(lo) | ~np.isfinite(hi) | (lo > hi)
    return np.where(bad, nominal, lo), np.where(bad, nominal, hi)


def _run_iprem(cfg, model, records, seed, jobs):
    opts = cfg.method.iprem
    if model.output_kind != TIME_SERIES:
        raise ValidationError("IPREM needs a time-series model", field="model.kind")
    nominal = model.nominal.values
    grids = {i: iprem.default_grid(opts.lo[i], opts.hi[i], nominal[i], opts.n_grid)
             for i in range(model.n_params)}
    results = [iprem.iprem_quantify(model, rec, grids, opts.weights, opts.eta, opts.m)
               for rec in records]
    combined = iprem.combine_ranges(results)
    lo, hi = _iprem_box(results, nominal, opts.eta)
    out = {"per_test": [r.to_dict() for r in results],
           "combined": {str(i): c for i, c in combined.items()},
           "ranges": {"lo": lo, "hi": hi}}
    return out, fuq_mod.UniformRanges(lo, hi)


def _run_dipe(cfg, model, records, seed, jobs):
    opts = cfg.method.dipe
    grid = np.linspace(opts.lo, opts.hi, opts.n_grid)
    curve = dipe.dipe_pseudo_cdf(model, records, grid, opts.parameter)
    lo_b, hi_b = dipe.dipe_bounds(curve)
    lo, hi = model.nominal.values.copy(), model.nominal.values.copy()
    lo[opts.parameter], hi[opts.parameter] = lo_b, hi_b
    out = {"curve": curve.to_dict(), "bounds": [lo_b, hi_b],
           "flip_fraction": dipe.flip_diagnostic(model, records, model.nominal.values)}
    return out, fuq_mod.UniformRanges(lo, hi)


def _run_mcda(cfg, model, records, seed, jobs):
    opts = cfg.method.mcda
    tp = model.nominal.values if opts.prior_mean is None else np.asarray(opts.prior_mean)
    cov = np.diag(np.asarray(opts.prior_sd, dtype=float)**2)
    post = mcda.mcda(model, records, tp, cov, opts.alpha,
                     McmcConfig(length=opts.chain_length, seed=seed), opts.n_probe, seed)
    out = post.to_dict()
    if post.route == "deterministic":
        return out, fuq_mod.MvnSource(post.theta_post, post.cov_theta_post)
    return out, post.chain


def _run_mba(cfg, model, records, seed, jobs):
    opts = cfg.method.mba
    prior = mba.PriorSpec([(p.kind, p.a, p.b) for p in opts.prior], model.param_labels)
    res = mba.mba_iuq(model, records, prior, mba.MbaOptions(
        use_surrogate=opts.use_surrogate, use_bias=opts.use_bias,
        mcmc=McmcConfig(length=opts.chain_length, burn_in=opts.burn_in, seed=seed),
        split_fraction=opts.split_fraction, n_surrogate=opts.n_surrogate, seed=seed))
    return res.to_dict(), res.chain


def _run_sample_adjust(cfg, model, records, seed, jobs):
    o = cfg.method.sample_adjust
    res = fuq_mod.sample_adjust_iuq(model, records, o.lo, o.hi, o.n_samples, o.max_rounds,
                                    o.target, o.expansion, seed, jobs)
    return res.to_dict(), fuq_mod.UniformRanges(res.lo, res.hi)


METHOD_RUNNERS = {
    "circe": _run_circe, "circe-bias": _run_circe_bias, "mle-map": _run_mle_map,
    "iprem": _run_iprem, "dipe": _run_dipe, "mcda": _run_mcda, "mba": _run_mba,
    "sample-adjust": _run_sample_adjust,
}


def set_method(cfg, name):
    """Switch the configured method, re-validating the option tables."""
    from .config import parse_config
    data = cfg.model_dump(mode="json")
    data["method"]["name"] = name
    return parse_config(data)


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

class Scenario:
    """A validated config bound to a seed, output directory and worker count."""

    def __init__(self, cfg, seed=None, out_dir=None, jobs=1):
        self.cfg = cfg
        self.seed = cfg.scenario.seed if seed is None else int(seed)
        self.out = Path(out_dir or cfg.output.dir)
        self.jobs = jobs
        self.model = build_model(cfg.model)
        self._records = None

    @property
    def config_hash(self):
        return self.cfg.config_hash()

    @property
    def records(self):
        # regenerated from (config, seed) on demand; cheap and never stale
        if self._records is None:
            self._records = obtain_experiments(self.cfg, self.model, self.seed)
        return self._records

    def generation(self):
        return {"scenario": self.cfg.scenario.name, "model": self.cfg.model.kind,
                "method": self.cfg.method.name, "n_experiments": len(self.records),
                "truth": self.cfg.truth.model_dump(mode="json"),
                "noise_sd": list(self.cfg.experiments.noise_sd)}

    def _stamp(self, payload):
        payload.update(config_hash=self.config_hash, seed=self.seed)
        return payload

    def generate(self):
        self.out.mkdir(parents=True, exist_ok=True)
        records = obtain_experiments(self.cfg, self.model, self.seed)
        self._records = records
        write_experiments(self.out / EXPERIMENTS_NAME, records)
        return records

    def iuq(self):
        name = self.cfg.method.name
        result, source = METHOD_RUNNERS[name](self.cfg, self.model, self.records, self.seed,
                                              self.jobs)
        payload = self._stamp({"method": name, "result": result,
                               "source": source_to_dict(source)})
        self.out.mkdir(parents=True, exist_ok=True)
        write_json(self.out / IUQ_NAME, payload)
        return payload

    def _load(self, name, producer):
        path = self.out / name
        if path.exists():
            data = load_json(path)
            if data.get("config_hash") == self.config_hash and data.get("seed") == self.seed:
                return data
        return producer()

    def fuq(self):
        iuq = self._load(IUQ_NAME, self.iuq)
        source = source_from_dict(iuq["source"])
        bands = fuq_mod.forward_uq(self.model, source, self.records, self.cfg.fuq.n_samples,
                                   self.seed, self.jobs)
        payload = self._stamp({"bands": bands.to_dict()})
        write_json(self.out / BANDS_JSON, payload)
        return payload

    def envelope(self):
        bands = fuq_mod.Bands.from_dict(self._load(BANDS_JSON, self.fuq)["bands"])
        env = fuq_mod.envelope_check(bands, self.records, self.cfg.fuq.target)
        payload = self._stamp({"envelope": env.to_dict()})
        write_json(self.out / ENVELOPE_NAME, payload)
        return payload

    def report(self, stages=True):
        """Assemble the report from whatever stage artifacts exist (or run them)."""
        methods, fuq_info, env, bands = {}, None, None, None
        if stages:
            iuq = self._load(IUQ_NAME, self.iuq)
            methods[iuq["method"]] = iuq["result"]
            bdict = self._load(BANDS_JSON, self.fuq)["bands"]
            bands = fuq_mod.Bands.from_dict(bdict)
            fuq_info = {"n_samples": self.cfg.fuq.n_samples, "n_used": bdict["n_used"],
                        "n_failed": bdict["n_failed"]}
            env = self._load(ENVELOPE_NAME, self.envelope)["envelope"]
        report = build_report(self.config_hash, self.seed, self.generation(), methods, fuq_info,
                              env)
        emit_report(self.out, report, bands, self.records if bands is not None else None)
        return report


def run_scenario(cfg, seed=None, out_dir=None, jobs=1):
    """Execute every stage afresh and write all artifacts; returns the report."""
    sc = Scenario(cfg, seed, out_dir, jobs)
    sc.generate()
    sc.iuq()
    sc.fuq()
    sc.envelope()
    return sc.report()
