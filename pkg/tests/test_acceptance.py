"""Acceptance criteria, one test each.

Every test prints a single ``[acceptance NN] PASS|FAIL ...`` line (shown even
with output capture on) before asserting.
"""

import importlib.resources
import time
import warnings

import numpy as np
import pytest
from scipy.optimize import minimize

from conftest import records_from
from iuqlab.circe import (CirceInputs, CirceWarning, blocks_from_circe_inputs, circe_no_bias,
                          circe_with_bias, mle_map_estimate)
from iuqlab.dipe import CoverageCurve, dipe_bounds, dipe_pseudo_cdf
from iuqlab.errors import ValidationError
from iuqlab.gp import gp_fit
from iuqlab.harness import cli
from iuqlab.harness.fuq import sample_adjust_iuq
from iuqlab.iprem import TimeSeriesSignal, average_amplitude, cr_bounds, criterion_CR
from iuqlab.mba import MbaOptions, PriorSpec, conjugate_posterior, mba_iuq
from iuqlab.mcda import mcda_cost, mcda_deterministic
from iuqlab.mcmc import McmcConfig
from iuqlab.models import (CalibrationVector, DesignPoint, ExperimentRecord, ModelSpec,
                           QoIVector, exponential_model)

BUNDLED = importlib.resources.files("iuqlab") / "scenarios" / "affine-circe.toml"


@pytest.fixture
def verdict(capsys):
    def report(n, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance {n:02d}] {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail
    return report


# 1 -------------------------------------------------------------------------

def test_01_circe_matches_grid_search(verdict):
    rng = np.random.default_rng(101)
    J = 200
    s = rng.uniform(0.5, 2.0, J)
    d = s * (0.3 + 0.2 * rng.standard_normal(J)) + 0.05 * rng.standard_normal(J)
    e2 = np.full(J, 0.05**2)
    t0 = time.perf_counter()
    est = circe_with_bias(CirceInputs(d, s[:, None], e2, estimate_bias=True, tol=1e-12))
    elapsed = time.perf_counter() - t0
    # independent oracle: marginal log-likelihood on a dense (b, var) grid
    bs = np.linspace(0.0, 0.6, 601)
    vs = np.linspace(1e-4, 0.1, 1000)
    X = e2[None, :] + vs[:, None] * s[None, :]**2                    # (V, J)
    best, arg = -np.inf, None
    for b in bs:
        r2 = (d - b * s)**2
        ll = -0.5 * np.sum(np.log(2 * np.pi * X) + r2[None, :] / X, axis=1)
        k = int(np.argmax(ll))
        if ll[k] > best:
            best, arg = ll[k], (b, vs[k])
    db, dv = abs(est.b[0] - arg[0]), abs(est.var[0] - arg[1])
    ok = db <= 1e-2 and dv <= 5e-3 and elapsed < 5.0
    verdict(1, ok, f"|db|={db:.2e} |dvar|={dv:.2e} runtime={elapsed:.3f}s")


# 2 -------------------------------------------------------------------------

def test_02_em_monotone(verdict):
    worst, violations = 0.0, 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CirceWarning)
        for k in range(50):
            rng = np.random.default_rng(2000 + k)
            J, I = int(rng.integers(8, 60)), int(rng.integers(1, 4))
            S = rng.normal(size=(J, I))
            d = S @ rng.normal(size=I) * rng.uniform(0.2, 2) + rng.normal(size=J) * 0.3
            inp = CirceInputs(d, S, rng.uniform(0.001, 0.1, J), estimate_bias=bool(k % 2),
                              tol=1e-10, max_iter=5000)
            est = circe_with_bias(inp) if k % 2 else circe_no_bias(inp)
            drop = -np.min(np.diff(est.loglik_trace), initial=0.0)
            worst = max(worst, drop)
            violations += drop > 1e-8
    verdict(2, violations == 0, f"violations={violations}/50 worst_drop={worst:.2e}")


# 3 -------------------------------------------------------------------------

def test_03_mle_map_matches_circe(verdict):
    rng = np.random.default_rng(303)
    J = 200
    S = rng.normal(size=(J, 2))
    theta = np.array([0.3, -0.1]) + 0.2 * rng.standard_normal((J, 2))
    d = np.sum(S * theta, axis=1) + 0.05 * rng.standard_normal(J)
    inp = CirceInputs(d, S, 0.0025, estimate_bias=True, tol=1e-13, max_iter=100_000)
    c = circe_with_bias(inp)
    m = mle_map_estimate(blocks_from_circe_inputs(inp), tol=1e-13, max_iter=100_000)
    gap = max(np.abs(m.b - c.b).max(), np.abs(m.var - c.var).max())
    verdict(3, gap <= 1e-6, f"max |MLE - CIRCE| = {gap:.2e}")


# 4 -------------------------------------------------------------------------

def test_04_iprem_threshold_and_aa_identities(verdict):
    cr = criterion_CR(0.1, 0.1, 0.0)
    rng = np.random.default_rng(404)
    t = np.linspace(0, 1, 64)
    bad = 0
    for _ in range(100):
        a = 100.0 + rng.normal(size=64).cumsum()
        b = a + rng.normal(size=64) * rng.uniform(0.1, 5)
        k = 10 ** rng.uniform(-3, 3)
        ea, eb = TimeSeriesSignal(t, a), TimeSeriesSignal(t, b)
        zero = average_amplitude(ea, ea, 6).AA == 0.0
        unity = abs(average_amplitude(ea, TimeSeriesSignal(t, 2 * a), 6).AA - 1.0) < 1e-12
        base = average_amplitude(ea, eb, 6).AA
        scaled = average_amplitude(TimeSeriesSignal(t, k * a), TimeSeriesSignal(t, k * b), 6).AA
        bad += not (zero and unity and abs(scaled - base) <= 1e-9 * max(base, 1e-300))
    ok = abs(cr - 0.2222) <= 1e-4 and bad == 0
    verdict(4, ok, f"CR(AAG=0.1)={cr:.6f} identity failures={bad}/100")


# 5 -------------------------------------------------------------------------

def test_05_iprem_case_statuses(verdict):
    g = np.linspace(0.0, 3.0, 31)
    nominal = 1.0
    profiles = {
        "A": (np.abs(g - nominal), "both-bounds"),
        "B": (np.where(g > nominal, g - nominal, 0.0), "upper-only"),
        "C": (np.where(g < nominal, nominal - g, 0.0), "lower-only"),
        "D-insensitive": (0.02 + 0.01 * np.abs(g - nominal), "none"),
        "D-above": (0.5 + 0.1 * np.abs(g - nominal), "none"),
    }
    got = {k: cr_bounds(g, cr, nominal, 0.22).status for k, (cr, _) in profiles.items()}
    ok = all(got[k] == want for k, (_, want) in profiles.items())
    verdict(5, ok, " ".join(f"{k}={v}" for k, v in got.items()))


# 6 -------------------------------------------------------------------------

def test_06_dipe_recovery_and_guard(verdict):
    rng = np.random.default_rng(606)
    n = 20_000
    x = rng.uniform(0, 2, n)
    theta = 1.0 + 0.1 * rng.standard_normal(n)
    rec = ExperimentRecord(DesignPoint(x, name="e0"), QoIVector(theta * (1 + x)), 0.0, label="e0")
    model = ModelSpec(lambda xx, t: t[0] * (1.0 + xx), [1.0])
    grid = np.linspace(0.6, 1.4, 161)
    lo, hi = dipe_bounds(dipe_pseudo_cdf(model, [rec], grid))
    q_lo, q_hi = np.quantile(rec.observed.values / (1 + x), [0.025, 0.975])
    cell = grid[1] - grid[0]
    th = np.linspace(0, 1, 21)
    wavy = CoverageCurve.from_values(th, np.clip(0.5 + 0.4 * np.sin(2 * np.pi * th), 0, 1))
    try:
        dipe_bounds(wavy)
        refused = False
    except ValidationError:
        refused = True
    ok = abs(lo - q_lo) <= cell and abs(hi - q_hi) <= cell and refused
    verdict(6, ok, f"lo err={abs(lo - q_lo) / cell:.2f} cells, hi err={abs(hi - q_hi) / cell:.2f} "
                   f"cells, non-monotone refused={refused}")


# 7 -------------------------------------------------------------------------

def _mcda_problem(seed, J=6, I=3):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((I, I))
    return (rng.standard_normal((J, I)), A @ A.T + 0.5 * np.eye(I),
            np.diag(rng.uniform(0.1, 1.0, J)), rng.standard_normal(J), rng.standard_normal(I))


def test_07_mcda_limits(verdict):
    S, Sp, Se, d, tp = _mcda_problem(700, J=3, I=3)
    exact = tp + np.linalg.solve(S, d)
    e0 = max(np.abs(mcda_deterministic(d, S, Sp, Se, a, tp).theta_post - exact).max()
             for a in (0.0, 1e-10))
    e_big = np.abs(mcda_deterministic(d, S, Sp, Se, 1e6, tp).theta_post - tp).max()
    worst = 0.0
    for k in range(20):
        S, Sp, Se, d, tp = _mcda_problem(710 + k)
        alpha = 10 ** np.random.default_rng(k).uniform(-1, 1)
        post = mcda_deterministic(d, S, Sp, Se, alpha, tp)
        res = minimize(mcda_cost, tp, args=(d, S, Sp, Se, alpha, tp), method="Nelder-Mead",
                       options={"xatol": 1e-11, "fatol": 1e-15, "maxiter": 40_000,
                                "maxfev": 40_000})
        worst = max(worst, np.abs(post.theta_post - res.x).max())
    ok = e0 <= 1e-8 and e_big <= 1e-4 and worst <= 1e-6
    verdict(7, ok, f"alpha->0 err={e0:.1e} alpha=1e6 err={e_big:.1e} "
                   f"optimizer gap (20 problems)={worst:.1e}")


# 8 -------------------------------------------------------------------------

def test_08_mba_conjugate(verdict):
    rng = np.random.default_rng(808)
    xs = np.linspace(0, 1, 10)
    model = ModelSpec(lambda x, t: t[0] + t[1] * x, CalibrationVector([0.0, 0.0]))
    y = 0.4 - 0.8 * xs + 0.1 * rng.standard_normal(10)
    rec = records_from(y[None, :], 0.01, [xs])
    prior = PriorSpec.normal([0.0, 0.0], [1.0, 1.0])
    t0 = time.perf_counter()
    res = mba_iuq(model, rec, prior, MbaOptions(mcmc=McmcConfig(length=20_000, seed=8)))
    elapsed = time.perf_counter() - t0
    S = np.column_stack([np.ones(10), xs])
    mean, cov = conjugate_posterior(S, 0.0, y, np.full(10, 0.01), [0, 0], [1, 1])
    z = np.abs(res.mean - mean) / res.chain.mcse
    cov_err = np.linalg.norm(res.chain.cov - cov) / np.linalg.norm(cov)
    var_err = np.abs(np.diag(res.chain.cov) / np.diag(cov) - 1).max()
    ok = np.all(z <= 3) and cov_err <= 0.1 and var_err <= 0.1 and elapsed < 60
    verdict(8, ok, f"mean |z|={np.round(z, 2).tolist()} cov rel err={cov_err:.3f} "
                   f"var rel err={var_err:.3f} runtime={elapsed:.1f}s")


# 9 -------------------------------------------------------------------------

def test_09_credible_interval_coverage(verdict):
    model = exponential_model()
    xs = np.linspace(0, 1, 10)
    truth = np.array([1.3, 0.7])
    prior = PriorSpec.uniform([0.5, 0.0], [2.5, 1.5])
    hits = np.zeros(2)
    R = 50
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for r in range(R):
            rng = np.random.default_rng(9000 + r)
            y = truth[0] * np.exp(truth[1] * xs) + 0.02 * rng.standard_normal(10)
            rec = records_from(y[None, :], 0.02**2, [xs])
            res = mba_iuq(model, rec, prior,
                          MbaOptions(mcmc=McmcConfig(length=10_000, seed=r), seed=r))
            hits += (res.ci95[:, 0] <= truth) & (truth <= res.ci95[:, 1])
    frac = hits / R
    verdict(9, bool(np.all(frac >= 0.9)), f"coverage per parameter={frac.tolist()} over {R} replicates")


# 10 ------------------------------------------------------------------------

def test_10_gp_interpolation(verdict):
    rng = np.random.default_rng(1010)
    X = rng.uniform(-1, 1, (12, 2))
    y = np.exp(X[:, 0]) * np.cos(2 * X[:, 1]) + 10.0
    gp = gp_fit(X, y)
    mean, var = gp.predict(X)
    rel = np.max(np.abs(mean - y) / np.abs(y))
    var_ok = np.all(var <= 10 * gp.nugget_variance)
    xs = np.linspace(0, 2 * np.pi, 15)
    sine = gp_fit(xs, np.sin(xs))
    xt = np.linspace(0, 2 * np.pi, 1000)
    rmse = np.sqrt(np.mean((sine.predict(xt[:, None])[0] - np.sin(xt))**2))
    ok = rel <= 1e-6 and var_ok and rmse < 0.05
    verdict(10, ok, f"train rel err={rel:.1e} var<=10*nugget={bool(var_ok)} sine RMSE={rmse:.4f}")


# 11 ------------------------------------------------------------------------

def test_11_bias_term_widens_posterior(verdict):
    model = ModelSpec(lambda x, t: np.atleast_1d(t[0] + t[1] * x[0]), CalibrationVector([1.0, 0.5]))
    xs = np.linspace(0, 6, 16)
    prior = PriorSpec.normal([1.0, 0.5], [1.0, 1.0])
    sd_off, sd_on = [], []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for r in range(20):
            rng = np.random.default_rng(1100 + r)
            y = 1.0 + 0.5 * xs + 0.1 * np.sin(xs) + 0.01 * rng.standard_normal(xs.size)
            recs = records_from(y[:, None], 1e-4, [[x] for x in xs])
            cfg = McmcConfig(length=5000, seed=r)
            sd_off.append(mba_iuq(model, recs, prior, MbaOptions(mcmc=cfg, seed=r)).sd)
            sd_on.append(mba_iuq(model, recs, prior,
                                 MbaOptions(mcmc=cfg, use_bias=True, seed=r)).sd)
    off, on = np.mean(sd_off, axis=0), np.mean(sd_on, axis=0)
    verdict(11, bool(np.all(on >= off)),
            f"mean posterior sd without bias={np.round(off, 5).tolist()} "
            f"with bias={np.round(on, 5).tolist()}")


# 12 ------------------------------------------------------------------------

def _minimal_enveloping_range(model, recs, grid):
    """Dense brute-force scan: narrowest [grid_i, grid_j] whose runs envelop all data."""
    Y = np.array([[model.evaluator(r.design.values, [g])[0] for r in recs] for g in grid])
    y = np.array([r.observed.values[0] for r in recs])
    best = None
    for i in range(grid.size):
        lo, hi = Y[i].copy(), Y[i].copy()
        for j in range(i, grid.size):
            lo, hi = np.minimum(lo, Y[j]), np.maximum(hi, Y[j])
            if np.all((y >= lo) & (y <= hi)):
                if best is None or grid[j] - grid[i] < best[1] - best[0]:
                    best = (grid[i], grid[j])
                break
    return best


def test_12_sample_adjust_optimality_gap(verdict):
    model = ModelSpec(lambda x, t: np.atleast_1d(t[0] * x[0] + 0.3 * t[0]**2),
                      CalibrationVector([1.0]))
    grid = np.linspace(0.0, 3.0, 601)
    expansion = 1.25
    worst, failures = 0.0, 0
    for seed in range(6):
        rng = np.random.default_rng(seed)
        xs = np.linspace(0.5, 2.0, 12)
        th = rng.uniform(0.6, 1.6, 12)
        recs = records_from((th * xs + 0.3 * th**2)[:, None], 1e-6, [[x] for x in xs])
        lo, hi = _minimal_enveloping_range(model, recs, grid)
        for init in ((0.95, 1.05), (1.0, 1.2), (0.7, 0.8)):
            res = sample_adjust_iuq(model, recs, [init[0]], [init[1]], n_samples=125,
                                    max_rounds=20, expansion=expansion)
            ratio = (res.hi[0] - res.lo[0]) / (hi - lo)
            worst = max(worst, ratio)
            contains = res.lo[0] <= lo and res.hi[0] >= hi
            failures += not (res.converged and contains and ratio <= expansion**2)
    verdict(12, failures == 0, f"failures={failures}/18 worst width ratio={worst:.3f} "
                               f"(limit {expansion**2:.4f})")


# 13 ------------------------------------------------------------------------

MBA_SCENARIO = """
[scenario]
name = "exp-mba"
seed = 5
[model]
kind = "exponential"
[truth]
mean = [0.2, -0.1]
var = [0.01, 0.0025]
[experiments]
n_designs = 8
design_range = [[0.0, 1.0]]
noise_sd = [0.02]
[method]
name = "mba"
[method.mba]
prior = [{kind = "uniform", a = 0.2, b = 3.0}, {kind = "uniform", a = 0.0, b = 2.0}]
chain_length = 3000
[method.sample_adjust]
lo = [1.1, 0.8]
hi = [1.3, 1.0]
[fuq]
n_samples = 300
"""


def test_13_end_to_end_determinism(verdict, tmp_path):
    cfg2 = tmp_path / "mba.toml"
    cfg2.write_text(MBA_SCENARIO)
    runs = [(str(BUNDLED), None), (str(cfg2), None), (str(cfg2), "sample-adjust")]
    identical, codes = [], []
    for k, (cfg, method) in enumerate(runs):
        extra = ["--method", method] if method else []
        outs = [tmp_path / f"r{k}{tag}" for tag in "ab"]
        for out in outs:
            codes.append(cli.main(["run", "--config", cfg, "--out-dir", str(out), *extra]))
        identical.append(all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
                             for f in ("report.json", "bands.csv")))
    ok = all(c == 0 for c in codes) and all(identical)
    verdict(13, ok, f"exit codes={codes} byte-identical={identical}")
