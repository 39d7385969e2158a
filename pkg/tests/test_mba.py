import numpy as np
import pytest
from scipy.optimize import minimize

from conftest import records_from
from iuqlab.errors import SurrogateError, ValidationError
from iuqlab.mba import (LogPosterior, MbaOptions, PriorSpec, build_log_posterior,
                        conjugate_posterior, fit_surrogates, mba_iuq, train_bias_gp)
from iuqlab.mcmc import McmcConfig
from iuqlab.models import CalibrationVector, ModelSpec, affine_model, exponential_model

LOG_2PI = np.log(2 * np.pi)


def linear_setup(n=6, seed=0, noise_var=0.04):
    """y_k = t0 + t1 * x_k; one scalar QoI per experiment."""
    m = ModelSpec(lambda x, t: np.atleast_1d(t[0] + t[1] * x[0]), CalibrationVector([0.0, 0.0]))
    xs = np.linspace(0, 1, n)
    truth = np.array([0.5, -1.0])
    rng = np.random.default_rng(seed)
    y = truth[0] + truth[1] * xs + np.sqrt(noise_var) * rng.standard_normal(n)
    recs = records_from(y[:, None], noise_var, [[x] for x in xs])
    S = np.column_stack([np.ones(n), xs])
    return m, recs, S, y, truth


def test_zero_residual_log_likelihood():
    m = affine_model(np.eye(3))
    theta = np.array([0.2, -0.1, 0.4])
    recs = records_from([m.evaluator(None, theta)], 1.0)
    lp = build_log_posterior(PriorSpec.normal([0, 0, 0], [1, 1, 1]), recs, m)
    assert lp.log_likelihood(theta) == pytest.approx(-1.5 * LOG_2PI, abs=1e-14)


def test_flat_prior_ratio_is_likelihood_ratio():
    m, recs, *_ = linear_setup()
    lp = build_log_posterior(PriorSpec.uniform([-5, -5], [5, 5]), recs, m)
    a, b = np.array([0.3, -0.8]), np.array([1.0, 0.2])
    assert lp(a) - lp(b) == pytest.approx(lp.log_likelihood(a) - lp.log_likelihood(b), abs=1e-12)


def test_map_matches_conjugate_mode():
    m, recs, S, y, _ = linear_setup()
    prior = PriorSpec.normal([0.0, 0.0], [2.0, 0.5])
    lp = build_log_posterior(prior, recs, m)
    mean, _ = conjugate_posterior(S, 0.0, y, np.full(y.size, 0.04), [0.0, 0.0], [2.0, 0.5])
    res = minimize(lambda t: -lp(t), [0.0, 0.0], method="BFGS", options={"gtol": 1e-12})
    assert np.allclose(res.x, mean, atol=1e-6)


def test_uniform_support_is_minus_infinity():
    m, recs, *_ = linear_setup()
    lp = build_log_posterior(PriorSpec.uniform([0, 0], [1, 1]), recs, m)
    assert lp([1.5, 0.5]) == -np.inf


def test_likelihood_parts_are_zero_when_disabled():
    m, recs, *_ = linear_setup()
    lp = build_log_posterior(PriorSpec.normal([0, 0], [1, 1]), recs, m)
    parts = lp.parts(np.array([0.1, 0.2]))
    assert np.all(parts.var_code == 0.0) and np.all(parts.var_bias == 0.0)
    assert np.all(parts.delta == 0.0)
    assert np.allclose(parts.total, 0.04)


def test_posterior_bounded_under_uniform_prior():
    m, recs, *_ = linear_setup()
    prior = PriorSpec.uniform([-3, -3], [3, 3])
    lp = build_log_posterior(prior, recs, m)
    best = -minimize(lambda t: -lp(t), [0.0, 0.0], method="Nelder-Mead").fun
    T = np.random.default_rng(0).uniform(-3, 3, (1000, 2))
    vals = np.array([lp(t) for t in T])
    assert np.all(np.isfinite(vals)) and vals.max() <= best + 1e-9


# ---- bias GP ---------------------------------------------------------------

def bias_records(n, delta, noise_var=0.0, seed=0):
    xs = np.linspace(0, 6, n)
    rng = np.random.default_rng(seed)
    y = 1.0 + 0.5 * xs + delta(xs) + np.sqrt(noise_var) * rng.standard_normal(n)
    m = ModelSpec(lambda x, t: np.atleast_1d(t[0] + t[1] * x[0]), CalibrationVector([1.0, 0.5]))
    return m, records_from(y[:, None], noise_var, [[x] for x in xs])


def test_bias_zero_when_model_is_exact():
    m, recs = bias_records(10, lambda x: 0.0 * x)
    bias, _, _ = train_bias_gp(m, recs, [1.0, 0.5])
    grid = np.linspace(0, 6, 50)
    assert max(abs(bias.predict([g])[0][0]) for g in grid) < 1e-6


def test_bias_recovers_injected_sine():
    m, recs = bias_records(40, lambda x: 0.1 * np.sin(x), noise_var=1e-6)
    bias, _, held = train_bias_gp(m, recs, [1.0, 0.5])
    xs = np.array([r.design.values[0] for r in held])
    pred = np.array([bias.predict([x])[0][0] for x in xs])
    truth = 0.1 * np.sin(xs)
    assert np.sqrt(np.mean((pred - truth)**2)) <= 0.2 * np.sqrt(np.mean(truth**2))


def test_bias_split_bookkeeping():
    m, recs = bias_records(10, lambda x: 0.05 * x)
    _, train, held = train_bias_gp(m, recs, [1.0, 0.5], split_fraction=0.8)
    assert len(train) == 8 and len(held) == 2
    assert not {r.label for r in train} & {r.label for r in held}


def test_bias_needs_enough_experiments():
    m, recs = bias_records(5, lambda x: 0.0 * x)
    with pytest.raises(ValidationError, match="disable"):
        train_bias_gp(m, recs, [1.0, 0.5])
    m, recs = bias_records(10, lambda x: 0.0 * x)
    with pytest.raises(ValidationError):
        train_bias_gp(m, recs, [1.0, 0.5], split_fraction=0.97)


def test_bias_enters_likelihood():
    m, recs = bias_records(12, lambda x: 0.1 * np.sin(x), noise_var=1e-4)
    bias, _, held = train_bias_gp(m, recs, [1.0, 0.5])
    lp = LogPosterior(PriorSpec.normal([1, 0.5], [1, 1]), held, m, bias)
    parts = lp.parts(np.array([1.0, 0.5]))
    assert np.all(parts.var_bias > 0) and np.any(parts.delta != 0)


# ---- full pipeline ---------------------------------------------------------

def test_mba_matches_conjugate_posterior():
    m, recs, S, y, _ = linear_setup(n=8)
    prior = PriorSpec.normal([0.0, 0.0], [2.0, 2.0])
    res = mba_iuq(m, recs, prior, MbaOptions(mcmc=McmcConfig(length=20_000, seed=3)))
    mean, cov = conjugate_posterior(S, 0.0, y, np.full(8, 0.04), [0, 0], [2, 2])
    assert np.all(np.abs(res.mean - mean) <= 3 * res.chain.mcse)
    assert np.allclose(res.sd, np.sqrt(np.diag(cov)), rtol=0.1)
    assert np.all(res.ci95[:, 0] < res.ci95[:, 1])
    assert np.all(np.abs(res.correlation) <= 1.0)


def test_support_excluding_truth_concentrates_at_boundary():
    m, recs, *_ = linear_setup()
    prior = PriorSpec.uniform([-2.0, -0.5], [2.0, 2.0])     # truth slope -1 is outside
    res = mba_iuq(m, recs, prior, MbaOptions(mcmc=McmcConfig(length=10_000, seed=4)))
    assert res.chain.samples[:, 1].min() >= -0.5
    assert res.mean[1] < -0.4
    assert np.all(np.isfinite(res.sensitivity))


def test_surrogate_path():
    m = exponential_model()
    xs = np.linspace(0, 1, 5)
    y = 1.2 * np.exp(0.8 * xs)
    recs = records_from(y[None, :], 1e-3, [xs])
    prior = PriorSpec.uniform([0.5, 0.0], [2.0, 1.5])
    res = mba_iuq(m, recs, prior, MbaOptions(use_surrogate=True, n_surrogate=40,
                                             mcmc=McmcConfig(length=10_000, seed=5)))
    full = mba_iuq(m, recs, prior, MbaOptions(mcmc=McmcConfig(length=10_000, seed=5)))
    assert np.allclose(res.mean, full.mean, atol=0.1)
    sur = fit_surrogates(m, recs, prior, 40)
    lp = build_log_posterior(prior, recs, sur)
    assert np.all(lp.parts(np.array([1.2, 0.8])).var_code >= 0)
    assert np.all(sur.validation_rmse <= 0.1 * sur.ranges)


def test_poor_surrogate_aborts():
    m = ModelSpec(lambda x, t: np.atleast_1d(np.sin(40 * t[0]) * np.cos(35 * t[1])),
                  CalibrationVector([0.0, 0.0]))
    recs = records_from([[0.0]], 0.01)
    with pytest.raises(SurrogateError, match="increase"):
        fit_surrogates(m, recs, PriorSpec.uniform([0, 0], [1, 1]))


def test_prior_validation():
    with pytest.raises(ValidationError):
        PriorSpec.uniform([1.0], [0.0])
    with pytest.raises(ValidationError):
        PriorSpec.normal([0.0], [0.0])
    with pytest.raises(ValidationError):
        PriorSpec([("cauchy", 0, 1)])
    m, recs, *_ = linear_setup()
    with pytest.raises(ValidationError):
        mba_iuq(m, recs, PriorSpec.normal([0.0], [1.0]))
