import json
from pathlib import Path

import numpy as np
import pytest

from iuqlab.errors import ModelFailure, ValidationError
from iuqlab.models import (DesignPoint, ModelSpec, affine_model, evaluate_model,
                           exponential_model, finite_difference_sensitivity,
                           generate_synthetic_experiments, jacobian_fd, reflood_model,
                           reflood_trajectory)
from iuqlab.stats import GaussianParamSpec

GOLDEN = Path(__file__).parent / "data" / "reflood_golden.json"


def test_zero_noise_zero_variance_reproduces_model():
    m = affine_model([[1.0, 2.0], [0.5, -1.0]])
    recs = generate_synthetic_experiments(m, GaussianParamSpec([0.2, -0.1], [0.0, 0.0]),
                                          [[0.0]] * 3, 0.0, seed=1)
    for r in recs:
        assert np.allclose(r.observed.values, [0.0, 0.2])


def test_generation_reproducible():
    m = exponential_model()
    truth = GaussianParamSpec([0.1, 0.0], [0.01, 0.01])
    a = generate_synthetic_experiments(m, truth, [[0.5], [1.0]], 0.1, seed=9)
    b = generate_synthetic_experiments(m, truth, [[0.5], [1.0]], 0.1, seed=9)
    assert all(np.array_equal(x.observed.values, y.observed.values) for x, y in zip(a, b))


def test_zero_designs_is_empty():
    assert generate_synthetic_experiments(exponential_model(), GaussianParamSpec([0, 0], [0, 0]),
                                          [], 0.1, seed=0) == []


@pytest.mark.parametrize("n", [1000, 10_000])
def test_residual_variance_addition(n):
    s = 2.5
    m = affine_model([[s]])
    recs = generate_synthetic_experiments(m, GaussianParamSpec([0.0], [0.04]), [[0.0]] * n, 0.01,
                                          seed=4)
    d = np.array([r.observed.values[0] for r in recs])
    expected = s**2 * 0.04 + 1e-4
    tol = 0.10 if n == 1000 else 0.05
    assert d.var(ddof=1) == pytest.approx(expected, rel=tol)
    assert abs(d.mean()) < 4 * np.sqrt(expected / n)


def test_fd_exact_for_linear():
    S = np.array([[1.0, -2.0, 0.5], [3.0, 0.0, 1e3]])
    m = affine_model(S)
    sens = finite_difference_sensitivity(m, [0.0], np.array([0.3, -1.2, 4.0]))
    assert np.allclose(sens.entries, S, rtol=1e-9, atol=0)


def test_fd_exp_derivative():
    J, _ = jacobian_fd(np.exp, [0.0], 1e-4)
    assert J[0, 0] == pytest.approx(1.0, abs=1e-7)


def test_fd_reflood_richardson_consistency():
    m = reflood_model()
    x = DesignPoint([900.0, 0.02])
    theta = np.array([1.0, 1.0])
    h = m.rel_step
    f = lambda t: evaluate_model(m, x, t).flat  # noqa: E731
    central = finite_difference_sensitivity(m, x, theta).entries
    y0 = f(theta)
    for i in range(2):
        e = np.zeros(2)
        e[i] = 1.0
        one_h = (f(theta + h * e) - y0) / h
        one_h2 = (f(theta + 0.5 * h * e) - y0) / (0.5 * h)
        richardson = 2.0 * one_h2 - one_h        # cancels the O(h) term
        scale = np.max(np.abs(central[:, i]))
        # one-sided error is O(h); central and the extrapolated estimate agree much closer
        assert np.max(np.abs(one_h2 - central[:, i])) < 0.05 * scale
        assert np.max(np.abs(richardson - central[:, i])) < np.max(
            np.abs(one_h2 - central[:, i])) + 1e-12


def test_fd_failure_names_parameter():
    def f(x, theta):
        if theta[1] > 1.0:
            raise RuntimeError("solver blew up")
        return theta

    m = ModelSpec(f, [1.0, 1.0])
    with pytest.raises(ModelFailure) as exc:
        finite_difference_sensitivity(m, [0.0], [1.0, 1.0])
    assert exc.value.parameter == 1
    with pytest.raises(ValidationError):
        finite_difference_sensitivity(m, [0.0], [1.0, 1.0], rel_step=0.0)


def test_non_finite_output_is_model_failure():
    m = ModelSpec(lambda x, t: np.array([np.nan]), [1.0])
    with pytest.raises(ModelFailure):
        evaluate_model(m, [0.0], [1.0])


def test_dimension_checks():
    m = affine_model([[1.0]], B=[[1.0]])
    with pytest.raises(ValidationError):
        evaluate_model(m, [0.0, 1.0], [0.0])
    with pytest.raises(ValidationError):
        evaluate_model(m, [0.0], [0.0, 1.0])


def test_reflood_matches_golden_trace():
    golden = json.loads(GOLDEN.read_text())
    for case in golden["cases"]:
        times, traces = reflood_trajectory(case["x"], case["theta"])
        assert np.allclose(times, golden["times"])
        assert np.max(np.abs(traces - np.array(case["traces"]))) < 1e-5


def test_reflood_is_pure():
    m = reflood_model()
    a = evaluate_model(m, [900.0, 0.02], [1.1, 0.9]).values
    b = evaluate_model(m, [900.0, 0.02], [1.1, 0.9]).values
    assert np.array_equal(a, b)


def test_reflood_physical_behaviour():
    _, y = reflood_trajectory([900.0, 0.02], [1.0, 1.0])
    assert y[0, -1] < 400.0                    # lower elevation quenched by the end
    assert np.argmax(y[0] < 400.0) < np.argmax(y[1] < 400.0)   # quench order bottom first
    _, fast = reflood_trajectory([900.0, 0.02], [1.0, 1.5])
    assert np.argmax(fast[1] < 400.0) < np.argmax(y[1] < 400.0)
