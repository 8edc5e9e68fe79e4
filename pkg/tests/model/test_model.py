from efficient_vb.dataset import Dataset
from efficient_vb.exceptions import ConfigurationError, ParameterDomainError
from efficient_vb.model import eval_transition_logdensity, get_model, simulate
from efficient_vb.model.seasonal import build_seasonal_basis, natural_spline_basis
from efficient_vb.model.skellam import (
    SkellamParams,
    bessel_i_scaled,
    skellam_log_joint_grad,
    skellam_log_terms,
    skellam_pmf,
)
from efficient_vb.model.sv import SvModel, sv_log_joint_grad, sv_measurement_logdensity
from math import factorial
from scipy.stats import norm
import numpy as np
import pytest


def numerical_gradient(f, point, step=1e-5):
    point = np.asarray(point, dtype=float)
    grad = np.zeros(point.size)
    for i in range(point.size):
        up, down = point.copy(), point.copy()
        up.flat[i] += step
        down.flat[i] -= step
        grad[i] = (f(up) - f(down)) / (2.0 * step)
    return grad


def sv_problem():
    model = SvModel()
    rng = np.random.default_rng(7)
    x = -1.0 + 0.5 * rng.standard_normal((20, 1))
    data = Dataset.from_array(np.exp(0.5 * x[:, 0]) * rng.standard_normal(20))
    theta = np.array([-0.8, 1.5, np.log(0.09)])
    return model, data, x, theta


def test_sv_measurement_logdensity_at_zero():
    assert sv_measurement_logdensity(0.0, 0.0) == pytest.approx(-0.5 * np.log(2.0 * np.pi))


def test_sv_parameter_gradient_matches_finite_differences():
    model, data, x, theta = sv_problem()

    analytic = model.log_joint_grad(theta, x, data)
    numeric = numerical_gradient(lambda t: model.log_joint(t, x, data), theta)

    np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-6)


def test_sv_state_gradient_matches_finite_differences():
    model, data, x, theta = sv_problem()

    analytic = model.state_grad(theta, x, data)[:, 0]
    numeric = numerical_gradient(lambda v: model.log_joint(theta, v.reshape(-1, 1), data), x[:, 0])

    np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-6)


def test_sv_transform_inverts():
    model = SvModel()
    params = np.array([-1.3, 0.95, 0.3])

    np.testing.assert_allclose(model.inverse_transform(model.transform(params)), params)


def test_sv_transform_midpoint():
    theta = SvModel().transform(np.array([0.0, 0.4975, 1.0]))

    np.testing.assert_allclose(theta[1:], [0.0, 0.0], atol=1e-12)


def test_sv_gradient_without_observations_is_the_prior():
    grad = sv_log_joint_grad(np.array([2.0, 0.0, 0.0]), np.zeros(0), np.zeros(0))

    assert grad[0] == pytest.approx(-0.002)
    np.testing.assert_allclose(grad, SvModel().log_prior(np.array([2.0, 0.0, 0.0]))[1])


def test_sv_rejects_persistence_outside_range():
    with pytest.raises(ParameterDomainError):
        SvModel().transform(np.array([0.0, 0.999, 0.3]))
    with pytest.raises(ParameterDomainError):
        SvModel().transform(np.array([0.0, 0.5, -0.1]))


def test_transition_logdensity_is_gaussian():
    model = SvModel()
    params = np.array([-1.0, 0.9, 0.4])

    value = eval_transition_logdensity(model, 0.3, -0.5, params)

    assert value == pytest.approx(norm.logpdf(0.3, -1.0 + 0.9 * (-0.5 + 1.0), 0.4))


def test_lgss_gradients_match_finite_differences():
    model = get_model("lgss")
    rng = np.random.default_rng(3)
    x = rng.standard_normal((15, 1))
    data = Dataset.from_array(x[:, 0] + 0.5 * rng.standard_normal(15))
    theta = np.array([0.2, 0.7, np.log(0.25), np.log(0.4)])

    analytic = model.log_joint_grad(theta, x, data)
    numeric = numerical_gradient(lambda t: model.log_joint(t, x, data), theta)

    np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-6)


def skellam_problem():
    model = get_model("skellam", n_series=2, intraday_periods=10, knots=[0.0, 2.0, 5.0, 9.0])
    params = model.params_from_mapping(
        {
            "kappa": [0.2, 0.3],
            "x_bar": [-0.1, 0.2],
            "omega": [0.8, 0.7],
            "Sigma": [[0.3, 0.1], [0.1, 0.4]],
            "beta": [[0.1, -0.2, 0.05], [0.0, 0.1, -0.1]],
        }
    )
    data, x = simulate(model, params, 12, seed=3)
    return model, data, x, model.transform(params)


def test_skellam_parameter_gradient_matches_finite_differences():
    model, data, x, theta = skellam_problem()

    analytic = model.log_joint_grad(theta, x, data)
    numeric = numerical_gradient(lambda t: model.log_joint(t, x, data), theta)

    np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-6)


def test_skellam_state_gradient_matches_finite_differences():
    model, data, x, theta = skellam_problem()

    analytic = model.state_grad(theta, x, data).ravel()
    numeric = numerical_gradient(lambda v: model.log_joint(theta, v.reshape(x.shape), data), x.ravel())

    np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-6)


def test_skellam_gradient_without_observations_is_the_prior():
    model = get_model("skellam", n_series=2, intraday_periods=10, knots=[0.0, 2.0, 5.0, 9.0])
    params = model.params_from_mapping(
        {"kappa": [0.5, 0.5], "x_bar": [1.0, -3.0], "omega": [0.8, 0.7], "Sigma": [[0.3, 0.1], [0.1, 0.4]]}
    )

    grad = SkellamParams.from_vector(skellam_log_joint_grad(model, model.transform(params), np.zeros((0, 2)), None), 2)

    np.testing.assert_allclose(grad.kappa_logit, 0.0, atol=1e-12)
    np.testing.assert_allclose(grad.x_bar, [-0.01, 0.03])


def test_skellam_pmf_sums_to_one_with_variance_sigma2():
    y = np.arange(-200, 201)

    for sigma2 in (0.1, 1.0, 10.0, 25.0):
        for kappa in (0.0, 0.5):
            assert skellam_pmf(y, sigma2, kappa).sum() == pytest.approx(1.0, abs=1e-10)
        assert np.sum(y**2 * skellam_pmf(y, sigma2, 0.0)) == pytest.approx(sigma2, rel=1e-8)


def test_bessel_matches_power_series():
    z = 2.5
    for order in range(5):
        series = sum((z / 2.0) ** (2 * k + order) / (factorial(k) * factorial(k + order)) for k in range(40))
        assert bessel_i_scaled(order, z) == pytest.approx(series * np.exp(-z), rel=1e-10)


def test_bessel_rejects_negative_argument():
    with pytest.raises(ParameterDomainError):
        bessel_i_scaled(0, -1.0)


def test_skellam_log_terms_agree_with_pmf():
    y = np.array([0, 1, -3, 7])
    log_sigma2 = np.log(np.array([0.5, 2.0, 4.0, 1.5]))
    kappa = 0.3

    logp, d_log_sigma2, _ = skellam_log_terms(np.abs(y), log_sigma2, kappa)

    np.testing.assert_allclose(logp, np.log(skellam_pmf(y, np.exp(log_sigma2), kappa)), rtol=1e-10)
    step = 1e-6
    up = skellam_log_terms(np.abs(y), log_sigma2 + step, kappa)[0]
    down = skellam_log_terms(np.abs(y), log_sigma2 - step, kappa)[0]
    np.testing.assert_allclose(d_log_sigma2, (up - down) / (2.0 * step), rtol=1e-5, atol=1e-8)


def test_skellam_log_terms_stay_finite_in_the_tail():
    logp, d_log_sigma2, _ = skellam_log_terms(np.array([400.0]), np.log(np.array([0.5])), 0.1)

    assert np.all(np.isfinite(logp))
    assert np.all(np.isfinite(d_log_sigma2))


def test_seasonal_basis_columns_sum_to_zero():
    basis = build_seasonal_basis(np.tile(np.arange(390), 2), [0, 30, 180, 389])

    assert basis.values.shape == (780, 3)
    np.testing.assert_allclose(basis.values.sum(axis=0), 0.0, atol=1e-8)


def test_seasonal_basis_reproduces_centered_spline_shapes():
    times = np.arange(390.0)
    knots = np.array([0.0, 30.0, 180.0, 389.0])
    basis = build_seasonal_basis(times, knots).values
    cubic = 2e-7 * (times - 200.0) ** 3 - 1e-3 * times
    # natural splines reproduce lines exactly, and the cubic through its knot values
    shapes = [times - times.mean(), natural_spline_basis(times, knots) @ np.interp(knots, times, cubic)]

    for shape in shapes:
        target = shape - shape.mean()
        beta, *_ = np.linalg.lstsq(basis, target, rcond=None)
        assert np.max(np.abs(basis @ beta - target)) < 1e-6


def test_natural_spline_basis_is_cardinal():
    knots = np.array([0.0, 30.0, 180.0, 389.0])

    np.testing.assert_allclose(natural_spline_basis(knots, knots), np.eye(4), atol=1e-12)


def test_seasonal_basis_rejects_unordered_knots():
    with pytest.raises(ParameterDomainError):
        build_seasonal_basis(range(10), [0, 5, 3, 9])


def test_unknown_model():
    with pytest.raises(ConfigurationError):
        get_model("garch")


def test_simulate_without_state_noise_stays_at_level():
    model = SvModel()

    data, x = simulate(model, np.array([-1.0, 0.9, 0.0]), 30, seed=1)

    assert data.n_times == 30
    np.testing.assert_allclose(x, -1.0)


def test_simulate_is_seeded():
    model = SvModel()
    params = np.array([-1.0, 0.9, 0.3])

    first, _ = simulate(model, params, 25, seed=11)
    second, _ = simulate(model, params, 25, seed=11)

    np.testing.assert_array_equal(first.observations, second.observations)


def test_simulate_rejects_empty_sample():
    with pytest.raises(ConfigurationError):
        simulate(SvModel(), np.array([-1.0, 0.9, 0.3]), 0, seed=1)
