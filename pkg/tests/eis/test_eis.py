from efficient_vb.dataset import Dataset
from efficient_vb.eis import (
    KernelParams,
    ProxyParams,
    StateApprox,
    calibrate,
    chi,
    conditional_moments,
    kernel_log_chi,
    sample_states,
)
from efficient_vb.exceptions import CalibrationDegeneracyError
from efficient_vb.kalman import kalman_smoother
from efficient_vb.model import get_model, simulate
from efficient_vb.model.sv import SvModel
from scipy.integrate import quad
from scipy.stats import norm
import numpy as np
import pytest

LGSS_PARAMS = np.array([0.5, 0.8, 0.6, 0.3])


def lgss_problem(n_times=40):
    model = get_model("lgss")
    data, _ = simulate(model, LGSS_PARAMS, n_times, seed=5)
    return model, data, ProxyParams(values=LGSS_PARAMS)


class ConvexMeasurementModel(SvModel):
    def measurement_logdensity(self, data, x, params):
        return x[..., 0] ** 2


def test_kernel_log_chi_matches_quadrature():
    b, c, mean, var = 0.7, -0.4, 0.3, 1.5

    integral, _ = quad(lambda x: np.exp(b * x + c * x**2) * norm.pdf(x, mean, np.sqrt(var)), -np.inf, np.inf)

    assert kernel_log_chi(np.array([b]), np.array([c]), np.array([mean]), np.array([[var]])) == pytest.approx(
        np.log(integral), rel=1e-8
    )


def test_chi_matches_quadrature_over_random_kernels():
    model = SvModel()
    rng = np.random.default_rng(10)
    for _ in range(20):
        params = np.array([rng.normal(), rng.uniform(0.1, 0.99), rng.uniform(0.1, 1.0)])
        kernel = KernelParams(b=rng.normal(size=(2, 1)), c=-rng.uniform(0.0, 2.0, size=(2, 1)))
        x_prev = rng.normal(size=1)
        mean = params[0] + params[1] * (x_prev[0] - params[0])

        def integrand(x):
            return np.exp(kernel.b[1, 0] * x + kernel.c[1, 0] * x**2) * norm.pdf(x, mean, params[2])

        integral, _ = quad(integrand, mean - 12.0 * params[2], mean + 12.0 * params[2], epsabs=0.0, epsrel=1e-12)
        value = chi(model, ProxyParams(values=params), kernel, 1, x_prev)
        assert value == pytest.approx(integral, rel=1e-8)


def test_chi_of_zero_kernel_is_one():
    model = SvModel()
    proxy = ProxyParams(values=np.array([-1.0, 0.9, 0.3]))
    kernel = KernelParams.zeros(3, 1)

    assert chi(model, proxy, kernel, 0) == pytest.approx(1.0)
    assert chi(model, proxy, kernel, 2, np.array([0.4])) == pytest.approx(1.0)


def test_conditional_moments_with_zero_kernel_follow_transition():
    model = SvModel()
    proxy = ProxyParams(values=np.array([0.0, 0.5, 1.0]))

    mean, cov = conditional_moments(model, proxy, KernelParams.zeros(2, 1), 1, np.array([2.0]))

    assert mean[0] == pytest.approx(1.0)
    assert cov[0, 0] == pytest.approx(1.0)


def test_calibration_is_exact_for_linear_gaussian_model():
    model, data, proxy = lgss_problem()

    kernel = calibrate(model, data, proxy, seed=2)
    approx = StateApprox(model=model, data=data, proxy=proxy, kernel=kernel)
    means, covs = approx.marginal_moments()
    smoothed = kalman_smoother(model.linear_gaussian_spec(LGSS_PARAMS, data), data.observations)

    assert kernel.b[-1, 0] == pytest.approx(data.observations[-1, 0] / LGSS_PARAMS[3], abs=1e-6)
    assert kernel.c[-1, 0] == pytest.approx(-0.5 / LGSS_PARAMS[3], abs=1e-6)
    np.testing.assert_allclose(means, smoothed.smoothed_means, atol=1e-8)
    np.testing.assert_allclose(covs, smoothed.smoothed_covs, atol=1e-8)
    assert kernel.max_residual < 1e-8


def test_exact_approximation_density_is_the_posterior():
    model, data, proxy = lgss_problem(25)
    kernel = calibrate(model, data, proxy, seed=4)
    approx = StateApprox(model=model, data=data, proxy=proxy, kernel=kernel)
    loglik = kalman_smoother(model.linear_gaussian_spec(LGSS_PARAMS, data), data.observations).log_likelihood

    paths, log_q = approx.sample(np.random.default_rng(0), 3)
    posterior = (
        model.measurement_logdensity(data, paths, LGSS_PARAMS).sum(axis=-1)
        + model.state_logdensity(paths, LGSS_PARAMS, data)
        - loglik
    )

    np.testing.assert_allclose(log_q, posterior, atol=1e-6)
    np.testing.assert_allclose(approx.log_density(paths), log_q, atol=1e-8)


def test_sampled_density_matches_direct_evaluation_for_sv():
    model = SvModel()
    params = np.array([-1.0, 0.95, 0.25])
    data, _ = simulate(model, params, 60, seed=8)
    proxy = ProxyParams(values=params)
    kernel = calibrate(model, data, proxy, seed=1)
    kernel = calibrate(model, data, proxy, kernel, seed=2)
    approx = StateApprox(model=model, data=data, proxy=proxy, kernel=kernel)

    x, log_q = sample_states(approx, 9)

    assert x.shape == (60, 1)
    assert approx.log_density(x) == pytest.approx(log_q, abs=1e-8)
    assert kernel.clamp_events == 0


def test_calibration_is_seeded():
    model = SvModel()
    params = np.array([-1.0, 0.95, 0.25])
    data, _ = simulate(model, params, 30, seed=8)
    proxy = ProxyParams(values=params)

    first = calibrate(model, data, proxy, seed=[3, 1, 0])
    second = calibrate(model, data, proxy, seed=[3, 1, 0])

    np.testing.assert_array_equal(first.b, second.b)
    np.testing.assert_array_equal(first.c, second.c)


def test_convex_measurement_is_clamped():
    model = ConvexMeasurementModel()
    data = Dataset.from_array(np.array([0.1]))
    proxy = ProxyParams(values=np.array([0.0, 0.5, 1.0]))

    kernel = calibrate(model, data, proxy, seed=0)

    assert kernel.clamp_events == 1
    assert kernel.c[0, 0] < 0.5 * (1.0 - 0.5**2)
    StateApprox(model=model, data=data, proxy=proxy, kernel=kernel)


def test_improper_kernel_is_rejected():
    model = SvModel()
    data = Dataset.from_array(np.zeros(2))
    kernel = KernelParams(b=np.zeros((2, 1)), c=np.full((2, 1), 5.0))

    with pytest.raises(CalibrationDegeneracyError):
        StateApprox(model=model, data=data, proxy=ProxyParams(values=np.array([0.0, 0.5, 1.0])), kernel=kernel)


def test_too_few_paths():
    model, data, proxy = lgss_problem(5)

    with pytest.raises(CalibrationDegeneracyError):
        calibrate(model, data, proxy, n_paths=2, seed=0)


def test_kernel_csv(tmp_path):
    kernel = KernelParams(b=np.array([[0.1], [0.2]]), c=np.array([[-0.3], [-0.4]]))
    path = tmp_path / "kernel.csv"
    kernel.to_csv(str(path))

    loaded = KernelParams.from_csv(str(path))

    np.testing.assert_allclose(loaded.b, kernel.b)
    np.testing.assert_allclose(loaded.c, kernel.c)
