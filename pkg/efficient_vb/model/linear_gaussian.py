from __future__ import annotations

from typing import List, Optional, Tuple

import numpy as np
from scipy.special import gammaln

from efficient_vb.dataset import Dataset
from efficient_vb.exceptions import ParameterDomainError
from efficient_vb.model import LOG_2PI, register_model
from efficient_vb.model.sv import SvModel, check_ar1_domain


@register_model
class LinearGaussianModel(SvModel):
    """AR(1) state observed with Gaussian noise: y_t = x_t + e_t, e_t ~ N(0, obs_var).

    The state equation, its transforms and priors are those of the SV model. The extra
    parameter obs_var is mapped to nu = log(obs_var) with the inverse-gamma prior used for
    sigma^2. Everything about this model is available in closed form, which makes it the
    reference case for the Kalman smoother and the particle filter.
    """

    name = "lgss"

    @property
    def dim_theta(self) -> int:
        return 4

    @property
    def parameter_names(self) -> List[str]:
        return ["x_bar", "rho", "sigma", "obs_var"]

    def check_domain(self, params: np.ndarray, allow_boundary: bool = False):
        params = np.asarray(params, dtype=float)
        if params.shape != (4,) or not np.all(np.isfinite(params)):
            raise ParameterDomainError(f"Expected 4 finite parameters, got {params}")
        check_ar1_domain(params[1], params[2], allow_boundary)
        if not params[3] > 0.0:
            raise ParameterDomainError(f"Require obs_var > 0, got {params[3]}")

    def transform(self, params: np.ndarray) -> np.ndarray:
        params = np.asarray(params, dtype=float)
        self.check_domain(params)
        return np.concatenate([self._ar1_to_unconstrained(params), [np.log(params[3])]])

    def inverse_transform(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return np.concatenate([super().inverse_transform(theta), [np.exp(theta[3])]])

    def measurement_logdensity(self, data: Dataset, x: np.ndarray, params: np.ndarray) -> np.ndarray:
        obs_var = params[3]
        y = data.observations[:, 0]
        return -0.5 * (LOG_2PI + np.log(obs_var)) - 0.5 * (y - x[..., 0]) ** 2 / obs_var

    def measurement_grad_x(self, data: Dataset, x: np.ndarray, params: np.ndarray) -> np.ndarray:
        return ((data.observations[:, 0] - x[:, 0]) / params[3])[:, None]

    def measurement_logdensity_at(self, data: Dataset, t: int, x_t: np.ndarray, params: np.ndarray) -> np.ndarray:
        obs_var = params[3]
        return -0.5 * (LOG_2PI + np.log(obs_var)) - 0.5 * (data.observations[t, 0] - np.asarray(x_t)[..., 0]) ** 2 / obs_var

    def log_prior(self, theta: np.ndarray) -> Tuple[float, np.ndarray]:
        value, grad = super().log_prior(theta)
        nu = theta[3]
        alpha, beta = self.prior_alpha, self.prior_beta
        value += alpha * np.log(beta) - gammaln(alpha) - alpha * nu - beta * np.exp(-nu)
        return float(value), np.concatenate([grad, [-alpha + beta * np.exp(-nu)]])

    def log_joint_grad(self, theta: np.ndarray, x: np.ndarray, data: Dataset) -> np.ndarray:
        grad = super().log_joint_grad(theta, x, data)
        if x.shape[0] == 0:
            return grad
        obs_var = np.exp(theta[3])
        resid = data.observations[:, 0] - x[:, 0]
        grad[3] += np.sum(-0.5 + resid**2 / (2.0 * obs_var))
        return grad

    def simulate_observations(
        self, x: np.ndarray, params: np.ndarray, covariates: Optional[np.ndarray], rng: np.random.Generator
    ) -> np.ndarray:
        return (x[:, 0] + np.sqrt(params[3]) * rng.standard_normal(x.shape[0]))[:, None]

    def initial_guess(self, data: Dataset) -> np.ndarray:
        y = data.observations[:, 0]
        return np.array([float(np.mean(y)), 0.9, 0.3, max(float(np.var(y)) / 2.0, 1e-4)])

    def exact_state_sampler(self, data: Dataset):
        from efficient_vb.kalman import KalmanStateSampler

        return KalmanStateSampler(model=self, data=data)

    def linear_gaussian_spec(self, params: np.ndarray, data: Optional[Dataset] = None):
        from efficient_vb.kalman import LinearGaussianSpec

        moments = self.transition_moments(params, data)
        return LinearGaussianSpec(
            initial_mean=moments.initial_mean,
            initial_cov=moments.initial_cov,
            intercept=moments.intercept,
            matrix=moments.matrix,
            state_cov=moments.cov,
            obs_intercept=np.zeros(1),
            obs_matrix=np.eye(1),
            obs_cov=np.array([[params[3]]]),
        )
