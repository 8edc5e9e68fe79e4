from __future__ import annotations

from typing import List, Optional, Tuple

import numpy as np
from scipy.special import expit, gammaln

from efficient_vb.dataset import Dataset
from efficient_vb.exceptions import ParameterDomainError
from efficient_vb.model import LOG_2PI, ModelSpec, TransitionMoments, register_model

RHO_MAX = 0.995


def sv_measurement_logdensity(y_t, x_t):
    """log N(y_t; 0, exp(x_t)).

    Example:
        >>> round(float(sv_measurement_logdensity(0.0, 0.0)), 4)
        -0.9189
    """
    y_t = np.asarray(y_t, dtype=float)
    x_t = np.asarray(x_t, dtype=float)
    return -0.5 * LOG_2PI - 0.5 * x_t - 0.5 * y_t**2 * np.exp(-x_t)


def check_ar1_domain(rho: float, sigma: float, allow_boundary: bool = False):
    if allow_boundary:
        ok = 0.0 <= rho < RHO_MAX and sigma >= 0.0
    else:
        ok = 0.0 < rho < RHO_MAX and sigma > 0.0
    if not ok:
        raise ParameterDomainError(f"Require 0 < rho < {RHO_MAX} and sigma > 0, got rho={rho}, sigma={sigma}")


def ar1_scores(xs: np.ndarray, x_bar: float, rho: float, sigma: float) -> Tuple[float, float, float]:
    """Derivatives of the stationary AR(1) path log density.

    Returns:
        The derivatives with respect to x_bar, rho and c = 2 log(sigma).
    """
    sigma2 = sigma**2
    s2 = sigma2 / (1.0 - rho**2)
    d1 = xs[0] - x_bar
    lagged = xs[:-1] - x_bar
    r = xs[1:] - x_bar - rho * lagged

    score_xbar = d1 / s2 + (1.0 - rho) / sigma2 * r.sum()
    score_rho = rho / (1.0 - rho**2) * (d1**2 / s2 - 1.0) + np.dot(lagged, r) / sigma2
    score_c = -0.5 + d1**2 / (2.0 * s2) + np.sum(-0.5 + r**2 / (2.0 * sigma2))
    return float(score_xbar), float(score_rho), float(score_c)


@register_model
class SvModel(ModelSpec):
    """Univariate stochastic volatility model.

    y_t ~ N(0, exp(x_t)) and x_t = x_bar + rho (x_{t-1} - x_bar) + sigma e_t, with x_1 drawn
    from the stationary distribution N(x_bar, sigma^2 / (1 - rho^2)).

    Constrained parameters are (x_bar, rho, sigma) with 0 < rho < 0.995 and sigma > 0. The
    unconstrained vector is (x_bar, kappa, c) with rho = 0.995 / (1 + exp(-kappa)) and
    sigma = exp(c / 2).

    Attributes:
        prior_alpha: Shape of the inverse-gamma prior on sigma^2.
        prior_beta: Scale of the inverse-gamma prior on sigma^2.
        prior_level_var: Prior variance of x_bar.
    """

    name = "sv"

    prior_alpha: float = 1.001
    prior_beta: float = 1.001
    prior_level_var: float = 1000.0

    @property
    def dim_state(self) -> int:
        return 1

    @property
    def dim_theta(self) -> int:
        return 3

    @property
    def parameter_names(self) -> List[str]:
        return ["x_bar", "rho", "sigma"]

    def check_domain(self, params: np.ndarray, allow_boundary: bool = False):
        params = np.asarray(params, dtype=float)
        if params.shape != (self.dim_theta,) or not np.all(np.isfinite(params)):
            raise ParameterDomainError(f"Expected {self.dim_theta} finite parameters, got {params}")
        check_ar1_domain(params[1], params[2], allow_boundary)

    def transform(self, params: np.ndarray) -> np.ndarray:
        params = np.asarray(params, dtype=float)
        self.check_domain(params)
        return self._ar1_to_unconstrained(params)

    def _ar1_to_unconstrained(self, params: np.ndarray) -> np.ndarray:
        x_bar, rho, sigma = params[:3]
        return np.array([x_bar, np.log(rho / (RHO_MAX - rho)), 2.0 * np.log(sigma)])

    def inverse_transform(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        x_bar, kappa, c = theta[:3]
        return np.array([x_bar, RHO_MAX * expit(kappa), np.exp(0.5 * c)])

    def transition_moments(self, params: np.ndarray, data: Optional[Dataset] = None) -> TransitionMoments:
        x_bar, rho, sigma = params[:3]
        return TransitionMoments(
            initial_mean=np.array([x_bar]),
            initial_cov=np.array([[sigma**2 / (1.0 - rho**2)]]),
            intercept=np.array([x_bar * (1.0 - rho)]),
            matrix=np.array([[rho]]),
            cov=np.array([[sigma**2]]),
        )

    def measurement_logdensity(self, data: Dataset, x: np.ndarray, params: np.ndarray) -> np.ndarray:
        return sv_measurement_logdensity(data.observations[:, 0], x[..., 0])

    def measurement_grad_x(self, data: Dataset, x: np.ndarray, params: np.ndarray) -> np.ndarray:
        y = data.observations[:, 0]
        return (-0.5 + 0.5 * y**2 * np.exp(-x[:, 0]))[:, None]

    def measurement_logdensity_at(self, data: Dataset, t: int, x_t: np.ndarray, params: np.ndarray) -> np.ndarray:
        return sv_measurement_logdensity(data.observations[t, 0], np.asarray(x_t)[..., 0])

    def log_prior(self, theta: np.ndarray) -> Tuple[float, np.ndarray]:
        x_bar, kappa, c = theta[:3]
        alpha, beta = self.prior_alpha, self.prior_beta
        value = (
            -0.5 * np.log(2.0 * np.pi * self.prior_level_var)
            - x_bar**2 / (2.0 * self.prior_level_var)
            + kappa
            - 2.0 * np.logaddexp(0.0, kappa)
            + alpha * np.log(beta)
            - gammaln(alpha)
            - alpha * c
            - beta * np.exp(-c)
        )
        grad = np.array(
            [
                -x_bar / self.prior_level_var,
                1.0 - 2.0 * expit(kappa),
                -alpha + beta * np.exp(-c),
            ]
        )
        return float(value), grad

    def log_joint_grad(self, theta: np.ndarray, x: np.ndarray, data: Dataset) -> np.ndarray:
        grad = self.log_prior(theta)[1].copy()
        if x.shape[0] == 0:
            return grad
        x_bar, kappa, _ = theta[:3]
        _, rho, sigma = self.inverse_transform(theta)[:3]
        score_xbar, score_rho, score_c = ar1_scores(x[:, 0], x_bar, rho, sigma)
        drho_dkappa = RHO_MAX * np.exp(kappa) / (1.0 + np.exp(kappa)) ** 2
        grad[:3] += np.array([score_xbar, score_rho * drho_dkappa, score_c])
        return grad

    def simulate_observations(
        self, x: np.ndarray, params: np.ndarray, covariates: Optional[np.ndarray], rng: np.random.Generator
    ) -> np.ndarray:
        return (np.exp(0.5 * x[:, 0]) * rng.standard_normal(x.shape[0]))[:, None]

    def initial_guess(self, data: Dataset) -> np.ndarray:
        variance = max(float(np.var(data.observations[:, 0])), 1e-8)
        return np.array([np.log(variance), 0.9, 0.3])

    def exact_state_sampler(self, data: Dataset):
        from efficient_vb.mcmc import KscStateSampler

        return KscStateSampler(model=self, data=data)


def sv_log_joint_grad(theta: np.ndarray, x: np.ndarray, y: np.ndarray, model: Optional[SvModel] = None) -> np.ndarray:
    """Gradient of the SV augmented log posterior over (x_bar, kappa, c)."""
    model = model or SvModel()
    y = np.asarray(y, dtype=float).reshape(-1, 1)
    # T = 0 leaves the prior alone
    data = Dataset.from_array(y) if y.shape[0] else None
    return model.log_joint_grad(np.asarray(theta, dtype=float), np.asarray(x, dtype=float).reshape(-1, 1), data)


def sv_state_grad(theta: np.ndarray, x: np.ndarray, y: np.ndarray, model: Optional[SvModel] = None) -> np.ndarray:
    """Gradient of log p(y|x)p(x|theta) over the state path, shape (T,)."""
    model = model or SvModel()
    return model.state_grad(np.asarray(theta, dtype=float), np.asarray(x, dtype=float).reshape(-1, 1),
                            Dataset.from_array(np.asarray(y, dtype=float).reshape(-1, 1)))[:, 0]
