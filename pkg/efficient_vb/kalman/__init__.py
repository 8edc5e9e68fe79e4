from __future__ import annotations

from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from efficient_vb.dataset import Dataset
from efficient_vb.exceptions import SingularCovarianceError
from efficient_vb.model import LOG_2PI, ModelSpec


class LinearGaussianSpec(BaseModel):
    """A linear-Gaussian state space model.

    x_1 ~ N(initial_mean, initial_cov), x_t = intercept + matrix x_{t-1} + N(0, state_cov),
    y_t = obs_intercept + obs_matrix x_t + N(0, obs_cov).
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    initial_mean: np.ndarray
    initial_cov: np.ndarray
    intercept: np.ndarray
    matrix: np.ndarray
    state_cov: np.ndarray
    obs_intercept: np.ndarray
    obs_matrix: np.ndarray
    obs_cov: np.ndarray


class KalmanResult(BaseModel):
    """Filter and smoother output.

    Attributes:
        predicted_means: E[x_t | y_{1:t-1}], shape (T, n).
        predicted_covs: Var[x_t | y_{1:t-1}], shape (T, n, n).
        filtered_means: E[x_t | y_{1:t}].
        filtered_covs: Var[x_t | y_{1:t}].
        smoothed_means: E[x_t | y_{1:T}].
        smoothed_covs: Var[x_t | y_{1:T}].
        log_likelihood: log p(y_{1:T}).
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    predicted_means: np.ndarray
    predicted_covs: np.ndarray
    filtered_means: np.ndarray
    filtered_covs: np.ndarray
    smoothed_means: np.ndarray
    smoothed_covs: np.ndarray
    log_likelihood: float

    def __str__(self):
        return f"KalmanResult(n_times={self.filtered_means.shape[0]}, log_likelihood={self.log_likelihood})"

    def __repr__(self):
        return self.__str__()


def kalman_filter(spec: LinearGaussianSpec, y: np.ndarray):
    y = np.asarray(y, dtype=float).reshape(len(y), -1)
    n_times, n_obs = y.shape
    n = spec.initial_mean.shape[0]
    mp = np.empty((n_times, n))
    pp = np.empty((n_times, n, n))
    mf = np.empty((n_times, n))
    pf = np.empty((n_times, n, n))
    loglik = 0.0

    m, p = spec.initial_mean.astype(float), spec.initial_cov.astype(float)
    for t in range(n_times):
        mp[t], pp[t] = m, p
        v = y[t] - spec.obs_intercept - spec.obs_matrix @ m
        s = spec.obs_matrix @ p @ spec.obs_matrix.T + spec.obs_cov
        try:
            chol = np.linalg.cholesky(s)
        except np.linalg.LinAlgError:
            raise SingularCovarianceError(f"Innovation covariance is not positive definite at t={t}")
        gain = np.linalg.solve(s, spec.obs_matrix @ p).T
        m = m + gain @ v
        p = p - gain @ s @ gain.T
        p = 0.5 * (p + p.T)
        mf[t], pf[t] = m, p
        white = np.linalg.solve(chol, v)
        loglik += -0.5 * (n_obs * LOG_2PI + 2.0 * np.sum(np.log(np.diag(chol))) + white @ white)
        m = spec.intercept + spec.matrix @ m
        p = spec.matrix @ p @ spec.matrix.T + spec.state_cov
    return mp, pp, mf, pf, float(loglik)


def kalman_smoother(spec: LinearGaussianSpec, y: np.ndarray) -> KalmanResult:
    """Forward Kalman filter and Rauch-Tung-Striebel smoother.

    Args:
        spec: The linear-Gaussian model.
        y: Observations, shape (T,) or (T, N).

    Returns:
        Predicted, filtered and smoothed moments and the log-likelihood.
    """
    mp, pp, mf, pf, loglik = kalman_filter(spec, y)
    ms, ps = mf.copy(), pf.copy()
    for t in range(len(mf) - 2, -1, -1):
        gain = np.linalg.solve(pp[t + 1], spec.matrix @ pf[t]).T
        ms[t] = mf[t] + gain @ (ms[t + 1] - mp[t + 1])
        ps[t] = pf[t] + gain @ (ps[t + 1] - pp[t + 1]) @ gain.T
    return KalmanResult(
        predicted_means=mp,
        predicted_covs=pp,
        filtered_means=mf,
        filtered_covs=pf,
        smoothed_means=ms,
        smoothed_covs=ps,
        log_likelihood=loglik,
    )


def backward_sample(spec: LinearGaussianSpec, result: KalmanResult, rng: np.random.Generator) -> Tuple[np.ndarray, float]:
    """Draw a state path from p(x|y) by backward sampling on the filter output.

    Returns:
        The path (T, n) and its log density under p(x|y).
    """
    mf, pf, mp, pp = result.filtered_means, result.filtered_covs, result.predicted_means, result.predicted_covs
    n_times, n = mf.shape
    x = np.empty((n_times, n))
    log_q = 0.0

    def draw(mean, cov):
        chol = np.linalg.cholesky(cov)
        e = rng.standard_normal(n)
        return mean + chol @ e, -0.5 * (n * LOG_2PI + e @ e) - np.sum(np.log(np.diag(chol)))

    x[-1], lq = draw(mf[-1], pf[-1])
    log_q += lq
    for t in range(n_times - 2, -1, -1):
        gain = np.linalg.solve(pp[t + 1], spec.matrix @ pf[t]).T
        mean = mf[t] + gain @ (x[t + 1] - mp[t + 1])
        cov = pf[t] - gain @ pp[t + 1] @ gain.T
        x[t], lq = draw(mean, 0.5 * (cov + cov.T))
        log_q += lq
    return x, float(log_q)


class KalmanStateSampler(BaseModel):
    """Exact draws from p(x|y, theta) for linear-Gaussian models."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    model: ModelSpec
    data: Dataset

    def sample_given(self, params: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, float]:
        spec = self.model.linear_gaussian_spec(params, self.data)
        result = kalman_smoother(spec, self.data.observations)
        return backward_sample(spec, result, rng)


def exact_log_likelihood(model: ModelSpec, params: np.ndarray, data: Dataset, spec: Optional[LinearGaussianSpec] = None) -> float:
    """log p(y|theta) for a model exposing a linear-Gaussian form."""
    spec = spec or model.linear_gaussian_spec(params, data)
    return kalman_filter(spec, data.observations)[4]
