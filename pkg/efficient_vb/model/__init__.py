from __future__ import annotations

from abc import ABC, abstractmethod
from typing import Callable, ClassVar, Dict, List, Mapping, Optional, Tuple, Type

import numpy as np
from pydantic import BaseModel, ConfigDict

from efficient_vb.dataset import Dataset
from efficient_vb.exceptions import CapabilityError, ConfigurationError
from efficient_vb.logging import logger

LOG_2PI = float(np.log(2.0 * np.pi))


class TransitionMoments(BaseModel):
    """Gaussian moments of the state equation at a fixed parameter value.

    The initial state is x_1 ~ N(initial_mean, initial_cov) and later states follow
    x_t | x_{t-1} ~ N(intercept + matrix @ x_{t-1}, cov).
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    initial_mean: np.ndarray
    initial_cov: np.ndarray
    intercept: np.ndarray
    matrix: np.ndarray
    cov: np.ndarray

    def at(self, t: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(intercept, matrix, covariance) of p(x_t|x_{t-1}) for zero-based `t`."""
        if t == 0:
            n = self.initial_mean.shape[0]
            return self.initial_mean, np.zeros((n, n)), self.initial_cov
        return self.intercept, self.matrix, self.cov

    def stacked(self, n_times: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-time intercepts (T, n), matrices (T, n, n) and covariances (T, n, n)."""
        n = self.initial_mean.shape[0]
        intercepts = np.repeat(self.intercept[None, :], n_times, axis=0)
        matrices = np.repeat(self.matrix[None, :, :], n_times, axis=0)
        covs = np.repeat(self.cov[None, :, :], n_times, axis=0)
        intercepts[0] = self.initial_mean
        matrices[0] = np.zeros((n, n))
        covs[0] = self.initial_cov
        return intercepts, matrices, covs


def covariance_factor(cov: np.ndarray) -> np.ndarray:
    """A square root F with F @ F.T = cov, also for singular (e.g. zero) covariances."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(cov)
        return v * np.sqrt(np.clip(w, 0.0, None))


class ModelSpec(BaseModel, ABC):
    """A state space model plugin.

    Parameters appear in two forms. `params` is the constrained vector the densities are
    written in; `theta` is its unconstrained image, on which priors, gradients and the
    variational family live. States are arrays of shape (T, n), optionally with leading
    batch dimensions.

    The state equation is Gaussian, which gives the exponential-family decomposition
    p(x_t|x_{t-1}) = h(x_t) g(x_{t-1}) exp(eta(x_{t-1})' T(x_t)) with T(x) = (x, vec(x x')).
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    name: ClassVar[str] = ""

    @property
    @abstractmethod
    def dim_state(self) -> int: ...

    @property
    @abstractmethod
    def dim_theta(self) -> int: ...

    @property
    @abstractmethod
    def parameter_names(self) -> List[str]:
        """Names of the constrained parameter vector entries."""

    @abstractmethod
    def check_domain(self, params: np.ndarray, allow_boundary: bool = False):
        """Raise ParameterDomainError when `params` is outside the constrained domain.

        `allow_boundary` admits degenerate values that simulation can handle (e.g. sigma = 0).
        """

    @abstractmethod
    def transform(self, params: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def inverse_transform(self, theta: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def transition_moments(self, params: np.ndarray, data: Optional[Dataset] = None) -> TransitionMoments:
        """Moments of the state equation. `data` is None when simulating."""

    @abstractmethod
    def measurement_logdensity(self, data: Dataset, x: np.ndarray, params: np.ndarray) -> np.ndarray:
        """log p(y_t|x_t) for every t, summed over series. Returns shape x.shape[:-1]."""

    @abstractmethod
    def measurement_grad_x(self, data: Dataset, x: np.ndarray, params: np.ndarray) -> np.ndarray:
        """Gradient of log p(y_t|x_t) with respect to x_t, shape (T, n)."""

    def measurement_logdensity_at(self, data: Dataset, t: int, x_t: np.ndarray, params: np.ndarray) -> np.ndarray:
        """log p(y_t|x_t) at zero-based `t` for a batch of states x_t, shape (..., n)."""
        x_t = np.asarray(x_t, dtype=float)
        return self.measurement_logdensity(data.window(t, t + 1), x_t[..., None, :], params)[..., 0]

    @abstractmethod
    def log_prior(self, theta: np.ndarray) -> Tuple[float, np.ndarray]:
        """Prior log density on the unconstrained scale and its gradient."""

    @abstractmethod
    def log_joint_grad(self, theta: np.ndarray, x: np.ndarray, data: Dataset) -> np.ndarray:
        """Analytic gradient of log p(y,x|theta)p(theta) with respect to theta."""

    @abstractmethod
    def simulate_observations(
        self, x: np.ndarray, params: np.ndarray, covariates: Optional[np.ndarray], rng: np.random.Generator
    ) -> np.ndarray:
        """Draw y given a state path, shape (T, N)."""

    @abstractmethod
    def initial_guess(self, data: Dataset) -> np.ndarray:
        """Method-of-moments style starting value on the constrained scale."""

    def initial_state_guess(self, data: Dataset, params: np.ndarray) -> np.ndarray:
        """Starting state path for Gaussian VB: the unconditional state mean."""
        moments = self.transition_moments(params, data)
        x = np.empty((data.n_times, self.dim_state))
        x[0] = moments.initial_mean
        for t in range(1, data.n_times):
            x[t] = moments.intercept + moments.matrix @ x[t - 1]
        return x

    def covariates_for(self, n_times: int) -> Optional[np.ndarray]:
        """Exogenous covariates the model needs on a grid of `n_times` points."""
        return None

    def prepare(self, data: Dataset) -> Dataset:
        """Attach model-required covariates to observed data."""
        if data.covariates is None:
            covariates = self.covariates_for(data.n_times)
            if covariates is not None:
                return data.with_covariates(covariates)
        return data

    def params_from_mapping(self, mapping: Mapping[str, float]) -> np.ndarray:
        """Constrained parameter vector from a name -> value mapping."""
        missing = [name for name in self.parameter_names if name not in mapping]
        if missing:
            raise ConfigurationError(f"Missing parameter values for {missing}")
        return np.array([float(mapping[name]) for name in self.parameter_names])

    def describe(self, theta: np.ndarray) -> Dict[str, float]:
        """Reportable constrained quantities for an unconstrained parameter vector."""
        return dict(zip(self.parameter_names, self.inverse_transform(theta).tolist()))

    def exact_state_sampler(self, data: Dataset) -> Callable:
        raise CapabilityError(f"Model '{self.name}' has no exact conditional state sampler")

    def linear_gaussian_spec(self, params: np.ndarray, data: Optional[Dataset] = None):
        raise CapabilityError(f"Model '{self.name}' is not linear-Gaussian")

    # exponential-family view of the transition

    def sufficient_statistics(self, x: np.ndarray) -> np.ndarray:
        """T(x) = (x, vec(x x')) along the last axis."""
        outer = x[..., :, None] * x[..., None, :]
        return np.concatenate([x, outer.reshape(x.shape[:-1] + (-1,))], axis=-1)

    def log_base_measure(self, x: np.ndarray) -> np.ndarray:
        """log h(x)."""
        return np.full(x.shape[:-1], -0.5 * self.dim_state * LOG_2PI)

    def natural_parameters(self, x_prev: np.ndarray, params: np.ndarray, data: Optional[Dataset] = None, t: int = 1):
        """eta(x_{t-1}) = (P m, -vec(P)/2) with P the transition precision and m the mean."""
        mean, precision, _ = self._conditional(x_prev, params, data, t)
        first = np.einsum("ij,...j->...i", precision, mean)
        second = np.broadcast_to(-0.5 * precision.reshape(-1), first.shape[:-1] + (precision.size,))
        return np.concatenate([first, second], axis=-1)

    def log_normalizer(self, x_prev: np.ndarray, params: np.ndarray, data: Optional[Dataset] = None, t: int = 1):
        """log g(x_{t-1}) = -log|Sigma|/2 - m' P m / 2."""
        mean, precision, logdet = self._conditional(x_prev, params, data, t)
        return -0.5 * logdet - 0.5 * np.einsum("...i,ij,...j->...", mean, precision, mean)

    def transition_logdensity(
        self, x_t: np.ndarray, x_prev: np.ndarray, params: np.ndarray, data: Optional[Dataset] = None, t: int = 1
    ) -> np.ndarray:
        """log p(x_t|x_{t-1}) through the exponential-family decomposition."""
        eta = self.natural_parameters(x_prev, params, data, t)
        stats = self.sufficient_statistics(x_t)
        return (
            self.log_base_measure(x_t)
            + self.log_normalizer(x_prev, params, data, t)
            + np.sum(eta * stats, axis=-1)
        )

    def _conditional(self, x_prev, params, data, t):
        intercept, matrix, cov = self.transition_moments(params, data).at(t)
        mean = intercept + np.einsum("ij,...j->...i", matrix, np.asarray(x_prev, dtype=float))
        precision = np.linalg.inv(cov)
        logdet = np.linalg.slogdet(cov)[1]
        return mean, precision, logdet

    # whole-path densities and gradients

    def state_logdensity(self, x: np.ndarray, params: np.ndarray, data: Optional[Dataset] = None) -> np.ndarray:
        """log p(x|theta) of whole paths (..., T, n)."""
        moments = self.transition_moments(params, data)
        n = self.dim_state
        r1 = x[..., 0, :] - moments.initial_mean
        p1 = np.linalg.inv(moments.initial_cov)
        value = -0.5 * (n * LOG_2PI + np.linalg.slogdet(moments.initial_cov)[1])
        value = value - 0.5 * np.einsum("...i,ij,...j->...", r1, p1, r1)
        if x.shape[-2] > 1:
            r = x[..., 1:, :] - moments.intercept - np.einsum("ij,...tj->...ti", moments.matrix, x[..., :-1, :])
            q = np.linalg.inv(moments.cov)
            per_t = -0.5 * (n * LOG_2PI + np.linalg.slogdet(moments.cov)[1])
            per_t = per_t - 0.5 * np.einsum("...ti,ij,...tj->...t", r, q, r)
            value = value + per_t.sum(axis=-1)
        return value

    def log_joint(self, theta: np.ndarray, x: np.ndarray, data: Dataset) -> float:
        """log p(y|x,theta) + log p(x|theta) + log p(theta)."""
        params = self.inverse_transform(theta)
        return float(
            self.measurement_logdensity(data, x, params).sum()
            + self.state_logdensity(x, params, data)
            + self.log_prior(theta)[0]
        )

    def state_grad(self, theta: np.ndarray, x: np.ndarray, data: Dataset) -> np.ndarray:
        """Gradient of log p(y|x,theta)p(x|theta) with respect to the state path, shape (T, n)."""
        params = self.inverse_transform(theta)
        moments = self.transition_moments(params, data)
        grad = self.measurement_grad_x(data, x, params).copy()
        p1 = np.linalg.inv(moments.initial_cov)
        grad[0] -= p1 @ (x[0] - moments.initial_mean)
        if x.shape[0] > 1:
            q = np.linalg.inv(moments.cov)
            r = x[1:] - moments.intercept - x[:-1] @ moments.matrix.T
            qr = r @ q.T
            grad[1:] -= qr
            grad[:-1] += qr @ moments.matrix
        return grad

    def __str__(self):
        return f"{type(self).__name__}(name={self.name}, dim_theta={self.dim_theta}, dim_state={self.dim_state})"

    def __repr__(self):
        return self.__str__()


MODEL_REGISTRY: Dict[str, Type[ModelSpec]] = {}


def register_model(cls: Type[ModelSpec]) -> Type[ModelSpec]:
    MODEL_REGISTRY[cls.name] = cls
    return cls


def get_model(name: str, **options) -> ModelSpec:
    """Build a registered model by name.

    Example:
        >>> model = get_model("sv")
        >>> model.parameter_names
        ['x_bar', 'rho', 'sigma']
    """
    if name not in MODEL_REGISTRY:
        raise ConfigurationError(f"Unknown model '{name}', registered models: {sorted(MODEL_REGISTRY)}")
    return MODEL_REGISTRY[name](**options)


def transform_parameters(model: ModelSpec, params: np.ndarray) -> np.ndarray:
    """Map constrained parameters to the real line."""
    return model.transform(np.asarray(params, dtype=float))


def eval_transition_logdensity(
    model: ModelSpec, x_t: np.ndarray, x_prev: np.ndarray, params: np.ndarray, data: Optional[Dataset] = None
) -> float:
    """log h(x_t) + log g(x_{t-1}) + eta(x_{t-1})'T(x_t) for t >= 2."""
    return float(
        model.transition_logdensity(
            np.atleast_1d(np.asarray(x_t, dtype=float)), np.atleast_1d(np.asarray(x_prev, dtype=float)), params, data
        )
    )


def simulate(model: ModelSpec, params: np.ndarray, n_times: int, seed: int) -> Tuple[Dataset, np.ndarray]:
    """Simulate a state path and observations.

    Args:
        model: The model.
        params: Constrained parameter vector.
        n_times: Number of time points T.
        seed: Seed of the random generator.

    Returns:
        The simulated dataset (with model covariates attached) and the state path (T, n).
    """
    if n_times < 1:
        raise ConfigurationError(f"Cannot simulate {n_times} time points")
    params = np.asarray(params, dtype=float)
    model.check_domain(params, allow_boundary=True)
    rng = np.random.default_rng(seed)
    moments = model.transition_moments(params, None)
    n = model.dim_state

    x = np.empty((n_times, n))
    x[0] = moments.initial_mean + covariance_factor(moments.initial_cov) @ rng.standard_normal(n)
    factor = covariance_factor(moments.cov)
    shocks = rng.standard_normal((n_times, n)) @ factor.T
    for t in range(1, n_times):
        x[t] = moments.intercept + moments.matrix @ x[t - 1] + shocks[t]

    covariates = model.covariates_for(n_times)
    y = model.simulate_observations(x, params, covariates, rng)
    logger.debug(f"Simulated {n_times} observations from model '{model.name}'")
    return Dataset.from_array(y, covariates=covariates), x


# registration side effects
from efficient_vb.model import linear_gaussian, skellam, sv  # noqa: E402,F401
