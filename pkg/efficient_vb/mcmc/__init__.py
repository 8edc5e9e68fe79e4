from __future__ import annotations

import time
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, PrivateAttr, model_validator
from scipy.linalg import cho_solve_banded, cholesky_banded, solve_banded
from scipy.stats import norm

from efficient_vb.config import McmcSettings
from efficient_vb.dataset import Dataset
from efficient_vb.draws import DrawSet
from efficient_vb.exceptions import ConfigurationError, DomainModel, ParameterDomainError
from efficient_vb.logging import logger
from efficient_vb.model import LOG_2PI
from efficient_vb.model.sv import RHO_MAX, SvModel

LOG_CHI2_MEAN = -1.2704

KSC_WEIGHTS = np.array([0.00730, 0.10556, 0.00002, 0.04395, 0.34001, 0.24566, 0.25750])
KSC_MEANS = np.array([-10.12999, -3.97281, -8.56686, 2.77786, 0.61942, 1.79518, -1.08819]) + LOG_CHI2_MEAN
KSC_VARIANCES = np.array([5.79596, 2.61369, 5.17950, 0.16735, 0.64009, 0.34023, 1.26261])


class MixtureApprox(DomainModel):
    """A univariate Gaussian mixture sum_i w_i N(m_i, v_i).

    Attributes:
        weights: Component weights.
        means: Component means.
        variances: Component variances.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    @model_validator(mode="after")
    def _check(self):
        if not (self.weights.shape == self.means.shape == self.variances.shape):
            raise ParameterDomainError("Mixture weights, means and variances must have equal length")
        if np.any(self.weights <= 0.0) or abs(self.weights.sum() - 1.0) > 1e-10:
            raise ParameterDomainError("Mixture weights must be positive and sum to one")
        if np.any(self.variances <= 0.0):
            raise ParameterDomainError("Mixture variances must be positive")
        return self

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    def component_log_densities(self, u: np.ndarray) -> np.ndarray:
        """log(w_i N(u; m_i, v_i)) with a trailing component axis."""
        u = np.asarray(u, dtype=float)[..., None]
        return np.log(self.weights) + norm.logpdf(u, self.means, np.sqrt(self.variances))

    def log_density(self, u: np.ndarray) -> np.ndarray:
        comps = self.component_log_densities(u)
        top = comps.max(axis=-1)
        return top + np.log(np.sum(np.exp(comps - top[..., None]), axis=-1))

    def density(self, u: np.ndarray) -> np.ndarray:
        return np.exp(self.log_density(u))

    def mean(self) -> float:
        return float(self.weights @ self.means)

    def variance(self) -> float:
        return float(self.weights @ (self.variances + self.means**2) - self.mean() ** 2)

    def sample_indicators(self, u: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Component indicators drawn from their posterior given residuals u."""
        comps = self.component_log_densities(u)
        probs = np.exp(comps - comps.max(axis=-1, keepdims=True))
        cumulative = np.cumsum(probs, axis=-1)
        draws = rng.uniform(size=cumulative.shape[:-1] + (1,)) * cumulative[..., -1:]
        return np.minimum(np.sum(draws > cumulative, axis=-1), self.n_components - 1)


def ksc_mixture() -> MixtureApprox:
    """The seven-component approximation of the log chi-square(1) density.

    Example:
        >>> round(ksc_mixture().mean(), 2)
        -1.27
    """
    return MixtureApprox(weights=KSC_WEIGHTS.copy(), means=KSC_MEANS.copy(), variances=KSC_VARIANCES.copy())


def ar1_precision(n_times: int, rho: float, sigma2: float) -> Tuple[np.ndarray, np.ndarray]:
    """Diagonal and off-diagonal of the stationary AR(1) precision matrix."""
    diag = np.full(n_times, (1.0 + rho**2) / sigma2)
    if n_times == 1:
        diag[0] = (1.0 - rho**2) / sigma2
    else:
        diag[0] = diag[-1] = 1.0 / sigma2
    off = np.full(n_times - 1, -rho / sigma2)
    return diag, off


def _upper_bands(diag: np.ndarray, off: np.ndarray) -> np.ndarray:
    bands = np.zeros((2, diag.shape[0]))
    bands[0, 1:] = off
    bands[1] = diag
    return bands


def precision_mean(diag: np.ndarray, off: np.ndarray, linear: np.ndarray) -> np.ndarray:
    """P^{-1} linear for a tridiagonal precision P."""
    factor = cholesky_banded(_upper_bands(diag, off), lower=False)
    return cho_solve_banded((factor, False), linear)


def precision_sampler(
    diag: np.ndarray, off: np.ndarray, linear: np.ndarray, rng: np.random.Generator
) -> Tuple[np.ndarray, float]:
    """Draw x ~ N(P^{-1} linear, P^{-1}) for a tridiagonal precision P.

    With P = U'U the draw is mean + U^{-1} z, which costs O(T).

    Returns:
        The draw and its log density.
    """
    factor = cholesky_banded(_upper_bands(diag, off), lower=False)
    mean = cho_solve_banded((factor, False), linear)
    z = rng.standard_normal(diag.shape[0])
    x = mean + solve_banded((0, 1), factor, z, check_finite=False)
    log_density = -0.5 * diag.shape[0] * LOG_2PI + np.sum(np.log(factor[1])) - 0.5 * z @ z
    return x, float(log_density)


def conditional_state_precision(
    y_star: np.ndarray, indicators: np.ndarray, x_bar: float, rho: float, sigma2: float, mixture: MixtureApprox
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Tridiagonal precision and linear term of p(x | y*, s, theta).

    Given the indicators, y*_t = x_t + N(m_{s_t}, v_{s_t}), which is linear-Gaussian.
    """
    diag, off = ar1_precision(y_star.shape[0], rho, sigma2)
    prior_linear = diag * x_bar
    prior_linear[1:] += off * x_bar
    prior_linear[:-1] += off * x_bar
    variances = mixture.variances[indicators]
    return diag + 1.0 / variances, off, prior_linear + (y_star - mixture.means[indicators]) / variances


def draw_states(
    y_star: np.ndarray,
    indicators: np.ndarray,
    x_bar: float,
    rho: float,
    sigma2: float,
    rng: np.random.Generator,
    mixture: Optional[MixtureApprox] = None,
) -> Tuple[np.ndarray, float]:
    """Step 1 of the sampler: the whole log-variance path given the mixture indicators."""
    mixture = mixture or ksc_mixture()
    diag, off, linear = conditional_state_precision(y_star, indicators, x_bar, rho, sigma2, mixture)
    return precision_sampler(diag, off, linear, rng)


def level_conditional(x: np.ndarray, rho: float, sigma2: float, prior_var: float = 1000.0) -> Tuple[float, float]:
    """Mean and variance of the Gaussian full conditional of x_bar."""
    n_times = x.shape[0]
    var = 1.0 / (1.0 / prior_var + ((n_times - 1) * (1.0 - rho) ** 2 + (1.0 - rho**2)) / sigma2)
    mean = var * ((1.0 - rho**2) * x[0] / sigma2 + (1.0 - rho) / sigma2 * np.sum(x[1:] - rho * x[:-1]))
    return float(mean), float(var)


def variance_conditional(x: np.ndarray, x_bar: float, rho: float, alpha: float, beta: float) -> Tuple[float, float]:
    """Shape and rate of the inverse-gamma full conditional of sigma^2."""
    resid = x[1:] - rho * x[:-1] - x_bar * (1.0 - rho)
    rate = beta + 0.5 * ((x[0] - x_bar) ** 2 * (1.0 - rho**2) + np.sum(resid**2))
    return float(alpha + 0.5 * x.shape[0]), float(rate)


def persistence_proposal(x: np.ndarray, x_bar: float, sigma2: float) -> Tuple[float, float]:
    """Mean and variance of the Gaussian proposal for rho."""
    centered = x - x_bar
    var = sigma2 / np.sum(centered[:-1] ** 2)
    mean = var * np.sum(centered[1:] * centered[:-1]) / sigma2
    return float(mean), float(var)


def persistence_log_target(rho: float, x: np.ndarray, x_bar: float, sigma2: float) -> float:
    """log p(rho | x, x_bar, sigma^2) up to a constant, flat prior on (0, 0.995)."""
    centered = x - x_bar
    resid = centered[1:] - rho * centered[:-1]
    return float(
        0.5 * np.log(1.0 - rho**2) - (1.0 - rho**2) * centered[0] ** 2 / (2.0 * sigma2) - resid @ resid / (2.0 * sigma2)
    )


def sample_persistence(
    x: np.ndarray, x_bar: float, rho: float, sigma2: float, rng: np.random.Generator
) -> Tuple[float, bool]:
    """Step 4: independence Metropolis-Hastings update of rho."""
    if x.shape[0] < 2 or not np.any(x[:-1] != x_bar):
        return rho, False
    mean, var = persistence_proposal(x, x_bar, sigma2)
    proposal = mean + np.sqrt(var) * rng.standard_normal()
    if not 0.0 < proposal < RHO_MAX:
        return rho, False
    sd = np.sqrt(var)
    log_ratio = (
        persistence_log_target(proposal, x, x_bar, sigma2)
        - persistence_log_target(rho, x, x_bar, sigma2)
        + norm.logpdf(rho, mean, sd)
        - norm.logpdf(proposal, mean, sd)
    )
    if np.log(rng.uniform()) < log_ratio:
        return float(proposal), True
    return rho, False


def transformed_observations(y: np.ndarray, offset: float = 1e-4) -> np.ndarray:
    """y* = log(y^2 + offset)."""
    return np.log(np.asarray(y, dtype=float) ** 2 + offset)


class KscStateSampler(BaseModel):
    """Draws SV state paths through the mixture representation.

    Each call draws the indicators given the previous path and then the whole path given the
    indicators, one sweep of a Gibbs sampler targeting p(x|y, theta).

    Attributes:
        model: The SV model.
        data: Univariate observations.
        offset: Offset inside log(y^2 + offset).
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    model: SvModel
    data: Dataset
    offset: float = 1e-4

    _y_star: np.ndarray = PrivateAttr()
    _x: np.ndarray = PrivateAttr()
    _mixture: MixtureApprox = PrivateAttr()

    def model_post_init(self, __context):
        if self.data.n_series != 1:
            raise ConfigurationError("The mixture state sampler needs a univariate series")
        self._y_star = transformed_observations(self.data.observations[:, 0], self.offset)
        self._x = self._y_star - LOG_CHI2_MEAN
        self._mixture = ksc_mixture()

    def sample_given(self, params: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, float]:
        x_bar, rho, sigma = params[:3]
        indicators = self._mixture.sample_indicators(self._y_star - self._x, rng)
        x, log_density = draw_states(self._y_star, indicators, x_bar, rho, sigma**2, rng, self._mixture)
        self._x = x
        return x[:, None], log_density


def mcmc_sv(
    data: Dataset, settings: Optional[McmcSettings] = None, seed: Optional[int] = None, model: Optional[SvModel] = None
) -> DrawSet:
    """Gibbs sampler for the SV model.

    Each sweep draws the mixture indicators and the state path (precision sampler), then
    x_bar from its Gaussian conditional, sigma^2 from its inverse-gamma conditional and rho by
    an independence Metropolis-Hastings step.

    Args:
        data: Univariate observations.
        settings: Burn-in, number of kept draws, offset and whether to keep state paths.
        seed: Seed of the chain.
        model: SV model holding the prior hyperparameters.

    Returns:
        Draws of (x_bar, rho, sigma) after burn-in, and the state paths when requested.
    """
    settings = settings or McmcSettings()
    model = model or SvModel()
    if data.n_series != 1:
        raise ConfigurationError("MCMC for the SV model needs a univariate series")
    rng = np.random.default_rng(seed)
    mixture = ksc_mixture()
    y_star = transformed_observations(data.observations[:, 0], settings.offset)
    n_times = data.n_times

    x_bar, rho, sigma = model.initial_guess(data)
    sigma2 = sigma**2
    x = y_star - LOG_CHI2_MEAN

    total = settings.burn_in + settings.draws
    values = np.empty((settings.draws, 3))
    states = np.empty((settings.draws, n_times, 1)) if settings.store_states else None
    timings = {"states": 0.0, "parameters": 0.0}
    accepted = 0

    logger.info(f"MCMC for SV: {settings.burn_in} burn-in and {settings.draws} draws, T={n_times}")
    for it in range(total):
        start = time.perf_counter()
        indicators = mixture.sample_indicators(y_star - x, rng)
        x, _ = draw_states(y_star, indicators, x_bar, rho, sigma2, rng, mixture)
        timings["states"] += time.perf_counter() - start

        start = time.perf_counter()
        mean, var = level_conditional(x, rho, sigma2, model.prior_level_var)
        x_bar = mean + np.sqrt(var) * rng.standard_normal()
        shape, rate = variance_conditional(x, x_bar, rho, model.prior_alpha, model.prior_beta)
        sigma2 = rate / rng.gamma(shape)
        rho, moved = sample_persistence(x, x_bar, rho, sigma2, rng)
        accepted += moved
        timings["parameters"] += time.perf_counter() - start

        if it >= settings.burn_in:
            k = it - settings.burn_in
            values[k] = (x_bar, rho, np.sqrt(sigma2))
            if states is not None:
                states[k, :, 0] = x

    acceptance = accepted / max(total, 1)
    logger.info(f"MCMC finished: rho acceptance {acceptance:.3f}, {sum(timings.values()):.2f}s")
    return DrawSet(
        names=list(model.parameter_names),
        values=values,
        method="mcmc",
        states=states,
        timings=timings,
        info={"rho_acceptance": acceptance},
    )
