from __future__ import annotations

import time
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict

from efficient_vb.config import PmcmcSettings
from efficient_vb.dataset import Dataset
from efficient_vb.draws import DrawSet
from efficient_vb.exceptions import CapabilityError
from efficient_vb.kalman import exact_log_likelihood
from efficient_vb.logging import logger
from efficient_vb.model import ModelSpec, covariance_factor


def multinomial_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = weights.shape[0]
    return rng.choice(n, size=n, p=weights)


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = weights.shape[0]
    positions = (rng.uniform() + np.arange(n)) / n
    return np.minimum(np.searchsorted(np.cumsum(weights), positions), n - 1)


RESAMPLERS = {"multinomial": multinomial_resample, "systematic": systematic_resample}


class ParticleSystem(BaseModel):
    """Particles of a bootstrap filter.

    Attributes:
        particles: Particle states, (N_p, n).
        weights: Normalized weights, (N_p,).
        log_likelihood: Running log of the likelihood estimate.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    particles: np.ndarray
    weights: np.ndarray
    log_likelihood: float = 0.0

    @staticmethod
    def initial(mean: np.ndarray, factor: np.ndarray, n_particles: int, rng: np.random.Generator) -> ParticleSystem:
        particles = mean + rng.standard_normal((n_particles, mean.shape[0])) @ factor.T
        return ParticleSystem(particles=particles, weights=np.full(n_particles, 1.0 / n_particles))

    @property
    def n_particles(self) -> int:
        return self.particles.shape[0]

    def effective_sample_size(self) -> float:
        return float(1.0 / np.sum(self.weights**2))

    def resample(self, rng: np.random.Generator, scheme: str = "multinomial"):
        self.particles = self.particles[RESAMPLERS[scheme](self.weights, rng)]
        self.weights = np.full(self.n_particles, 1.0 / self.n_particles)

    def propagate(self, intercept: np.ndarray, matrix: np.ndarray, factor: np.ndarray, rng: np.random.Generator):
        noise = rng.standard_normal(self.particles.shape) @ factor.T
        self.particles = intercept + self.particles @ matrix.T + noise

    def reweight(self, log_weights: np.ndarray) -> bool:
        """Weight by exp(log_weights) and add the log mean weight to the estimate.

        Returns:
            False when every weight is zero.
        """
        top = np.max(log_weights)
        if not np.isfinite(top):
            return False
        w = self.weights * np.exp(log_weights - top)
        total = np.sum(w)
        self.log_likelihood += float(top + np.log(total))
        self.weights = w / total
        return True


class ParticleEstimate(BaseModel):
    """A particle-filter log-likelihood estimate.

    Attributes:
        log_likelihood: Log of the unbiased likelihood estimate, -inf when degenerate.
        degenerate: All weights vanished at `failed_at`.
        failed_at: Zero-based time index of the failure.
    """

    log_likelihood: float
    degenerate: bool = False
    failed_at: Optional[int] = None


def bootstrap_pf_loglik(
    model: ModelSpec,
    params: np.ndarray,
    data: Dataset,
    n_particles: int = 1000,
    seed=None,
    resampling: str = "multinomial",
) -> ParticleEstimate:
    """Bootstrap particle filter estimate of log p(y|theta).

    Particles are drawn from the state equation and weighted by the measurement density,
    with resampling before every propagation step.

    Args:
        model: The model.
        params: Constrained parameters.
        data: Observations, with covariates attached when the model needs them.
        n_particles: Number of particles.
        seed: Seed, or a Generator to draw from.
        resampling: "multinomial" or "systematic".

    Returns:
        The estimate.
    """
    rng = np.random.default_rng(seed)
    params = np.asarray(params, dtype=float)
    moments = model.transition_moments(params, data)
    factor = covariance_factor(moments.cov)
    system = ParticleSystem.initial(moments.initial_mean, covariance_factor(moments.initial_cov), n_particles, rng)

    for t in range(data.n_times):
        if t > 0:
            system.resample(rng, resampling)
            system.propagate(moments.intercept, moments.matrix, factor, rng)
        log_w = model.measurement_logdensity_at(data, t, system.particles, params)
        if not system.reweight(log_w):
            logger.warning(f"All particle weights vanished at t={t}")
            return ParticleEstimate(log_likelihood=-np.inf, degenerate=True, failed_at=t)
    return ParticleEstimate(log_likelihood=system.log_likelihood)


def _split_blocks(dim: int, rng: np.random.Generator):
    order = rng.permutation(dim)
    half = dim // 2
    return [block for block in (order[:half], order[half:]) if block.size]


def pmcmc(model: ModelSpec, data: Dataset, settings: Optional[PmcmcSettings] = None, seed: Optional[int] = None) -> DrawSet:
    """Particle marginal Metropolis-Hastings with a random two-block split.

    Every iteration the unconstrained parameters are split at random into two blocks, each
    updated by a Gaussian random walk. The likelihood in the acceptance ratio is the bootstrap
    filter estimate (or the exact Kalman likelihood). During burn-in the per-coordinate step
    sizes are multiplied or divided by `adapt_factor` whenever the acceptance rate over the
    last `adapt_window` iterations leaves [target_low, target_high]; they are frozen afterwards.

    Returns:
        Draws of the model's reported quantities after burn-in.

    Raises:
        CapabilityError: The data hold more than one series.
    """
    settings = settings or PmcmcSettings()
    data = model.prepare(data)
    if data.n_series != 1:
        raise CapabilityError(f"PMCMC handles a single series, got {data.n_series}")
    rng = np.random.default_rng(seed)

    def log_likelihood(theta: np.ndarray) -> float:
        params = model.inverse_transform(theta)
        if settings.likelihood == "exact":
            return exact_log_likelihood(model, params, data)
        return bootstrap_pf_loglik(model, params, data, settings.n_particles, rng, settings.resampling).log_likelihood

    theta = model.transform(model.initial_guess(data))
    dim = theta.size
    steps = np.full(dim, settings.initial_step)
    current_ll = log_likelihood(theta)
    current_lp = model.log_prior(theta)[0]

    proposed = np.zeros(dim)
    accepted = np.zeros(dim)
    rows = []
    n_moves = 0
    n_accepted = 0
    start = time.perf_counter()
    total = settings.burn_in + settings.draws

    logger.info(f"PMCMC on model '{model.name}': {settings.burn_in} burn-in and {settings.draws} draws")
    for it in range(total):
        for block in _split_blocks(dim, rng):
            candidate = theta.copy()
            candidate[block] += steps[block] * rng.standard_normal(block.size)
            candidate_ll = log_likelihood(candidate)
            candidate_lp = model.log_prior(candidate)[0]
            proposed[block] += 1
            n_moves += it >= settings.burn_in
            if not np.isfinite(candidate_ll):
                continue
            if np.isfinite(current_ll):
                log_alpha = min(candidate_ll + candidate_lp - current_ll - current_lp, 0.0)
            else:
                log_alpha = 0.0
            if np.log(rng.uniform()) < log_alpha:
                theta, current_ll, current_lp = candidate, candidate_ll, candidate_lp
                accepted[block] += 1
                n_accepted += it >= settings.burn_in

        if it < settings.burn_in and (it + 1) % settings.adapt_window == 0:
            rates = accepted / np.maximum(proposed, 1.0)
            steps = np.where(rates < settings.target_low, steps / settings.adapt_factor, steps)
            steps = np.where(rates > settings.target_high, steps * settings.adapt_factor, steps)
            logger.debug(f"PMCMC iteration {it + 1}: acceptance {np.round(rates, 3)}, steps {np.round(steps, 4)}")
            proposed[:] = 0.0
            accepted[:] = 0.0
        if it >= settings.burn_in:
            rows.append(model.describe(theta))

    elapsed = time.perf_counter() - start
    names = list(rows[0])
    values = np.array([[row[name] for name in names] for row in rows])
    acceptance = n_accepted / max(n_moves, 1)
    logger.info(f"PMCMC finished: acceptance {acceptance:.3f}, {elapsed:.2f}s")
    return DrawSet(
        names=names,
        values=values,
        method="pmcmc",
        timings={"sampling": elapsed},
        info={"acceptance": acceptance, **{f"step[{i + 1}]": float(s) for i, s in enumerate(steps)}},
    )
