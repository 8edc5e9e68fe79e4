from __future__ import annotations

import time
from typing import Optional

import numpy as np

from efficient_vb.config import HybridVBSettings
from efficient_vb.dataset import Dataset
from efficient_vb.logging import logger
from efficient_vb.model import ModelSpec
from efficient_vb.vb import (
    AdadeltaState,
    ElboPlateau,
    FitResult,
    VariationalParams,
    adadelta_step,
    chain_rule,
    default_factor_count,
    grad_log_q,
    reparam_draw,
    resolve_seed,
)


def fit_hybrid_vb(
    model: ModelSpec,
    data: Dataset,
    settings: Optional[HybridVBSettings] = None,
    seed: Optional[int] = None,
    exact_state_sampler=None,
) -> FitResult:
    """Hybrid VB: q(theta) is optimized while states come from p(x|y, theta).

    Args:
        model: The state space model.
        data: Observed data.
        settings: Optimizer settings.
        seed: Seed of the run.
        exact_state_sampler: Object with `sample_given(params, rng) -> (x, log density)`.
            Defaults to the model's own sampler; models without one raise CapabilityError.

    Returns:
        The fit. The ELBO trace uses the sampler's log density as log q(x).
    """
    settings = settings or HybridVBSettings()
    seed = resolve_seed(seed)
    data = model.prepare(data)
    sampler = exact_state_sampler if exact_state_sampler is not None else model.exact_state_sampler(data)
    n_factors = settings.n_factors if settings.n_factors is not None else default_factor_count(model)
    lam = VariationalParams.initial(model.transform(model.initial_guess(data)), n_factors, settings.init_scale)
    dim = lam.dim

    vector = lam.to_vector()
    state = AdadeltaState.fresh(vector.size, settings.decay, settings.eps)
    plateau = ElboPlateau(settings=settings.plateau) if settings.plateau else None
    rng = np.random.default_rng(seed)

    trace = np.full(settings.iterations, np.nan)
    timings = {"sampling": 0.0, "gradient": 0.0}
    skipped = 0
    n_done = 0

    logger.info(f"Hybrid VB on model '{model.name}': {settings.iterations} iterations, T={data.n_times}")
    for j in range(settings.iterations):
        start = time.perf_counter()
        z = rng.standard_normal(n_factors)
        eps = rng.standard_normal(dim)
        theta = reparam_draw(lam, z, eps)
        x, log_qx = sampler.sample_given(model.inverse_transform(theta), rng)
        timings["sampling"] += time.perf_counter() - start

        start = time.perf_counter()
        with np.errstate(all="ignore"):
            bracket = model.log_joint_grad(theta, x, data) - grad_log_q(lam, theta)
            grad = chain_rule(lam, bracket, z, eps)
            trace[j] = model.log_joint(theta, x, data) - lam.log_density(theta) - log_qx
        if np.all(np.isfinite(grad)):
            vector, state = adadelta_step(state, vector, grad)
            lam = VariationalParams.from_vector(vector, dim, n_factors)
        else:
            skipped += 1
            logger.debug(f"Iteration {j}: non-finite gradient, update skipped")
        timings["gradient"] += time.perf_counter() - start
        n_done = j + 1

        if plateau is not None and plateau.reached(trace, n_done):
            logger.info(f"ELBO plateau reached after {n_done} iterations")
            break

    if skipped:
        logger.warning(f"Hybrid VB skipped {skipped} updates with non-finite gradients")
    logger.info(f"Hybrid VB finished: {sum(timings.values()):.2f}s")
    return FitResult(
        method="hybrid-vb",
        seed=seed,
        variational=lam,
        elbo_trace=trace[:n_done],
        timings=timings,
        skipped_updates=skipped,
    )
