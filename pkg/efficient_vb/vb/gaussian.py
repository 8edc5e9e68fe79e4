from __future__ import annotations

import time
from typing import Optional

import numpy as np

from efficient_vb.config import GaussianVBSettings
from efficient_vb.dataset import Dataset
from efficient_vb.logging import logger
from efficient_vb.model import ModelSpec
from efficient_vb.vb import (
    AdadeltaState,
    ElboPlateau,
    FitResult,
    StateBlockParams,
    VariationalParams,
    adadelta_step,
    chain_rule,
    default_factor_count,
    grad_log_q,
    reparam_draw,
    resolve_seed,
)


def state_block_gradient(block: StateBlockParams, model_grad_x: np.ndarray, eps_x: np.ndarray) -> np.ndarray:
    """Gradient over (mu_x, band entries of C) for x = mu_x + C eps_x.

    `model_grad_x` is the gradient of log p(y|x)p(x|theta) at x; the gradient of -log q(x)
    there is C^{-T} eps_x. Entry (j + k, j) of C gets g_{j+k} eps_j.
    """
    g = model_grad_x + block.solve_transpose(eps_x)
    band_grad = np.zeros_like(block.bands)
    for k in range(block.bands.shape[0]):
        band_grad[k, : block.size - k] = g[k:] * eps_x[: block.size - k]
    return np.concatenate([g, band_grad[block.band_mask()]])


def fit_gaussian_vb(
    model: ModelSpec,
    data: Dataset,
    settings: Optional[GaussianVBSettings] = None,
    seed: Optional[int] = None,
) -> FitResult:
    """Gaussian VB over parameters and states jointly.

    q(theta, x) = q(theta) q(x) with q(x) = N(mu_x, C C') and C lower triangular with
    `n_bands` bands (per state dimension). Both blocks are updated together by ADADELTA.
    The diagonal of C is kept above `settings.diag_floor`.
    """
    settings = settings or GaussianVBSettings()
    seed = resolve_seed(seed)
    data = model.prepare(data)
    n_factors = settings.n_factors if settings.n_factors is not None else default_factor_count(model)
    start_params = model.initial_guess(data)
    lam = VariationalParams.initial(model.transform(start_params), n_factors, settings.init_scale)
    block = StateBlockParams.initial(
        model.initial_state_guess(data, start_params),
        n_bands=settings.n_bands,
        scale=settings.state_init_scale,
        dim_state=model.dim_state,
    )
    dim = lam.dim
    n_lam = lam.to_vector().size

    vector = np.concatenate([lam.to_vector(), block.to_vector()])
    state = AdadeltaState.fresh(vector.size, settings.decay, settings.eps)
    plateau = ElboPlateau(settings=settings.plateau) if settings.plateau else None
    rng = np.random.default_rng(seed)

    trace = np.full(settings.iterations, np.nan)
    timings = {"sampling": 0.0, "gradient": 0.0}
    skipped = 0
    n_done = 0

    logger.info(f"Gaussian VB on model '{model.name}': {settings.iterations} iterations, T={data.n_times}")
    for j in range(settings.iterations):
        start = time.perf_counter()
        z = rng.standard_normal(n_factors)
        eps = rng.standard_normal(dim)
        eps_x = rng.standard_normal(block.size)
        theta = reparam_draw(lam, z, eps)
        x = block.draw(eps_x)
        timings["sampling"] += time.perf_counter() - start

        start = time.perf_counter()
        with np.errstate(all="ignore"):
            bracket = model.log_joint_grad(theta, x, data) - grad_log_q(lam, theta)
            grad = np.concatenate(
                [
                    chain_rule(lam, bracket, z, eps),
                    state_block_gradient(block, model.state_grad(theta, x, data).ravel(), eps_x),
                ]
            )
            trace[j] = (
                model.log_joint(theta, x, data) - lam.log_density(theta) - block.log_density_from_noise(eps_x)
            )
        if np.all(np.isfinite(grad)):
            vector, state = adadelta_step(state, vector, grad)
            lam = VariationalParams.from_vector(vector[:n_lam], dim, n_factors)
            block = block.from_vector(vector[n_lam:])
            if np.any(block.bands[0] < settings.diag_floor):
                bands = block.bands.copy()
                bands[0] = np.maximum(bands[0], settings.diag_floor)
                block = StateBlockParams(mu_x=block.mu_x, bands=bands, dim_state=block.dim_state)
                vector = np.concatenate([vector[:n_lam], block.to_vector()])
        else:
            skipped += 1
            logger.debug(f"Iteration {j}: non-finite gradient, update skipped")
        timings["gradient"] += time.perf_counter() - start
        n_done = j + 1

        if plateau is not None and plateau.reached(trace, n_done):
            logger.info(f"ELBO plateau reached after {n_done} iterations")
            break

    if skipped:
        logger.warning(f"Gaussian VB skipped {skipped} updates with non-finite gradients")
    logger.info(f"Gaussian VB finished: {sum(timings.values()):.2f}s")
    return FitResult(
        method="gaussian-vb",
        seed=seed,
        variational=lam,
        state_block=block,
        elbo_trace=trace[:n_done],
        timings=timings,
        skipped_updates=skipped,
    )
