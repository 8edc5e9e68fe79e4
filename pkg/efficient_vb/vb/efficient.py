from __future__ import annotations

import time
from typing import Optional

import numpy as np

from efficient_vb.config import EfficientVBSettings
from efficient_vb.dataset import Dataset
from efficient_vb.eis import KernelParams, ProxyParams, StateApprox, calibrate
from efficient_vb.exceptions import CalibrationDegeneracyError
from efficient_vb.logging import logger
from efficient_vb.model import ModelSpec
from efficient_vb.vb import (
    CALIBRATION_STREAM,
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


def _recalibrate(model, data, proxy, kernel, settings, seed, iteration):
    calibration_seed = [seed, CALIBRATION_STREAM, iteration]
    try:
        return calibrate(model, data, proxy, kernel, settings.n_paths, calibration_seed)
    except CalibrationDegeneracyError:
        # the warm start may be invalid under the new proxy
        return calibrate(model, data, proxy, None, settings.n_paths, calibration_seed)


def fit_efficient_vb(
    model: ModelSpec,
    data: Dataset,
    settings: Optional[EfficientVBSettings] = None,
    seed: Optional[int] = None,
    init: Optional[VariationalParams] = None,
) -> FitResult:
    """Efficient VB: stochastic gradient ascent on the ELBO with an EIS state approximation.

    Every `recalibration_interval` iterations the proxy is set to the constrained image of
    the current variational mean and the kernel is recalibrated, warm-started from its
    previous value. Each iteration draws one (z, eps), one state path from q(x|y), and takes
    one ADADELTA step.

    Args:
        model: The state space model.
        data: Observed data.
        settings: Optimizer settings.
        seed: Seed of the run.
        init: Starting variational parameters. By default the transformed initial guess
            of the model with zero factors and diagonal `settings.init_scale`.

    Returns:
        The fit.
    """
    settings = settings or EfficientVBSettings()
    seed = resolve_seed(seed)
    data = model.prepare(data)
    n_factors = settings.n_factors if settings.n_factors is not None else default_factor_count(model)
    lam = init or VariationalParams.initial(model.transform(model.initial_guess(data)), n_factors, settings.init_scale)
    dim, n_factors = lam.dim, lam.n_factors

    vector = lam.to_vector()
    state = AdadeltaState.fresh(vector.size, settings.decay, settings.eps)
    plateau = ElboPlateau(settings=settings.plateau) if settings.plateau else None
    rng = np.random.default_rng(seed)

    trace = np.full(settings.iterations, np.nan)
    timings = {"calibration": 0.0, "sampling": 0.0, "gradient": 0.0}
    kernel: Optional[KernelParams] = None
    proxy: Optional[ProxyParams] = None
    approx: Optional[StateApprox] = None
    clamp_events = 0
    skipped = 0
    n_done = 0

    logger.info(f"Efficient VB on model '{model.name}': {settings.iterations} iterations, T={data.n_times}")
    for j in range(settings.iterations):
        if j % settings.recalibration_interval == 0:
            start = time.perf_counter()
            proxy = ProxyParams.from_theta(model, lam.mu)
            kernel = _recalibrate(model, data, proxy, kernel, settings, seed, j)
            approx = StateApprox(model=model, data=data, proxy=proxy, kernel=kernel)
            clamp_events += kernel.clamp_events
            timings["calibration"] += time.perf_counter() - start
            logger.debug(f"Iteration {j}: recalibrated at {proxy}, clamp events {kernel.clamp_events}")

        start = time.perf_counter()
        z = rng.standard_normal(n_factors)
        eps = rng.standard_normal(dim)
        paths, log_qx = approx.sample(rng, 1)
        x = paths[0]
        timings["sampling"] += time.perf_counter() - start

        start = time.perf_counter()
        theta = reparam_draw(lam, z, eps)
        with np.errstate(all="ignore"):
            bracket = model.log_joint_grad(theta, x, data) - grad_log_q(lam, theta)
            grad = chain_rule(lam, bracket, z, eps)
            trace[j] = model.log_joint(theta, x, data) - lam.log_density(theta) - log_qx[0]
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
        logger.warning(f"Efficient VB skipped {skipped} updates with non-finite gradients")
    logger.info(f"Efficient VB finished: {sum(timings.values()):.2f}s")
    return FitResult(
        method="efficient-vb",
        seed=seed,
        variational=lam,
        kernel=kernel,
        proxy=proxy,
        elbo_trace=trace[:n_done],
        timings=timings,
        clamp_events=clamp_events,
        skipped_updates=skipped,
    )
