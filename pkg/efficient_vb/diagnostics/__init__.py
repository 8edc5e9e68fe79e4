from __future__ import annotations

import json
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ValidationError, model_validator

from efficient_vb.config import DiagnosticsSettings
from efficient_vb.draws import DrawSet
from efficient_vb.exceptions import ConfigurationError, DomainModel, ParameterDomainError, domain_error
from efficient_vb.logging import logger

LOWER_QUANTILE = 0.005
UPPER_QUANTILE = 0.995


class ParameterSummary(DomainModel):
    """Posterior mean, standard deviation and central 99% interval of one quantity."""

    name: str
    mean: float
    std: float
    lower: float
    upper: float

    @model_validator(mode="after")
    def _monotone(self):
        if self.lower > self.upper:
            raise ParameterDomainError(f"Quantiles of '{self.name}' are not monotone")
        return self


class ElboSummary(BaseModel):
    n_iterations: int
    first: Optional[float] = None
    maximum: Optional[float] = None
    final_average: Optional[float] = None


class DiagnosticsReport(BaseModel):
    """Plot-ready summary of one method's posterior.

    Attributes:
        method: Method tag.
        parameters: One summary per parameter column.
        state_means: Posterior mean of x_t per time point and state dimension.
        state_window: (first zero-based time index, window length) of the correlation block.
        state_correlation: Posterior correlations of the states inside the window. Undefined
            correlations are None.
        state_lag_correlations: Average correlation between x_t and x_{t+k} over the window,
            for k = 1, ..., max_lag.
        elbo: ELBO trace summary (variational methods).
        timings: Wall clock per phase in seconds.
    """

    method: str
    parameters: List[ParameterSummary]
    state_means: Optional[List[List[float]]] = None
    state_window: Optional[List[int]] = None
    state_correlation: Optional[List[List[Optional[float]]]] = None
    state_lag_correlations: Optional[List[Optional[float]]] = None
    elbo: Optional[ElboSummary] = None
    timings: Dict[str, float] = {}

    def parameter(self, name: str) -> ParameterSummary:
        for summary in self.parameters:
            if summary.name == name:
                return summary
        raise KeyError(name)

    def save_json(self, path: str):
        with open(path, "w") as f:
            json.dump(self.model_dump(mode="json"), f, indent=2)
        logger.info(f"Wrote diagnostics report to {path}")

    @staticmethod
    def load_json(path: str) -> DiagnosticsReport:
        with open(path) as f:
            raw = json.load(f)
        try:
            return DiagnosticsReport.model_validate(raw)
        except ValidationError as error:
            raise domain_error(error) from error

    def __str__(self):
        return f"DiagnosticsReport(method={self.method}, parameters={[p.name for p in self.parameters]})"

    def __repr__(self):
        return self.__str__()


def _optional(value: float) -> Optional[float]:
    return float(value) if np.isfinite(value) else None


def correlation_matrix(columns: np.ndarray) -> List[List[Optional[float]]]:
    """Correlations between the columns of a draws matrix, None where undefined."""
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = np.atleast_2d(np.corrcoef(columns, rowvar=False))
    return [[_optional(v) for v in row] for row in corr]


def lag_correlations(states: np.ndarray, start: int, size: int, max_lag: int) -> List[Optional[float]]:
    """Average over t in the window and state dimensions of corr(x_t, x_{t+k})."""
    n_times = states.shape[1]
    out = []
    with np.errstate(divide="ignore", invalid="ignore"):
        for lag in range(1, max_lag + 1):
            values = []
            for t in range(start, min(start + size, n_times - lag)):
                for i in range(states.shape[2]):
                    values.append(np.corrcoef(states[:, t, i], states[:, t + lag, i])[0, 1])
            values = np.array(values)
            values = values[np.isfinite(values)]
            out.append(float(np.mean(values)) if values.size else None)
    return out


def summarize_elbo(trace: np.ndarray, window: int = 100) -> ElboSummary:
    trace = np.asarray(trace, dtype=float)
    finite = trace[np.isfinite(trace)]
    tail = trace[-window:]
    tail = tail[np.isfinite(tail)]
    return ElboSummary(
        n_iterations=int(trace.shape[0]),
        first=_optional(trace[0]) if trace.size else None,
        maximum=float(finite.max()) if finite.size else None,
        final_average=float(tail.mean()) if tail.size else None,
    )


def diagnostics(
    draws: DrawSet,
    states: Optional[np.ndarray] = None,
    settings: Optional[DiagnosticsSettings] = None,
    elbo_trace: Optional[np.ndarray] = None,
    timings: Optional[Dict[str, float]] = None,
) -> DiagnosticsReport:
    """Summarize posterior draws.

    Args:
        draws: Parameter draws. Its own state draws are used when `states` is None.
        states: Optional state path draws, (n_draws, T, n).
        settings: Correlation window and lags.
        elbo_trace: ELBO trace of a variational fit.
        timings: Wall clock per phase; defaults to the draw set's timings.

    Returns:
        The report.

    Example:
        >>> import numpy as np
        >>> report = diagnostics(DrawSet(names=["a"], values=np.ones((5, 1))))
        >>> report.parameter("a").lower == report.parameter("a").upper
        True
    """
    settings = settings or DiagnosticsSettings()
    values = draws.values
    means = values.mean(axis=0)
    stds = values.std(axis=0)
    lower, upper = np.quantile(values, [LOWER_QUANTILE, UPPER_QUANTILE], axis=0)
    parameters = [
        ParameterSummary(name=name, mean=means[i], std=stds[i], lower=lower[i], upper=upper[i])
        for i, name in enumerate(draws.names)
    ]

    report = {}
    states = states if states is not None else draws.states
    if states is not None:
        n_times = states.shape[1]
        start, size = settings.window_start, settings.window_size
        if start + size > n_times:
            raise ConfigurationError(f"Correlation window [{start}, {start + size}) exceeds T={n_times}")
        block = states[:, start : start + size, :].reshape(states.shape[0], -1)
        report.update(
            state_means=states.mean(axis=0).tolist(),
            state_window=[start, size],
            state_correlation=correlation_matrix(block),
            state_lag_correlations=lag_correlations(states, start, size, settings.max_lag),
        )

    return DiagnosticsReport(
        method=draws.method,
        parameters=parameters,
        elbo=summarize_elbo(elbo_trace) if elbo_trace is not None else None,
        timings=timings if timings is not None else dict(draws.timings),
        **report,
    )
