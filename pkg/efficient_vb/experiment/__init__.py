from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict

from efficient_vb.config import ExperimentConfig
from efficient_vb.dataset import Dataset
from efficient_vb.diagnostics import DiagnosticsReport, diagnostics
from efficient_vb.draws import DrawSet, state_column_names
from efficient_vb.eis import StateApprox
from efficient_vb.exceptions import CapabilityError, ConfigurationError, EfficientVBError
from efficient_vb.logging import logger
from efficient_vb.mcmc import mcmc_sv
from efficient_vb.model import ModelSpec, get_model, simulate
from efficient_vb.particle import pmcmc
from efficient_vb.vb import DIAGNOSTIC_STREAM, FitResult, fit_efficient_vb, fit_gaussian_vb, fit_hybrid_vb

METHOD_STREAMS = {"efficient-vb": 11, "gaussian-vb": 12, "hybrid-vb": 13, "mcmc": 14, "pmcmc": 15}

HYBRID_WARMUP = 50


def derive_seed(seed: int, *keys: int) -> int:
    """A 63-bit seed for the substream (seed, *keys)."""
    state = np.random.SeedSequence([seed, *keys]).generate_state(1, dtype=np.uint64)[0]
    return int(state >> np.uint64(1))


class MethodOutcome(BaseModel):
    """Draws, fit and diagnostics of one method."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    method: str
    draws: DrawSet
    report: DiagnosticsReport
    fit: Optional[FitResult] = None


class ExperimentResult(BaseModel):
    """Outcomes of an experiment run.

    Attributes:
        output_dir: Artifact directory.
        outcomes: Outcome per method that ran, in configuration order.
        skipped: Reason per method that did not run.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    output_dir: str
    outcomes: Dict[str, MethodOutcome] = {}
    skipped: Dict[str, str] = {}

    def __str__(self):
        return f"ExperimentResult(output_dir={self.output_dir}, methods={list(self.outcomes)}, skipped={list(self.skipped)})"

    def __repr__(self):
        return self.__str__()


def build_model(config: ExperimentConfig) -> ModelSpec:
    return get_model(config.model.name, **config.model.options)


def load_data(config: ExperimentConfig, model: ModelSpec) -> Tuple[Dataset, Optional[np.ndarray]]:
    """The configured dataset and, for simulated data, the true state path."""
    if config.data.path is not None:
        return Dataset.from_csv(config.data.path, config.data.time_column), None
    simulation = config.data.simulation
    params = model.params_from_mapping(simulation.params)
    return simulate(model, params, simulation.n_times, simulation.seed)


def _state_source(method: str, model: ModelSpec, data: Dataset, fit: FitResult, rng: np.random.Generator):
    if method == "efficient-vb":
        if fit.kernel is None:
            return None
        return StateApprox(model=model, data=data, proxy=fit.proxy, kernel=fit.kernel)
    if method == "gaussian-vb":
        return fit.state_block
    sampler = model.exact_state_sampler(data)
    params = model.inverse_transform(fit.variational.mu)
    for _ in range(HYBRID_WARMUP):
        sampler.sample_given(params, rng)
    return sampler


def _report(draws: DrawSet, config: ExperimentConfig, elbo_trace=None, timings=None) -> DiagnosticsReport:
    try:
        return diagnostics(draws, settings=config.diagnostics, elbo_trace=elbo_trace, timings=timings)
    except ConfigurationError as error:
        logger.warning(f"{draws.method}: state diagnostics skipped, {error}")
        bare = DrawSet(names=draws.names, values=draws.values, method=draws.method, timings=draws.timings)
        return diagnostics(bare, settings=config.diagnostics, elbo_trace=elbo_trace, timings=timings)


def fit_method(method: str, model: ModelSpec, data: Dataset, config: ExperimentConfig, seed: int) -> MethodOutcome:
    """Run one inference method and summarize its posterior.

    Raises:
        ConfigurationError: The method does not apply to the model.
        CapabilityError: The model lacks what the method needs.
    """
    data = model.prepare(data)
    if method == "mcmc":
        if model.name != "sv":
            raise ConfigurationError(f"MCMC is available for the 'sv' model only, not '{model.name}'")
        draws = mcmc_sv(data, config.mcmc, seed, model)
        return MethodOutcome(method=method, draws=draws, report=_report(draws, config))
    if method == "pmcmc":
        draws = pmcmc(model, data, config.pmcmc, seed)
        return MethodOutcome(method=method, draws=draws, report=_report(draws, config))

    if method == "efficient-vb":
        fit = fit_efficient_vb(model, data, config.efficient_vb, seed)
    elif method == "gaussian-vb":
        fit = fit_gaussian_vb(model, data, config.gaussian_vb, seed)
    elif method == "hybrid-vb":
        fit = fit_hybrid_vb(model, data, config.hybrid_vb, seed)
    else:
        raise ConfigurationError(f"Unknown method '{method}'")

    rng = np.random.default_rng([seed, DIAGNOSTIC_STREAM])
    n_state_draws = config.diagnostics.n_state_draws
    source = _state_source(method, model, data, fit, rng) if n_state_draws else None
    draws = DrawSet.from_variational(
        model,
        fit.variational,
        config.diagnostics.n_draws,
        rng,
        state_source=source,
        n_state_draws=n_state_draws,
        method=method,
        timings=fit.timings,
    )
    return MethodOutcome(method=method, draws=draws, fit=fit, report=_report(draws, config, fit.elbo_trace, fit.timings))


def _run_guarded(method: str, model: ModelSpec, data: Dataset, config: ExperimentConfig, seed: int):
    try:
        return fit_method(method, model, data, config, seed), None
    except (ConfigurationError, CapabilityError) as error:
        logger.warning(f"Skipping {method} for model '{model.name}': {error}")
        return None, str(error)
    except EfficientVBError as error:
        logger.error(f"{method} failed: {error}")
        return None, str(error)


def _run_methods(
    methods: List[str], model: ModelSpec, data: Dataset, config: ExperimentConfig, keys: Tuple[int, ...] = ()
) -> Tuple[Dict[str, MethodOutcome], Dict[str, str]]:
    with ThreadPoolExecutor(max_workers=config.threads) as pool:
        futures = {
            method: pool.submit(
                _run_guarded, method, model, data, config, derive_seed(config.seed, METHOD_STREAMS[method], *keys)
            )
            for method in methods
        }
        results = {method: future.result() for method, future in futures.items()}
    outcomes = {method: outcome for method, (outcome, _) in results.items() if outcome is not None}
    skipped = {method: reason for method, (_, reason) in results.items() if reason is not None}
    return outcomes, skipped


def write_true_states(x: np.ndarray, data: Dataset, path: Path):
    columns = ["x"] if x.shape[1] == 1 else [f"x{i + 1}" for i in range(x.shape[1])]
    frame = pd.DataFrame(x, columns=columns)
    frame.insert(0, "time", data.time_index)
    frame.to_csv(path, index=False)


def _prepare_output(config: ExperimentConfig) -> Path:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(config.to_yaml())
    return out


def _write_outcome(out: Path, outcome: MethodOutcome, n_state_draws: int):
    method = outcome.method
    draws = outcome.draws
    draws.to_csv(str(out / f"draws_{method}.csv"))
    if draws.states is not None and n_state_draws > 0:
        kept = DrawSet(names=draws.names, values=draws.values, method=method, states=draws.states[-n_state_draws:])
        kept.states_to_csv(str(out / f"states_{method}.csv"))
    if outcome.fit is not None:
        outcome.fit.elbo_frame().to_csv(out / f"elbo_{method}.csv", index=False)
        outcome.fit.save_json(str(out / f"fit_{method}.json"))
    outcome.report.save_json(str(out / f"report_{method}.json"))


def _write_timings(out: Path, outcomes: Dict[str, MethodOutcome]):
    rows = [
        {"method": method, "phase": phase, "seconds": seconds}
        for method, outcome in outcomes.items()
        for phase, seconds in outcome.report.timings.items()
    ]
    pd.DataFrame(rows, columns=["method", "phase", "seconds"]).to_csv(out / "timings.csv", index=False)


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Fit every configured method and write its artifacts.

    The output directory receives config.yaml, data.csv (and states_true.csv for simulated
    data), then per method draws_<method>.csv, states_<method>.csv, elbo_<method>.csv,
    fit_<method>.json and report_<method>.json, and finally timings.csv. Methods that do not
    apply to the model are skipped with a warning.

    Args:
        config: The experiment.

    Returns:
        The outcomes.
    """
    model = build_model(config)
    out = _prepare_output(config)
    data, true_states = load_data(config, model)
    data.to_csv(str(out / "data.csv"))
    if true_states is not None:
        write_true_states(true_states, data, out / "states_true.csv")

    outcomes, skipped = _run_methods(config.methods, model, data, config)
    for outcome in outcomes.values():
        _write_outcome(out, outcome, config.diagnostics.n_state_draws)
    if outcomes:
        _write_timings(out, outcomes)
    logger.info(f"Experiment written to {out}: ran {list(outcomes)}, skipped {list(skipped)}")
    return ExperimentResult(output_dir=str(out), outcomes=outcomes, skipped=skipped)


def run_sweep(config: ExperimentConfig) -> Path:
    """Repeat the fits over sample sizes or recalibration intervals.

    `sample_size` fits every configured method on the first T' observations; `recalibration`
    fits Efficient VB with each recalibration interval. Writes sweep_intervals.csv with the
    posterior mean and 0.5% / 99.5% quantiles per parameter.
    """
    if config.sweep is None:
        raise ConfigurationError("The configuration has no sweep section")
    model = build_model(config)
    out = _prepare_output(config)
    data, _ = load_data(config, model)
    data.to_csv(str(out / "data.csv"))
    sweep = config.sweep
    quiet = config.model_copy(update={"diagnostics": config.diagnostics.model_copy(update={"n_state_draws": 0})})

    rows = []
    for value in sweep.values:
        if sweep.kind == "sample_size":
            if not 1 <= value <= data.n_times:
                raise ConfigurationError(f"Sample size {value} outside [1, {data.n_times}]")
            outcomes, _ = _run_methods(quiet.methods, model, data.head(value), quiet, (value,))
        else:
            settings = quiet.efficient_vb.model_copy(update={"recalibration_interval": value})
            outcomes, _ = _run_methods(["efficient-vb"], model, data, quiet.model_copy(update={"efficient_vb": settings}), (value,))
        for method, outcome in outcomes.items():
            for summary in outcome.report.parameters:
                rows.append(
                    {
                        "sweep": sweep.kind,
                        "value": value,
                        "method": method,
                        "parameter": summary.name,
                        "mean": summary.mean,
                        "lower": summary.lower,
                        "upper": summary.upper,
                    }
                )
        logger.info(f"Sweep {sweep.kind}={value} done")

    path = out / "sweep_intervals.csv"
    pd.DataFrame(rows, columns=["sweep", "value", "method", "parameter", "mean", "lower", "upper"]).to_csv(
        path, index=False
    )
    logger.info(f"Wrote {path}")
    return path


def compare(config: ExperimentConfig) -> ExperimentResult:
    """Run the experiment and write side-by-side tables.

    comparison.csv has one row per method with posterior means, the final-100 average ELBO
    and the total wall clock. state_means.csv holds the posterior state means per method
    (and the true path for simulated data); state_correlation_<method>.csv the correlation
    block of the diagnostics window.
    """
    result = run_experiment(config)
    out = Path(result.output_dir)

    rows = []
    for method, outcome in result.outcomes.items():
        row = {"method": method, **outcome.draws.means()}
        row["final_elbo"] = outcome.fit.final_elbo() if outcome.fit is not None else np.nan
        row["wall_clock"] = sum(outcome.report.timings.values())
        rows.append(row)
    pd.DataFrame(rows).to_csv(out / "comparison.csv", index=False)

    means = {}
    true_path = out / "states_true.csv"
    if true_path.exists():
        truth = pd.read_csv(true_path)
        for column in truth.columns[1:]:
            means[f"true_{column}"] = truth[column].to_numpy()
    for method, outcome in result.outcomes.items():
        report = outcome.report
        if report.state_means is None:
            continue
        state_means = np.array(report.state_means)
        if state_means.shape[1] == 1:
            means[method] = state_means[:, 0]
        else:
            for i in range(state_means.shape[1]):
                means[f"{method}[{i + 1}]"] = state_means[:, i]
        if report.state_correlation is not None:
            start, size = report.state_window
            labels = state_column_names(start + size, state_means.shape[1])[start * state_means.shape[1] :]
            corr = np.array([[np.nan if v is None else v for v in row] for row in report.state_correlation])
            pd.DataFrame(corr, index=labels, columns=labels).to_csv(out / f"state_correlation_{method}.csv")
    if means:
        pd.DataFrame(means).to_csv(out / "state_means.csv", index_label="t")
    logger.info(f"Comparison written to {out}")
    return result


def simulate_to_dir(config: ExperimentConfig) -> Path:
    """Simulate the configured data and write data.csv and states_true.csv."""
    if config.data.simulation is None:
        raise ConfigurationError("The simulate command needs a data.simulation section")
    model = build_model(config)
    out = _prepare_output(config)
    data, x = load_data(config, model)
    data.to_csv(str(out / "data.csv"))
    write_true_states(x, data, out / "states_true.csv")
    logger.info(f"Simulated {data.n_times} observations into {out}")
    return out


def diagnose_directory(config: ExperimentConfig, dim_state: Optional[int] = None) -> List[Path]:
    """Recompute report_<method>.json from the draws_<method>.csv files of an output directory."""
    out = Path(config.output_dir)
    dim_state = dim_state or build_model(config).dim_state
    timings = pd.read_csv(out / "timings.csv") if (out / "timings.csv").exists() else None
    written = []
    for draws_path in sorted(out.glob("draws_*.csv")):
        method = draws_path.stem[len("draws_") :]
        states_path = out / f"states_{method}.csv"
        draws = DrawSet.from_csv(
            str(draws_path), method, str(states_path) if states_path.exists() else None, dim_state
        )
        elbo_path = out / f"elbo_{method}.csv"
        trace = pd.read_csv(elbo_path)["elbo"].to_numpy() if elbo_path.exists() else None
        method_timings = None
        if timings is not None:
            rows = timings[timings["method"] == method]
            method_timings = dict(zip(rows["phase"], rows["seconds"].astype(float)))
        report = _report(draws, config, trace, method_timings)
        path = out / f"report_{method}.json"
        report.save_json(str(path))
        written.append(path)
    if not written:
        logger.warning(f"No draws_<method>.csv files found in {out}")
    return written
