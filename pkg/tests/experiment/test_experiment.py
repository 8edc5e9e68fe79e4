from efficient_vb.config import ExperimentConfig
from efficient_vb.exceptions import ConfigurationError
from efficient_vb.experiment import (
    compare,
    derive_seed,
    diagnose_directory,
    run_experiment,
    run_sweep,
    simulate_to_dir,
)
import json
import pandas as pd
import pytest

SV_SIMULATION = {"params": {"x_bar": -1.0, "rho": 0.95, "sigma": 0.25}, "n_times": 60, "seed": 1}
LGSS_SIMULATION = {"params": {"x_bar": 0.5, "rho": 0.8, "sigma": 0.6, "obs_var": 0.3}, "n_times": 40, "seed": 1}


def small_config(output_dir, methods, simulation=SV_SIMULATION, **extra):
    raw = {
        "data": {"simulation": simulation},
        "methods": methods,
        "efficient_vb": {"iterations": 20, "recalibration_interval": 10},
        "gaussian_vb": {"iterations": 20},
        "hybrid_vb": {"iterations": 20},
        "mcmc": {"burn_in": 10, "draws": 20},
        "pmcmc": {"burn_in": 5, "draws": 5, "n_particles": 20},
        "diagnostics": {"n_draws": 50, "n_state_draws": 20, "window_start": 5, "window_size": 4, "max_lag": 2},
        "output_dir": str(output_dir),
        "seed": 3,
    }
    raw.update(extra)
    return ExperimentConfig.from_dict(raw)


def test_derive_seed():
    assert derive_seed(1, 11) == derive_seed(1, 11)
    assert derive_seed(1, 11) != derive_seed(1, 12)
    assert 0 <= derive_seed(2, 14, 500) < 2**63


def test_empty_method_list_writes_data_only(tmp_path):
    result = run_experiment(small_config(tmp_path / "run", []))

    written = sorted(p.name for p in (tmp_path / "run").iterdir())
    assert written == ["config.yaml", "data.csv", "states_true.csv"]
    assert result.outcomes == {}
    assert len(pd.read_csv(tmp_path / "run" / "data.csv")) == 60


def test_artifacts_of_a_run(tmp_path):
    result = run_experiment(small_config(tmp_path / "run", ["efficient-vb", "mcmc"]))
    out = tmp_path / "run"

    assert set(result.outcomes) == {"efficient-vb", "mcmc"}
    for method in ("efficient-vb", "mcmc"):
        assert len(pd.read_csv(out / f"draws_{method}.csv")) == (50 if method == "efficient-vb" else 20)
        assert pd.read_csv(out / f"states_{method}.csv").shape == (20, 60)
        report = json.loads((out / f"report_{method}.json").read_text())
        assert [p["name"] for p in report["parameters"]] == ["x_bar", "rho", "sigma"]
    assert len(pd.read_csv(out / "elbo_efficient-vb.csv")) == 20
    assert (out / "fit_efficient-vb.json").exists()
    assert not (out / "elbo_mcmc.csv").exists()
    assert set(pd.read_csv(out / "timings.csv")["method"]) == {"efficient-vb", "mcmc"}


def test_runs_are_reproducible_across_thread_counts(tmp_path):
    methods = ["efficient-vb", "gaussian-vb", "mcmc"]
    run_experiment(small_config(tmp_path / "one", methods))
    run_experiment(small_config(tmp_path / "two", methods, threads=3))

    for method in methods:
        first = pd.read_csv(tmp_path / "one" / f"draws_{method}.csv")
        second = pd.read_csv(tmp_path / "two" / f"draws_{method}.csv")
        pd.testing.assert_frame_equal(first, second)


def test_inapplicable_methods_are_skipped(tmp_path):
    config = small_config(tmp_path / "run", ["mcmc", "hybrid-vb", "pmcmc"], LGSS_SIMULATION, model={"name": "lgss"})

    result = run_experiment(config)

    assert set(result.skipped) == {"mcmc"}
    assert set(result.outcomes) == {"hybrid-vb", "pmcmc"}
    assert not (tmp_path / "run" / "draws_mcmc.csv").exists()


def test_window_beyond_the_sample_keeps_parameter_summaries(tmp_path):
    config = small_config(
        tmp_path / "run", ["mcmc"], diagnostics={"n_draws": 10, "n_state_draws": 5, "window_start": 100}
    )

    report = run_experiment(config).outcomes["mcmc"].report

    assert report.state_means is None
    assert report.parameter("rho").lower <= report.parameter("rho").upper


def test_sample_size_sweep(tmp_path):
    config = small_config(tmp_path / "sweep", ["efficient-vb"], sweep={"kind": "sample_size", "values": [30, 60]})

    frame = pd.read_csv(run_sweep(config))

    assert list(frame.columns) == ["sweep", "value", "method", "parameter", "mean", "lower", "upper"]
    assert len(frame) == 6
    assert set(frame["value"]) == {30, 60}
    assert (frame["lower"] <= frame["upper"]).all()


def test_recalibration_sweep(tmp_path):
    config = small_config(tmp_path / "sweep", [], sweep={"kind": "recalibration", "values": [5, 10]})

    frame = pd.read_csv(run_sweep(config))

    assert set(frame["method"]) == {"efficient-vb"}
    assert len(frame) == 6


def test_sweep_rejects_oversized_sample(tmp_path):
    config = small_config(tmp_path / "sweep", ["efficient-vb"], sweep={"kind": "sample_size", "values": [61]})

    with pytest.raises(ConfigurationError):
        run_sweep(config)


def test_sweep_needs_a_sweep_section(tmp_path):
    with pytest.raises(ConfigurationError):
        run_sweep(small_config(tmp_path / "sweep", ["efficient-vb"]))


def test_compare_tables(tmp_path):
    compare(small_config(tmp_path / "run", ["efficient-vb", "mcmc"]))
    out = tmp_path / "run"

    comparison = pd.read_csv(out / "comparison.csv")
    means = pd.read_csv(out / "state_means.csv")
    correlation = pd.read_csv(out / "state_correlation_mcmc.csv", index_col=0)

    assert list(comparison["method"]) == ["efficient-vb", "mcmc"]
    assert {"x_bar", "rho", "sigma", "final_elbo", "wall_clock"} <= set(comparison.columns)
    assert list(means.columns) == ["t", "true_x", "efficient-vb", "mcmc"]
    assert correlation.shape == (4, 4)
    assert list(correlation.columns) == ["x[6]", "x[7]", "x[8]", "x[9]"]


def test_simulate_and_diagnose(tmp_path):
    config = small_config(tmp_path / "run", ["mcmc"])
    simulate_to_dir(config)
    assert (tmp_path / "run" / "states_true.csv").exists()

    run_experiment(config)
    (tmp_path / "run" / "report_mcmc.json").unlink()
    written = diagnose_directory(config)

    assert [p.name for p in written] == ["report_mcmc.json"]
    report = json.loads((tmp_path / "run" / "report_mcmc.json").read_text())
    assert report["method"] == "mcmc"
    assert report["state_window"] == [5, 4]
    assert set(report["timings"]) == {"states", "parameters"}


def test_simulate_needs_a_simulation(tmp_path):
    config = ExperimentConfig.from_dict({"data": {"path": str(tmp_path / "y.csv")}, "output_dir": str(tmp_path)})

    with pytest.raises(ConfigurationError):
        simulate_to_dir(config)


REPLICATION = {"params": {"x_bar": -1.3, "rho": 0.95, "sigma": 0.3}, "n_times": 500, "seed": 2024}


def replication_config(output_dir, methods, **extra):
    return ExperimentConfig.from_dict(
        {
            "data": {"simulation": REPLICATION},
            "methods": methods,
            "diagnostics": {"n_draws": 5000, "n_state_draws": 1000},
            "output_dir": str(output_dir),
            "seed": 1,
            "threads": 2,
            **extra,
        }
    )


@pytest.mark.slow
def test_efficient_vb_agrees_with_mcmc(tmp_path):
    result = run_experiment(replication_config(tmp_path / "run", ["efficient-vb", "gaussian-vb", "mcmc"]))
    vb = result.outcomes["efficient-vb"]
    mcmc = result.outcomes["mcmc"]

    vb_means, mcmc_means = vb.draws.means(), mcmc.draws.means()
    assert abs(vb_means["x_bar"] - mcmc_means["x_bar"]) < 0.15
    assert abs(vb_means["rho"] - mcmc_means["rho"]) < 0.05
    assert abs(vb_means["sigma"] - mcmc_means["sigma"]) < 0.05
    state_gap = abs(pd.DataFrame(vb.report.state_means) - pd.DataFrame(mcmc.report.state_means)).to_numpy()
    assert state_gap.mean() < 0.15
    for vb_lag, mcmc_lag in zip(vb.report.state_lag_correlations, mcmc.report.state_lag_correlations):
        assert abs(vb_lag - mcmc_lag) < 0.1
    gaussian_lags = result.outcomes["gaussian-vb"].report.state_lag_correlations[2:]
    assert all(abs(lag) < 0.1 for lag in gaussian_lags if lag is not None)


@pytest.mark.slow
def test_efficient_vb_elbo_dominates_gaussian_vb(tmp_path):
    result = run_experiment(replication_config(tmp_path / "run", ["efficient-vb", "gaussian-vb"]))

    assert result.outcomes["efficient-vb"].fit.final_elbo() >= result.outcomes["gaussian-vb"].fit.final_elbo()


@pytest.mark.slow
def test_recalibration_interval_does_not_move_intervals(tmp_path):
    config = replication_config(
        tmp_path / "sweep", [], sweep={"kind": "recalibration", "values": [1, 50, 200, 1000]}
    )

    frame = pd.read_csv(run_sweep(config))
    rho = frame[frame["parameter"] == "rho"]

    assert rho["lower"].max() - rho["lower"].min() < 0.05
    assert rho["upper"].max() - rho["upper"].min() < 0.05


SKELLAM_SIMULATION = {
    "params": {
        "kappa": [0.3, 0.2],
        "x_bar": [0.05, 0.1],
        "omega": [0.9, 0.85],
        "Sigma": [[0.1, 0.03], [0.03, 0.12]],
        "beta": [[0.3, -0.2, -0.1], [0.25, -0.15, -0.1]],
    },
    "n_times": 1500,
    "seed": 7,
}


def skellam_config(output_dir, methods):
    return ExperimentConfig.from_dict(
        {
            "model": {"name": "skellam", "options": {"n_series": 2, "intraday_periods": 390, "knots": [0, 30, 180, 389]}},
            "data": {"simulation": SKELLAM_SIMULATION},
            "methods": methods,
            "diagnostics": {"n_draws": 2000, "n_state_draws": 0},
            "output_dir": str(output_dir),
            "seed": 1,
            "threads": 2,
        }
    )


@pytest.mark.slow
def test_efficient_vb_elbo_dominates_gaussian_vb_on_skellam_data(tmp_path):
    result = run_experiment(skellam_config(tmp_path / "run", ["efficient-vb", "gaussian-vb"]))

    assert result.outcomes["efficient-vb"].fit.final_elbo() >= result.outcomes["gaussian-vb"].fit.final_elbo()


@pytest.mark.slow
def test_efficient_vb_recovers_skellam_parameters(tmp_path):
    result = run_experiment(skellam_config(tmp_path / "run", ["efficient-vb"]))
    means = result.outcomes["efficient-vb"].draws.means()
    truth = SKELLAM_SIMULATION["params"]

    for i in range(2):
        assert abs(means[f"kappa[{i + 1}]"] - truth["kappa"][i]) < 0.1
        assert abs(means[f"omega[{i + 1}]"] - truth["omega"][i]) < 0.1


@pytest.mark.slow
def test_wall_clock_ordering_on_a_long_series(tmp_path):
    simulation = {**REPLICATION, "n_times": 4000}
    config = replication_config(
        tmp_path / "run",
        ["efficient-vb", "gaussian-vb", "hybrid-vb", "mcmc"],
        data={"simulation": simulation},
        diagnostics={"n_draws": 100, "n_state_draws": 0},
        threads=1,
    )

    result = run_experiment(config)
    seconds = [sum(result.outcomes[m].report.timings.values()) for m in ("efficient-vb", "gaussian-vb", "hybrid-vb", "mcmc")]

    assert seconds == sorted(seconds)
