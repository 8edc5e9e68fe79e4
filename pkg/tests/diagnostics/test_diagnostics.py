from efficient_vb.config import DiagnosticsSettings
from efficient_vb.diagnostics import (
    DiagnosticsReport,
    ParameterSummary,
    correlation_matrix,
    diagnostics,
    lag_correlations,
    summarize_elbo,
)
from efficient_vb.draws import DrawSet
from efficient_vb.exceptions import ConfigurationError, ParameterDomainError
import numpy as np
import pytest


def test_constant_column_has_degenerate_interval():
    draws = DrawSet(names=["a", "b"], values=np.column_stack([np.full(50, 2.0), np.arange(50.0)]))

    report = diagnostics(draws)

    assert report.parameter("a").mean == pytest.approx(2.0)
    assert report.parameter("a").std == pytest.approx(0.0)
    assert report.parameter("a").lower == report.parameter("a").upper == pytest.approx(2.0)
    assert report.state_means is None


def test_quantiles_match_sorted_draws():
    values = np.random.default_rng(0).standard_normal((2001, 1))
    ordered = np.sort(values[:, 0])

    summary = diagnostics(DrawSet(names=["x"], values=values)).parameter("x")

    assert summary.lower == pytest.approx(ordered[10])
    assert summary.upper == pytest.approx(ordered[1990])


def test_state_summaries():
    rng = np.random.default_rng(1)
    common = rng.standard_normal((400, 1, 1))
    states = common + 0.1 * rng.standard_normal((400, 8, 1))
    draws = DrawSet(names=["a"], values=np.zeros((400, 1)), states=states)
    settings = DiagnosticsSettings(window_start=2, window_size=3, max_lag=2)

    report = diagnostics(draws, settings=settings)

    assert len(report.state_means) == 8
    assert report.state_window == [2, 3]
    assert np.array(report.state_correlation).shape == (3, 3)
    assert report.state_correlation[0][0] == pytest.approx(1.0)
    assert report.state_correlation[0][1] > 0.9
    assert len(report.state_lag_correlations) == 2
    assert report.state_lag_correlations[0] > 0.9


def test_window_beyond_the_series():
    draws = DrawSet(names=["a"], values=np.zeros((5, 1)), states=np.zeros((5, 4, 1)))

    with pytest.raises(ConfigurationError):
        diagnostics(draws, settings=DiagnosticsSettings(window_start=2, window_size=3))


def test_undefined_correlations_are_none():
    columns = np.column_stack([np.ones(10), np.arange(10.0)])

    corr = correlation_matrix(columns)

    assert corr[0][1] is None
    assert corr[1][1] == pytest.approx(1.0)


def test_lag_correlation_of_independent_states_is_small():
    states = np.random.default_rng(2).standard_normal((5000, 6, 1))

    lags = lag_correlations(states, 0, 4, 1)

    assert abs(lags[0]) < 0.05


def test_elbo_summary():
    trace = np.concatenate([[np.nan], np.arange(1.0, 201.0)])

    summary = summarize_elbo(trace)

    assert summary.n_iterations == 201
    assert summary.first is None
    assert summary.maximum == 200.0
    assert summary.final_average == pytest.approx(np.mean(np.arange(101.0, 201.0)))


def test_report_json(tmp_path):
    draws = DrawSet(names=["rho"], values=np.array([[0.9], [0.95], [0.97]]), method="mcmc", timings={"states": 1.5})
    report = diagnostics(draws, elbo_trace=np.array([-10.0, -5.0]))
    path = tmp_path / "report.json"

    report.save_json(str(path))
    loaded = DiagnosticsReport.load_json(str(path))

    assert loaded.method == "mcmc"
    assert loaded.timings == {"states": 1.5}
    assert loaded.parameter("rho").mean == pytest.approx(report.parameter("rho").mean)
    assert loaded.elbo.maximum == -5.0


def test_non_monotone_interval_raises():
    with pytest.raises(ParameterDomainError):
        ParameterSummary(name="rho", mean=0.9, std=0.1, lower=0.99, upper=0.8)


def test_report_with_bad_interval_raises(tmp_path):
    path = tmp_path / "report.json"
    path.write_text('{"method": "mcmc", "parameters": [{"name": "rho", "mean": 0.9, "std": 0.1, "lower": 1.0, "upper": 0.5}]}')

    with pytest.raises(ParameterDomainError, match="not monotone"):
        DiagnosticsReport.load_json(str(path))
