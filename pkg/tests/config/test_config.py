from efficient_vb.config import OUTPUT_DIR_ENV, THREADS_ENV, ExperimentConfig
from efficient_vb.exceptions import ConfigurationError
import pytest
import yaml

SIMULATION = {"simulation": {"params": {"x_bar": -1.0, "rho": 0.95, "sigma": 0.25}, "n_times": 100}}


def test_defaults():
    config = ExperimentConfig.from_dict({"data": SIMULATION})

    assert config.model.name == "sv"
    assert config.methods == []
    assert config.seed == 0
    assert config.threads == 1
    assert config.efficient_vb.iterations == 10000
    assert config.efficient_vb.recalibration_interval == 200
    assert config.gaussian_vb.n_bands == 3
    assert config.mcmc.burn_in == 10000
    assert config.pmcmc.n_particles == 1000
    assert config.diagnostics.window_start == 100


def test_unknown_method():
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"data": SIMULATION, "methods": ["laplace"]})


def test_unknown_key():
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"data": SIMULATION, "efficient_vb": {"iterationz": 3}})


def test_data_needs_exactly_one_source():
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"data": {}})
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"data": {"path": "y.csv", **SIMULATION}})


def test_yaml(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text(
        "model:\n  name: lgss\n"
        "data:\n  path: data.csv\n"
        "methods: [efficient-vb, pmcmc]\n"
        "pmcmc:\n  likelihood: exact\n"
        "seed: 7\n"
    )

    config = ExperimentConfig.from_yaml(str(path))

    assert config.model.name == "lgss"
    assert config.methods == ["efficient-vb", "pmcmc"]
    assert config.pmcmc.likelihood == "exact"
    assert ExperimentConfig.from_dict(yaml.safe_load(config.to_yaml())) == config


def test_environment_and_explicit_overrides(monkeypatch):
    monkeypatch.setenv(OUTPUT_DIR_ENV, "from-env")
    monkeypatch.setenv(THREADS_ENV, "3")
    config = ExperimentConfig.from_dict({"data": SIMULATION})

    assert config.with_overrides().output_dir == "from-env"
    assert config.with_overrides().threads == 3
    overridden = config.with_overrides(seed=5, threads=2, output_dir="explicit")
    assert (overridden.seed, overridden.threads, overridden.output_dir) == (5, 2, "explicit")


def test_overrides_are_validated(monkeypatch):
    monkeypatch.delenv(OUTPUT_DIR_ENV, raising=False)
    monkeypatch.delenv(THREADS_ENV, raising=False)
    config = ExperimentConfig.from_dict({"data": SIMULATION})

    with pytest.raises(ConfigurationError):
        config.with_overrides(threads=0)
