from __future__ import annotations

import os
from typing import Any, Dict, List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from efficient_vb.exceptions import ConfigurationError
from efficient_vb.logging import logger

METHODS = ("efficient-vb", "gaussian-vb", "hybrid-vb", "mcmc", "pmcmc")

OUTPUT_DIR_ENV = "EFFICIENT_VB_OUTPUT_DIR"
THREADS_ENV = "EFFICIENT_VB_THREADS"


class PlateauSettings(BaseModel):
    """Stop when the windowed ELBO average stops improving.

    Attributes:
        window: Moving-average window.
        patience: Distance between the compared windows.
        tolerance: Minimum relative improvement over `patience` iterations.
    """

    window: int = 100
    patience: int = 500
    tolerance: float = 1e-4


class OptimizerSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    iterations: int = Field(10000, ge=0)
    n_factors: Optional[int] = Field(None, ge=0)
    init_scale: float = 0.1
    decay: float = 0.95
    eps: float = 1e-6
    plateau: Optional[PlateauSettings] = None


class EfficientVBSettings(OptimizerSettings):
    """Efficient VB: recalibrate the kernel every `recalibration_interval` iterations."""

    recalibration_interval: int = Field(200, ge=1)
    n_paths: Optional[int] = None


class GaussianVBSettings(OptimizerSettings):
    """Gaussian VB with a banded Cholesky factor for the states."""

    n_bands: int = Field(3, ge=1)
    state_init_scale: float = 0.1
    diag_floor: float = 1e-6


class HybridVBSettings(OptimizerSettings):
    """Hybrid VB: states drawn from their exact conditional posterior."""


class McmcSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    burn_in: int = Field(10000, ge=0)
    draws: int = Field(10000, ge=1)
    offset: float = 1e-4
    store_states: bool = True


class PmcmcSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    burn_in: int = Field(5000, ge=0)
    draws: int = Field(10000, ge=1)
    n_particles: int = Field(1000, ge=1)
    initial_step: float = 0.1
    adapt_window: int = 100
    target_low: float = 0.15
    target_high: float = 0.30
    adapt_factor: float = 1.2
    likelihood: Literal["particle", "exact"] = "particle"
    resampling: Literal["multinomial", "systematic"] = "multinomial"


class DiagnosticsSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_draws: int = Field(10000, ge=1)
    n_state_draws: int = Field(1000, ge=0)
    window_start: int = Field(100, ge=0)
    window_size: int = Field(10, ge=1)
    max_lag: int = Field(10, ge=1)


class ModelSettings(BaseModel):
    name: str = "sv"
    options: Dict[str, Any] = {}


class SimulationSettings(BaseModel):
    """Simulate data from `params` (a name -> value mapping on the constrained scale)."""

    params: Dict[str, Any]
    n_times: int = Field(500, ge=1)
    seed: int = 0


class DataSettings(BaseModel):
    path: Optional[str] = None
    time_column: Optional[str] = None
    simulation: Optional[SimulationSettings] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.path is None) == (self.simulation is None):
            raise ValueError("Give exactly one of data.path and data.simulation")
        return self


class SweepSettings(BaseModel):
    """Repeat the fits over sample sizes or recalibration intervals."""

    kind: Literal["sample_size", "recalibration"]
    values: List[int]


class ExperimentConfig(BaseModel):
    """An experiment: a model, a data source, methods and their settings.

    Attributes:
        model: Registered model name and constructor options.
        data: CSV path or simulation block.
        methods: Methods to run, any of efficient-vb, gaussian-vb, hybrid-vb, mcmc, pmcmc.
        output_dir: Artifact directory.
        seed: Global seed; every fit derives its own stream from it.
        threads: Number of fits run concurrently.

    Example:
        >>> config = ExperimentConfig.model_validate(
        ...     {"data": {"simulation": {"params": {"x_bar": -1.3, "rho": 0.95, "sigma": 0.3}}}}
        ... )
        >>> config.efficient_vb.recalibration_interval
        200
    """

    model_config = ConfigDict(extra="forbid")

    model: ModelSettings = ModelSettings()
    data: DataSettings
    methods: List[Literal["efficient-vb", "gaussian-vb", "hybrid-vb", "mcmc", "pmcmc"]] = []
    efficient_vb: EfficientVBSettings = EfficientVBSettings()
    gaussian_vb: GaussianVBSettings = GaussianVBSettings()
    hybrid_vb: HybridVBSettings = HybridVBSettings()
    mcmc: McmcSettings = McmcSettings()
    pmcmc: PmcmcSettings = PmcmcSettings()
    diagnostics: DiagnosticsSettings = DiagnosticsSettings()
    sweep: Optional[SweepSettings] = None
    output_dir: str = "out"
    seed: int = 0
    threads: int = Field(1, ge=1)

    @staticmethod
    def from_yaml(path: str) -> ExperimentConfig:
        with open(path) as f:
            raw = yaml.safe_load(f) or {}
        return ExperimentConfig.from_dict(raw)

    @staticmethod
    def from_dict(raw: Dict[str, Any]) -> ExperimentConfig:
        try:
            return ExperimentConfig.model_validate(raw)
        except ValidationError as error:
            raise ConfigurationError(f"Invalid experiment configuration:\n{error}")

    def with_overrides(
        self, seed: Optional[int] = None, threads: Optional[int] = None, output_dir: Optional[str] = None
    ) -> ExperimentConfig:
        """Apply environment overrides, then explicit ones."""
        update: Dict[str, Any] = {}
        if os.getenv(OUTPUT_DIR_ENV):
            update["output_dir"] = os.getenv(OUTPUT_DIR_ENV)
        if os.getenv(THREADS_ENV):
            update["threads"] = int(os.getenv(THREADS_ENV))
        if output_dir is not None:
            update["output_dir"] = output_dir
        if threads is not None:
            update["threads"] = threads
        if seed is not None:
            update["seed"] = seed
        if update:
            logger.debug(f"Configuration overrides: {update}")
        return ExperimentConfig.from_dict({**self.model_dump(), **update})

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)
