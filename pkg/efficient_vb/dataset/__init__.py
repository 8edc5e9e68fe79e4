from __future__ import annotations

from typing import List, Optional

import numpy as np
import pandas as pd
from pydantic import ConfigDict, model_validator

from efficient_vb.exceptions import DomainModel, ParameterDomainError
from efficient_vb.logging import logger


class Dataset(DomainModel):
    """An observed multivariate time series.

    Attributes:
        observations: T x N matrix of observations, one row per time point.
        names: Series names, one per column of `observations`.
        time_index: Time labels, one per row.
        covariates: Optional T x K matrix of exogenous regressors (the Skellam seasonal basis).

    Example:
        >>> import numpy as np
        >>> data = Dataset.from_array(np.zeros((3, 1)))
        >>> data.n_times, data.n_series
        (3, 1)
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    observations: np.ndarray
    names: List[str]
    time_index: List[str]
    covariates: Optional[np.ndarray] = None

    @model_validator(mode="after")
    def _check_shapes(self):
        y = self.observations
        if y.ndim != 2 or y.shape[0] < 1:
            raise ParameterDomainError(f"Observations must be a T x N matrix with T >= 1, got shape {y.shape}")
        if not np.all(np.isfinite(y)):
            raise ParameterDomainError("Observations contain missing or non-finite values")
        if len(self.names) != y.shape[1]:
            raise ParameterDomainError(f"Expected {y.shape[1]} series names, got {len(self.names)}")
        if len(self.time_index) != y.shape[0]:
            raise ParameterDomainError(f"Expected {y.shape[0]} time labels, got {len(self.time_index)}")
        if self.covariates is not None and self.covariates.shape[0] != y.shape[0]:
            raise ParameterDomainError("Covariates must have one row per time point")
        return self

    @staticmethod
    def from_array(
        observations: np.ndarray,
        names: Optional[List[str]] = None,
        covariates: Optional[np.ndarray] = None,
    ) -> Dataset:
        y = np.asarray(observations, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        return Dataset(
            observations=y,
            names=names if names is not None else [f"y{i + 1}" for i in range(y.shape[1])],
            time_index=[str(t + 1) for t in range(y.shape[0])],
            covariates=covariates,
        )

    @staticmethod
    def from_csv(path: str, time_column: Optional[str] = None) -> Dataset:
        """Read a dataset from CSV.

        The file has a header row with series names and one row per time point.

        Args:
            path: CSV file.
            time_column: Optional column holding time labels. It is not treated as a series.
                A column named "time" is used when none is given.

        Returns:
            The dataset.
        """
        frame = pd.read_csv(path)
        if time_column is None and "time" in frame.columns:
            time_column = "time"
        if time_column is not None:
            time_index = frame.pop(time_column).astype(str).tolist()
        else:
            time_index = [str(t + 1) for t in range(len(frame))]
        logger.info(f"Read {len(frame)} observations of {frame.shape[1]} series from {path}")
        return Dataset(
            observations=frame.to_numpy(dtype=float),
            names=list(frame.columns),
            time_index=time_index,
        )

    def to_csv(self, path: str):
        frame = pd.DataFrame(self.observations, columns=self.names)
        frame.insert(0, "time", self.time_index)
        frame.to_csv(path, index=False)

    def head(self, n_times: int) -> Dataset:
        """The first `n_times` observations (and covariate rows)."""
        return self.window(0, n_times)

    def window(self, start: int, stop: int) -> Dataset:
        """Observations (and covariate rows) with zero-based time index in [start, stop)."""
        return Dataset(
            observations=self.observations[start:stop],
            names=self.names,
            time_index=self.time_index[start:stop],
            covariates=None if self.covariates is None else self.covariates[start:stop],
        )

    def with_covariates(self, covariates: np.ndarray) -> Dataset:
        return Dataset(
            observations=self.observations,
            names=self.names,
            time_index=self.time_index,
            covariates=covariates,
        )

    @property
    def n_times(self) -> int:
        return self.observations.shape[0]

    @property
    def n_series(self) -> int:
        return self.observations.shape[1]

    def __str__(self):
        return f"Dataset(n_times={self.n_times}, names={self.names})"

    def __repr__(self):
        return self.__str__()
