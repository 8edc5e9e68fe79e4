from __future__ import annotations

from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from pydantic import ConfigDict, model_validator

from efficient_vb.exceptions import DomainModel, ParameterDomainError
from efficient_vb.logging import logger


def state_column_names(n_times: int, dim_state: int) -> List[str]:
    """x[t] for univariate states, x[t,i] otherwise (one-based)."""
    if dim_state == 1:
        return [f"x[{t + 1}]" for t in range(n_times)]
    return [f"x[{t + 1},{i + 1}]" for t in range(n_times) for i in range(dim_state)]


class DrawSet(DomainModel):
    """Posterior draws with named columns, shared by all inference methods.

    Attributes:
        names: Column names of `values`.
        values: Parameter draws, one row per draw.
        method: Method tag that produced the draws.
        states: Optional state path draws, (n_state_draws, T, n).
        timings: Wall clock per phase in seconds.
        info: Method-specific scalars such as acceptance rates.

    Example:
        >>> import numpy as np
        >>> draws = DrawSet(names=["rho"], values=np.array([[0.9], [0.95]]), method="mcmc")
        >>> draws.means()["rho"]
        0.925
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    names: List[str]
    values: np.ndarray
    method: str = ""
    states: Optional[np.ndarray] = None
    timings: Dict[str, float] = {}
    info: Dict[str, float] = {}

    @model_validator(mode="after")
    def _check_shapes(self):
        if self.values.ndim != 2 or self.values.shape[1] != len(self.names):
            raise ParameterDomainError(f"Draw matrix of shape {self.values.shape} does not match {len(self.names)} names")
        if self.values.shape[0] < 1:
            raise ParameterDomainError("A draw set needs at least one draw")
        if self.states is not None and self.states.ndim != 3:
            raise ParameterDomainError(f"State draws must be (draws, T, n), got shape {self.states.shape}")
        return self

    @property
    def n_draws(self) -> int:
        return self.values.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.values, columns=self.names)

    def means(self) -> Dict[str, float]:
        return dict(zip(self.names, np.mean(self.values, axis=0).tolist()))

    def state_frame(self) -> pd.DataFrame:
        if self.states is None:
            raise ParameterDomainError(f"Draw set '{self.method}' holds no state draws")
        n_draws, n_times, n = self.states.shape
        return pd.DataFrame(self.states.reshape(n_draws, n_times * n), columns=state_column_names(n_times, n))

    def to_csv(self, path: str):
        self.frame().to_csv(path, index=False)
        logger.info(f"Wrote {self.n_draws} draws of {len(self.names)} quantities to {path}")

    def states_to_csv(self, path: str):
        self.state_frame().to_csv(path, index=False)
        logger.info(f"Wrote {self.states.shape[0]} state paths to {path}")

    @staticmethod
    def from_csv(path: str, method: str = "", states_path: Optional[str] = None, dim_state: int = 1) -> DrawSet:
        frame = pd.read_csv(path)
        states = None
        if states_path is not None:
            raw = pd.read_csv(states_path).to_numpy(dtype=float)
            states = raw.reshape(raw.shape[0], -1, dim_state)
        return DrawSet(names=list(frame.columns), values=frame.to_numpy(dtype=float), method=method, states=states)

    @staticmethod
    def from_variational(
        model,
        lam,
        n_draws: int,
        rng: np.random.Generator,
        state_source=None,
        n_state_draws: int = 0,
        method: str = "",
        timings: Optional[Dict[str, float]] = None,
    ) -> DrawSet:
        """Draw from a fitted q(theta) and, optionally, from the matching state approximation.

        Args:
            model: The model, used to map draws to reported quantities.
            lam: Fitted variational parameters.
            n_draws: Number of parameter draws.
            rng: Random generator.
            state_source: Either an object with `sample(rng, n_paths)` (a state approximation)
                or one with `sample_given(params, rng)` (an exact conditional sampler).
            n_state_draws: Number of state paths.
            method: Method tag.
            timings: Timings to carry over from the fit.
        """
        thetas = lam.sample(rng, n_draws)
        rows = [model.describe(theta) for theta in thetas]
        names = list(rows[0])
        values = np.array([[row[name] for name in names] for row in rows])

        states = None
        if state_source is not None and n_state_draws > 0:
            if hasattr(state_source, "sample_given"):
                paths = [
                    state_source.sample_given(model.inverse_transform(thetas[k % n_draws]), rng)[0]
                    for k in range(n_state_draws)
                ]
                states = np.stack(paths)
            else:
                states = state_source.sample(rng, n_state_draws)[0]
        return DrawSet(names=names, values=values, method=method, states=states, timings=timings or {})

    def __str__(self):
        return f"DrawSet(method={self.method}, n_draws={self.n_draws}, names={self.names})"

    def __repr__(self):
        return self.__str__()
