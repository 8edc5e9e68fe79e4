from __future__ import annotations

from typing import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.interpolate import CubicSpline

from efficient_vb.exceptions import ParameterDomainError


class SeasonalBasis(BaseModel):
    """Zero-sum cubic-spline basis for intraday seasonality.

    Attributes:
        values: T x 3 matrix; every column sums to zero over the grid.
        knots: The four knot positions.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    values: np.ndarray
    knots: np.ndarray

    def seasonal_component(self, beta: np.ndarray) -> np.ndarray:
        """s_t = W_t' beta for one coefficient vector (3,) or per series (N, 3)."""
        return self.values @ np.asarray(beta, dtype=float).T


def natural_spline_basis(times: np.ndarray, knots: np.ndarray) -> np.ndarray:
    """Cardinal natural cubic splines: column j interpolates the j-th unit vector at the knots."""
    spline = CubicSpline(knots, np.eye(len(knots)), bc_type="natural")
    return spline(times)


def build_seasonal_basis(times: Sequence[float], knots: Sequence[float]) -> SeasonalBasis:
    """Natural cubic-spline basis with four knots, transformed to sum to zero.

    With W the T x 4 cardinal basis and W_bar its column means, column j of the result is
    W_j - W_4 * W_bar_j / W_bar_4 for j = 1, 2, 3.

    Args:
        times: Intraday position of each observation (repeat the daily grid across days).
        knots: Four strictly increasing knot positions.

    Returns:
        The basis.

    Example:
        >>> basis = build_seasonal_basis(range(390), [0, 30, 180, 389])
        >>> basis.values.shape
        (390, 3)
    """
    times = np.asarray(times, dtype=float)
    knots = np.asarray(knots, dtype=float)
    if knots.shape != (4,) or np.any(np.diff(knots) <= 0):
        raise ParameterDomainError(f"Expected four strictly increasing knots, got {knots}")
    if times.size == 0:
        raise ParameterDomainError("Empty time grid")

    w = natural_spline_basis(times, knots)
    w_bar = w.mean(axis=0)
    if abs(w_bar[3]) < 1e-12:
        raise ParameterDomainError("Last basis function averages to zero on the grid, knots are degenerate")
    values = w[:, :3] - np.outer(w[:, 3], w_bar[:3] / w_bar[3])
    return SeasonalBasis(values=values, knots=knots)
