from __future__ import annotations

import json
from typing import Any, Dict, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict
from scipy.linalg import solve_banded

from efficient_vb.config import PlateauSettings
from efficient_vb.dataset import Dataset
from efficient_vb.eis import KernelParams, ProxyParams
from efficient_vb.exceptions import SingularCovarianceError
from efficient_vb.model import LOG_2PI, ModelSpec

CALIBRATION_STREAM = 1
DIAGNOSTIC_STREAM = 2


def resolve_seed(seed: Optional[int]) -> int:
    if seed is None:
        return int(np.random.SeedSequence().entropy % (2**63))
    return int(seed)


def factor_indices(dim: int, n_factors: int) -> Tuple[np.ndarray, np.ndarray]:
    """Free entries of the factor matrix (lower trapezoid), column by column."""
    rows = [i for j in range(n_factors) for i in range(j, dim)]
    cols = [j for j in range(n_factors) for _ in range(j, dim)]
    return np.array(rows, dtype=int), np.array(cols, dtype=int)


class VariationalParams(BaseModel):
    """Gaussian q(theta) = N(mu, B B' + diag(d_diag^2)) with a factor covariance.

    B has zeros above its diagonal. The flat layout is (mu, d_diag, free entries of B).

    Attributes:
        mu: Mean, (d,).
        factors: B, (d, p).
        d_diag: Diagonal scales, (d,).

    Example:
        >>> params = VariationalParams.initial(np.zeros(3), n_factors=1)
        >>> params.to_vector().shape
        (9,)
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    mu: np.ndarray
    factors: np.ndarray
    d_diag: np.ndarray

    @staticmethod
    def initial(mu: np.ndarray, n_factors: int, scale: float = 0.1) -> VariationalParams:
        mu = np.asarray(mu, dtype=float)
        return VariationalParams(mu=mu.copy(), factors=np.zeros((mu.size, n_factors)), d_diag=np.full(mu.size, scale))

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @property
    def n_factors(self) -> int:
        return self.factors.shape[1]

    def to_vector(self) -> np.ndarray:
        rows, cols = factor_indices(self.dim, self.n_factors)
        return np.concatenate([self.mu, self.d_diag, self.factors[rows, cols]])

    @staticmethod
    def from_vector(vector: np.ndarray, dim: int, n_factors: int) -> VariationalParams:
        rows, cols = factor_indices(dim, n_factors)
        factors = np.zeros((dim, n_factors))
        factors[rows, cols] = vector[2 * dim :]
        return VariationalParams(mu=vector[:dim].copy(), d_diag=vector[dim : 2 * dim].copy(), factors=factors)

    def covariance(self) -> np.ndarray:
        return self.factors @ self.factors.T + np.diag(self.d_diag**2)

    def _woodbury(self):
        d2 = self.d_diag**2
        if np.any(d2 <= 0.0):
            raise SingularCovarianceError("Variational covariance needs a nonzero diagonal")
        scaled = self.factors / d2[:, None]
        capacitance = np.eye(self.n_factors) + self.factors.T @ scaled
        return d2, scaled, capacitance

    def precision_times(self, v: np.ndarray) -> np.ndarray:
        """Omega^{-1} v by the low-rank-plus-diagonal inversion identity."""
        d2, scaled, capacitance = self._woodbury()
        return v / d2 - scaled @ np.linalg.solve(capacitance, scaled.T @ v)

    def log_density(self, theta: np.ndarray) -> float:
        d2, _, capacitance = self._woodbury()
        diff = np.asarray(theta, dtype=float) - self.mu
        logdet = np.sum(np.log(d2)) + np.linalg.slogdet(capacitance)[1]
        return float(-0.5 * (self.dim * LOG_2PI + logdet + diff @ self.precision_times(diff)))

    def sample(self, rng: np.random.Generator, n_draws: int) -> np.ndarray:
        z = rng.standard_normal((n_draws, self.n_factors))
        eps = rng.standard_normal((n_draws, self.dim))
        return self.mu + z @ self.factors.T + eps * self.d_diag

    def __str__(self):
        return f"VariationalParams(mu={np.round(self.mu, 4).tolist()}, n_factors={self.n_factors})"

    def __repr__(self):
        return self.__str__()


class StateBlockParams(BaseModel):
    """Gaussian q(x) = N(mu_x, C C') with C lower triangular and banded.

    States are flattened time-major. `bands[k, j]` holds C[j + k, j].

    Attributes:
        mu_x: Mean, (T * n,).
        bands: (n_bands * n, T * n) lower band storage of C.
        dim_state: State dimension n.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    mu_x: np.ndarray
    bands: np.ndarray
    dim_state: int = 1

    @staticmethod
    def initial(mu_x: np.ndarray, n_bands: int = 3, scale: float = 0.1, dim_state: int = 1) -> StateBlockParams:
        mu_x = np.asarray(mu_x, dtype=float).ravel()
        bands = np.zeros((n_bands * dim_state, mu_x.size))
        bands[0] = scale
        return StateBlockParams(mu_x=mu_x, bands=bands, dim_state=dim_state)

    @property
    def size(self) -> int:
        return self.mu_x.shape[0]

    @property
    def bandwidth(self) -> int:
        return self.bands.shape[0] - 1

    def band_mask(self) -> np.ndarray:
        """True where bands[k, j] is a real entry of C (j + k inside the matrix)."""
        k = np.arange(self.bands.shape[0])[:, None]
        j = np.arange(self.size)[None, :]
        return j + k < self.size

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.mu_x, self.bands[self.band_mask()]])

    def from_vector(self, vector: np.ndarray) -> StateBlockParams:
        bands = np.zeros_like(self.bands)
        bands[self.band_mask()] = vector[self.size :]
        return StateBlockParams(mu_x=vector[: self.size].copy(), bands=bands, dim_state=self.dim_state)

    def dense_factor(self) -> np.ndarray:
        c = np.zeros((self.size, self.size))
        for k in range(self.bands.shape[0]):
            idx = np.arange(self.size - k)
            c[idx + k, idx] = self.bands[k, : self.size - k]
        return c

    def factor_times(self, eps: np.ndarray) -> np.ndarray:
        """C @ eps."""
        out = self.bands[0] * eps
        for k in range(1, self.bands.shape[0]):
            out[k:] += self.bands[k, : self.size - k] * eps[: self.size - k]
        return out

    def solve_transpose(self, eps: np.ndarray) -> np.ndarray:
        """C^{-T} eps, using the upper band form of C'."""
        upper = np.zeros_like(self.bands)
        for k in range(self.bands.shape[0]):
            upper[self.bandwidth - k, k:] = self.bands[k, : self.size - k]
        return solve_banded((0, self.bandwidth), upper, eps, check_finite=False)

    def draw(self, eps: np.ndarray) -> np.ndarray:
        return (self.mu_x + self.factor_times(eps)).reshape(-1, self.dim_state)

    def log_density_from_noise(self, eps: np.ndarray) -> float:
        return float(-0.5 * self.size * LOG_2PI - np.sum(np.log(np.abs(self.bands[0]))) - 0.5 * eps @ eps)

    def sample(self, rng: np.random.Generator, n_paths: int = 1) -> Tuple[np.ndarray, np.ndarray]:
        paths, logs = [], []
        for _ in range(n_paths):
            eps = rng.standard_normal(self.size)
            paths.append(self.draw(eps))
            logs.append(self.log_density_from_noise(eps))
        return np.stack(paths), np.array(logs)


class AdadeltaState(BaseModel):
    """Decayed accumulators of squared gradients and squared steps.

    Attributes:
        mean_sq_grad: E[g^2] per coordinate.
        mean_sq_step: E[delta^2] per coordinate.
        decay: Decay rate.
        eps: Stabilizer.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    mean_sq_grad: np.ndarray
    mean_sq_step: np.ndarray
    decay: float = 0.95
    eps: float = 1e-6

    @staticmethod
    def fresh(size: int, decay: float = 0.95, eps: float = 1e-6) -> AdadeltaState:
        return AdadeltaState(mean_sq_grad=np.zeros(size), mean_sq_step=np.zeros(size), decay=decay, eps=eps)


def adadelta_step(state: AdadeltaState, lam: np.ndarray, grad: np.ndarray) -> Tuple[np.ndarray, AdadeltaState]:
    """One ADADELTA ascent step.

    Example:
        >>> lam, state = adadelta_step(AdadeltaState.fresh(1), np.zeros(1), np.ones(1))
        >>> round(float(lam[0]), 7)
        0.0044721
    """
    rho, eps = state.decay, state.eps
    mean_sq_grad = rho * state.mean_sq_grad + (1.0 - rho) * grad**2
    step = np.sqrt(state.mean_sq_step + eps) / np.sqrt(mean_sq_grad + eps) * grad
    mean_sq_step = rho * state.mean_sq_step + (1.0 - rho) * step**2
    new_state = AdadeltaState(mean_sq_grad=mean_sq_grad, mean_sq_step=mean_sq_step, decay=rho, eps=eps)
    return lam + step, new_state


def reparam_draw(lam: VariationalParams, z: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """theta = mu + B z + d_diag * eps."""
    return lam.mu + lam.factors @ z + lam.d_diag * eps


def grad_log_q(lam: VariationalParams, theta: np.ndarray) -> np.ndarray:
    """Gradient of log q_lambda at theta, -Omega^{-1}(theta - mu)."""
    return -lam.precision_times(np.asarray(theta, dtype=float) - lam.mu)


def chain_rule(lam: VariationalParams, bracket: np.ndarray, z: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Map a gradient over theta to the flat lambda layout through theta = mu + Bz + d*eps."""
    rows, cols = factor_indices(lam.dim, lam.n_factors)
    return np.concatenate([bracket, bracket * eps, bracket[rows] * z[cols]])


def elbo_gradient_estimate(
    model: ModelSpec, lam: VariationalParams, z: np.ndarray, eps: np.ndarray, x: np.ndarray, data: Dataset
) -> np.ndarray:
    """Single-draw reparametrization estimate of the ELBO gradient over lambda."""
    theta = reparam_draw(lam, z, eps)
    bracket = model.log_joint_grad(theta, x, data) - grad_log_q(lam, theta)
    return chain_rule(lam, bracket, z, eps)


def elbo_terms(
    model: ModelSpec, lam: VariationalParams, state_approx, data: Dataset, n_samples: int, seed
) -> np.ndarray:
    """Per-draw ELBO terms log p(y,x|theta)p(theta) - log q(theta) - log q(x).

    Draw k uses the generator seeded with (seed, k). `state_approx` either has
    `sample(rng, n_paths)` or, when states depend on theta, `sample_given(params, rng)`.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    seed = resolve_seed(seed)
    terms = np.empty(n_samples)
    for k in range(n_samples):
        rng = np.random.default_rng([seed, k])
        z = rng.standard_normal(lam.n_factors)
        eps = rng.standard_normal(lam.dim)
        theta = reparam_draw(lam, z, eps)
        if hasattr(state_approx, "sample_given"):
            x, log_qx = state_approx.sample_given(model.inverse_transform(theta), rng)
        else:
            paths, logs = state_approx.sample(rng, 1)
            x, log_qx = paths[0], float(logs[0])
        terms[k] = model.log_joint(theta, x, data) - lam.log_density(theta) - log_qx
    return terms


def estimate_elbo(model: ModelSpec, lam: VariationalParams, state_approx, data: Dataset, n_samples: int, seed) -> float:
    """Monte Carlo ELBO estimate, the mean of `elbo_terms`."""
    return float(np.mean(elbo_terms(model, lam, state_approx, data, n_samples, seed)))


class ElboPlateau(BaseModel):
    """Stopping rule on the moving average of the ELBO trace."""

    settings: PlateauSettings = PlateauSettings()

    def reached(self, trace: np.ndarray, n_done: int) -> bool:
        window, patience = self.settings.window, self.settings.patience
        if n_done < window + patience:
            return False
        current = np.nanmean(trace[n_done - window : n_done])
        previous = np.nanmean(trace[n_done - window - patience : n_done - patience])
        return bool((current - previous) / max(abs(previous), 1.0) < self.settings.tolerance)


class FitResult(BaseModel):
    """Outcome of a variational fit.

    Attributes:
        method: Method tag, e.g. "efficient-vb".
        seed: Seed the run used.
        variational: Final q(theta) parameters.
        state_block: Final q(x) parameters (Gaussian VB only).
        kernel: Final kernel coefficients (Efficient VB only).
        proxy: Proxy parameter of the final kernel (Efficient VB only).
        elbo_trace: Per-iteration ELBO estimates.
        timings: Wall clock per phase in seconds.
        clamp_events: Number of clamped kernel coefficients over all calibrations.
        skipped_updates: Iterations whose gradient was not finite.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    method: str
    seed: int
    variational: VariationalParams
    state_block: Optional[StateBlockParams] = None
    kernel: Optional[KernelParams] = None
    proxy: Optional[ProxyParams] = None
    elbo_trace: np.ndarray
    timings: Dict[str, float] = {}
    clamp_events: int = 0
    skipped_updates: int = 0

    @property
    def n_iterations(self) -> int:
        return int(self.elbo_trace.shape[0])

    def final_elbo(self, window: int = 100) -> float:
        """Average of the last `window` finite ELBO values."""
        tail = self.elbo_trace[-window:]
        tail = tail[np.isfinite(tail)]
        return float(np.mean(tail)) if tail.size else float("nan")

    def elbo_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"iteration": np.arange(1, self.n_iterations + 1), "elbo": self.elbo_trace})

    def to_dict(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "seed": self.seed,
            "n_iterations": self.n_iterations,
            "mu": self.variational.mu.tolist(),
            "factors": self.variational.factors.tolist(),
            "d_diag": self.variational.d_diag.tolist(),
            "final_elbo": self.final_elbo(),
            "clamp_events": self.clamp_events,
            "skipped_updates": self.skipped_updates,
            "timings": self.timings,
        }

    def save_json(self, path: str):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    def __str__(self):
        return f"FitResult(method={self.method}, n_iterations={self.n_iterations}, final_elbo={self.final_elbo():.4f})"

    def __repr__(self):
        return self.__str__()


def default_factor_count(model: ModelSpec) -> int:
    return 1 if model.dim_state == 1 else 2


from efficient_vb.vb.efficient import fit_efficient_vb  # noqa: E402,F401
from efficient_vb.vb.gaussian import fit_gaussian_vb  # noqa: E402,F401
from efficient_vb.vb.hybrid import fit_hybrid_vb  # noqa: E402,F401
