from __future__ import annotations

from typing import Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, PrivateAttr
from scipy.linalg import solve_banded

from efficient_vb.dataset import Dataset
from efficient_vb.exceptions import CalibrationDegeneracyError
from efficient_vb.logging import logger
from efficient_vb.model import LOG_2PI, ModelSpec

CLAMP_MARGIN = 1e-8
RIDGE = 1e-10
CONDITION_LIMIT = 1e12


class ProxyParams(BaseModel):
    """Frozen constrained parameter value the state approximation is built at."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    values: np.ndarray

    @staticmethod
    def from_theta(model: ModelSpec, theta: np.ndarray) -> ProxyParams:
        return ProxyParams(values=model.inverse_transform(theta))

    def __str__(self):
        return f"ProxyParams(values={np.round(self.values, 4).tolist()})"

    def __repr__(self):
        return self.__str__()


class KernelParams(BaseModel):
    """Per-time kernel coefficients a_t = (b_t, c_t) of exp(b_t'x_t + c_t'x_t^2).

    Attributes:
        b: Linear coefficients, (T, n).
        c: Diagonal quadratic coefficients, (T, n).
        clamp_events: Number of times c_t was clamped during the calibration that produced it.
        max_residual: Largest absolute regression residual of that calibration.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    b: np.ndarray
    c: np.ndarray
    clamp_events: int = 0
    max_residual: float = 0.0

    @staticmethod
    def zeros(n_times: int, dim_state: int) -> KernelParams:
        return KernelParams(b=np.zeros((n_times, dim_state)), c=np.zeros((n_times, dim_state)))

    @property
    def n_times(self) -> int:
        return self.b.shape[0]

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.b**2) + np.sum(self.c**2)))

    def to_frame(self) -> pd.DataFrame:
        n = self.b.shape[1]
        columns = {"t": np.arange(1, self.n_times + 1)}
        for i in range(n):
            columns[f"b[{i + 1}]"] = self.b[:, i]
        for i in range(n):
            columns[f"c[{i + 1}]"] = self.c[:, i]
        return pd.DataFrame(columns)

    def to_csv(self, path: str):
        self.to_frame().to_csv(path, index=False)

    @staticmethod
    def from_csv(path: str) -> KernelParams:
        frame = pd.read_csv(path)
        b = frame[[col for col in frame.columns if col.startswith("b[")]].to_numpy(dtype=float)
        c = frame[[col for col in frame.columns if col.startswith("c[")]].to_numpy(dtype=float)
        return KernelParams(b=b, c=c)

    def __str__(self):
        return f"KernelParams(n_times={self.n_times}, norm={self.norm():.6g}, clamp_events={self.clamp_events})"

    def __repr__(self):
        return self.__str__()


def kernel_moments(b: np.ndarray, c: np.ndarray, mean: np.ndarray, cov: np.ndarray, t: int = 0):
    """Gaussian moments of exp(b'x + c'x^2) N(x; mean, cov) after normalization.

    Returns:
        (mu, V) with V = (cov^{-1} - 2 diag(c))^{-1} and mu = V (b + cov^{-1} mean).
    """
    prior_prec = np.linalg.inv(np.atleast_2d(cov))
    precision = prior_prec - 2.0 * np.diag(np.atleast_1d(c))
    try:
        np.linalg.cholesky(precision)
    except np.linalg.LinAlgError:
        raise CalibrationDegeneracyError(t)
    v = np.linalg.inv(precision)
    mu = v @ (np.atleast_1d(b) + prior_prec @ np.atleast_1d(mean))
    return mu, v


def kernel_log_chi(b: np.ndarray, c: np.ndarray, mean: np.ndarray, cov: np.ndarray, t: int = 0) -> float:
    """log of the integral of exp(b'x + c'x^2) N(x; mean, cov) over x."""
    cov = np.atleast_2d(cov)
    mean = np.atleast_1d(mean)
    mu, v = kernel_moments(b, c, mean, cov, t)
    prior_prec = np.linalg.inv(cov)
    return float(
        0.5 * (np.linalg.slogdet(v)[1] - np.linalg.slogdet(cov)[1])
        + 0.5 * mu @ np.linalg.solve(v, mu)
        - 0.5 * mean @ prior_prec @ mean
    )


def conditional_moments(
    model: ModelSpec,
    proxy: ProxyParams,
    kernel: KernelParams,
    t: int,
    x_prev: Optional[np.ndarray] = None,
    data: Optional[Dataset] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of q(x_t|x_{t-1}, y) for zero-based `t`.

    Example:
        >>> from efficient_vb.model import get_model
        >>> model = get_model("sv")
        >>> kernel = KernelParams.zeros(2, 1)
        >>> proxy = ProxyParams(values=np.array([0.0, 0.5, 1.0]))
        >>> mean, cov = conditional_moments(model, proxy, kernel, 1, np.array([2.0]))
        >>> float(mean[0]), float(cov[0, 0])
        (1.0, 1.0)
    """
    intercept, matrix, cov = model.transition_moments(proxy.values, data).at(t)
    mean = intercept if t == 0 else intercept + matrix @ np.atleast_1d(x_prev)
    return kernel_moments(kernel.b[t], kernel.c[t], mean, cov, t)


def chi(
    model: ModelSpec,
    proxy: ProxyParams,
    kernel: KernelParams,
    t: int,
    x_prev: Optional[np.ndarray] = None,
    data: Optional[Dataset] = None,
) -> float:
    """Normalizing constant of the kernel at zero-based time `t` given x_{t-1}."""
    intercept, matrix, cov = model.transition_moments(proxy.values, data).at(t)
    mean = intercept if t == 0 else intercept + matrix @ np.atleast_1d(x_prev)
    return float(np.exp(kernel_log_chi(kernel.b[t], kernel.c[t], mean, cov, t)))


class StateApprox(BaseModel):
    """The Gaussian state approximation q(x|y) = prod_t k(x_t, x_{t-1}) / chi(x_{t-1}).

    Each factor q(x_t|x_{t-1}, y) is N(alpha_t + A_t x_{t-1}, V_t). All per-time moments are
    computed once at construction.

    Attributes:
        model: The state space model.
        data: The observed data.
        proxy: Parameter value of the transition density inside the kernel.
        kernel: Kernel coefficients.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    model: ModelSpec
    data: Dataset
    proxy: ProxyParams
    kernel: KernelParams

    _intercepts: np.ndarray = PrivateAttr()
    _matrices: np.ndarray = PrivateAttr()
    _prior_prec: np.ndarray = PrivateAttr()
    _prior_logdet: np.ndarray = PrivateAttr()
    _precision: np.ndarray = PrivateAttr()
    _cov: np.ndarray = PrivateAttr()
    _chol: np.ndarray = PrivateAttr()
    _alpha: np.ndarray = PrivateAttr()
    _gain: np.ndarray = PrivateAttr()

    def model_post_init(self, __context):
        n_times = self.data.n_times
        n = self.model.dim_state
        intercepts, matrices, covs = self.model.transition_moments(self.proxy.values, self.data).stacked(n_times)
        prior_prec = np.linalg.inv(covs)
        eye = np.eye(n)
        precision = prior_prec - 2.0 * self.kernel.c[:, :, None] * eye[None, :, :]

        min_eig = np.linalg.eigvalsh(precision)[:, 0]
        if np.any(min_eig <= 0.0):
            raise CalibrationDegeneracyError(int(np.argmax(min_eig <= 0.0)))

        cov = np.linalg.inv(precision)
        cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
        self._intercepts = intercepts
        self._matrices = matrices
        self._prior_prec = prior_prec
        self._prior_logdet = np.linalg.slogdet(covs)[1]
        self._precision = precision
        self._cov = cov
        self._chol = np.linalg.cholesky(cov)
        self._alpha = np.einsum("tij,tj->ti", cov, self.kernel.b + np.einsum("tij,tj->ti", prior_prec, intercepts))
        self._gain = np.einsum("tij,tjk,tkl->til", cov, prior_prec, matrices)

    @property
    def n_times(self) -> int:
        return self.data.n_times

    @property
    def dim_state(self) -> int:
        return self.model.dim_state

    def sample(self, rng: np.random.Generator, n_paths: int = 1) -> Tuple[np.ndarray, np.ndarray]:
        """Draw `n_paths` state paths.

        The recursion x_t = alpha_t + A_t x_{t-1} + chol(V_t) e_t is solved for all paths at
        once as a unit lower-banded linear system.

        Returns:
            Paths of shape (n_paths, T, n) and their log q(x|y) values, (n_paths,).
        """
        n_times, n = self.n_times, self.dim_state
        e = rng.standard_normal((n_paths, n_times, n))
        rhs = self._alpha[None] + np.einsum("tij,stj->sti", self._chol, e)

        lower = 2 * n - 1
        banded = np.zeros((lower + 1, n_times * n))
        banded[0] = 1.0
        if n_times > 1:
            steps = n * np.arange(n_times - 1)
            for p in range(n):
                for q in range(n):
                    banded[n + p - q, q + steps] = -self._gain[1:, p, q]
        x = solve_banded((lower, 0), banded, rhs.reshape(n_paths, n_times * n).T, check_finite=False)
        x = x.T.reshape(n_paths, n_times, n)

        log_q = (
            -0.5 * n_times * n * LOG_2PI
            - np.sum(np.log(np.diagonal(self._chol, axis1=1, axis2=2)))
            - 0.5 * np.sum(e**2, axis=(1, 2))
        )
        return x, log_q

    def log_chi_at(self, t: int, x_prev: np.ndarray) -> np.ndarray:
        """log chi of the kernel at zero-based `t` for a batch of x_{t-1}, shape (..., n)."""
        mean = self._intercepts[t] + np.einsum("ij,...j->...i", self._matrices[t], x_prev)
        mu = self._alpha[t] + np.einsum("ij,...j->...i", self._gain[t], x_prev)
        logdet_v = -np.linalg.slogdet(self._precision[t])[1]
        return (
            0.5 * (logdet_v - self._prior_logdet[t])
            + 0.5 * np.einsum("...i,ij,...j->...", mu, self._precision[t], mu)
            - 0.5 * np.einsum("...i,ij,...j->...", mean, self._prior_prec[t], mean)
        )

    def log_density(self, x: np.ndarray) -> np.ndarray:
        """log q(x|y) by direct evaluation of sum_t [a_t'T(x_t) + log p(x_t|x_{t-1}) - log chi_t].

        Args:
            x: Paths of shape (..., T, n).
        """
        n = self.dim_state
        lagged = np.concatenate([np.zeros_like(x[..., :1, :]), x[..., :-1, :]], axis=-2)
        mean = self._intercepts + np.einsum("tij,...tj->...ti", self._matrices, lagged)
        resid = x - mean
        log_p = -0.5 * (n * LOG_2PI + self._prior_logdet) - 0.5 * np.einsum(
            "...ti,tij,...tj->...t", resid, self._prior_prec, resid
        )
        tilt = np.sum(self.kernel.b * x + self.kernel.c * x**2, axis=-1)

        mu = self._alpha + np.einsum("tij,...tj->...ti", self._gain, lagged)
        logdet_v = -np.linalg.slogdet(self._precision)[1]
        log_chi = (
            0.5 * (logdet_v - self._prior_logdet)
            + 0.5 * np.einsum("...ti,tij,...tj->...t", mu, self._precision, mu)
            - 0.5 * np.einsum("...ti,tij,...tj->...t", mean, self._prior_prec, mean)
        )
        return np.sum(tilt + log_p - log_chi, axis=-1)

    def conditional(self, t: int, x_prev: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
        """Mean and covariance of q(x_t|x_{t-1}, y)."""
        if t == 0:
            return self._alpha[0].copy(), self._cov[0].copy()
        return self._alpha[t] + self._gain[t] @ np.atleast_1d(x_prev), self._cov[t].copy()

    def marginal_moments(self) -> Tuple[np.ndarray, np.ndarray]:
        """Marginal means (T, n) and covariances (T, n, n) of x_t under q(x|y)."""
        n_times, n = self.n_times, self.dim_state
        means = np.empty((n_times, n))
        covs = np.empty((n_times, n, n))
        means[0], covs[0] = self._alpha[0], self._cov[0]
        for t in range(1, n_times):
            a = self._gain[t]
            means[t] = self._alpha[t] + a @ means[t - 1]
            covs[t] = self._cov[t] + a @ covs[t - 1] @ a.T
        return means, covs

    def __str__(self):
        return f"StateApprox(model={self.model.name}, n_times={self.n_times}, proxy={self.proxy})"

    def __repr__(self):
        return self.__str__()


def sample_states(approx: StateApprox, seed) -> Tuple[np.ndarray, float]:
    """One path from q(x|y) and its log density."""
    x, log_q = approx.sample(np.random.default_rng(seed), 1)
    return x[0], float(log_q[0])


def default_path_count(dim_state: int) -> int:
    """Three times the number of kernel coefficients per time point."""
    return 3 * 2 * dim_state


def _least_squares(design: np.ndarray, target: np.ndarray) -> np.ndarray:
    coef, _, rank, singular = np.linalg.lstsq(design, target, rcond=None)
    if rank < design.shape[1] or singular[0] / singular[-1] > CONDITION_LIMIT:
        gram = design.T @ design + RIDGE * np.eye(design.shape[1])
        coef = np.linalg.solve(gram, design.T @ target)
    return coef


def calibrate(
    model: ModelSpec,
    data: Dataset,
    proxy: ProxyParams,
    a_init: Optional[KernelParams] = None,
    n_paths: Optional[int] = None,
    seed=None,
) -> KernelParams:
    """One backward sweep of least-squares regressions fitting the kernel to the data.

    Draws `n_paths` paths from q(x|y) under `a_init`, then for t = T, ..., 1 regresses
    log p(y_t|x_t) + log chi_{t+1}(x_t) on (1, x_t, x_t^2) across paths and keeps the slope
    coefficients as a_t. Coefficients that would make q improper are clamped.

    Args:
        model: The state space model.
        data: Observed data.
        proxy: Parameter value the kernel is calibrated at.
        a_init: Kernel used to draw the paths. Zeros when omitted.
        n_paths: Number of paths S, by default three times the kernel dimension.
        seed: Seed of the path draws.

    Returns:
        The calibrated kernel with clamp count and largest residual.
    """
    n_times, n = data.n_times, model.dim_state
    n_paths = n_paths or default_path_count(n)
    if n_paths < 2 * n + 1:
        raise CalibrationDegeneracyError(n_times - 1, f"Need at least {2 * n + 1} paths, got {n_paths}")
    a_init = a_init if a_init is not None else KernelParams.zeros(n_times, n)

    approx = StateApprox(model=model, data=data, proxy=proxy, kernel=a_init)
    x, _ = approx.sample(np.random.default_rng(seed), n_paths)
    log_meas = model.measurement_logdensity(data, x, proxy.values)
    prior_prec = approx._prior_prec
    min_prior_eig = np.linalg.eigvalsh(prior_prec)[:, 0]

    b = np.zeros((n_times, n))
    c = np.zeros((n_times, n))
    next_log_chi = np.zeros(n_paths)
    clamp_events = 0
    max_residual = 0.0
    ones = np.ones((n_paths, 1))

    for t in range(n_times - 1, -1, -1):
        target = log_meas[:, t] + next_log_chi
        xt = x[:, t, :]
        design = np.hstack([ones, xt, xt**2])
        coef = _least_squares(design, target)
        max_residual = max(max_residual, float(np.max(np.abs(target - design @ coef))))
        b_t, c_t = coef[1 : 1 + n], coef[1 + n :]

        precision = prior_prec[t] - 2.0 * np.diag(c_t)
        if np.linalg.eigvalsh(precision)[0] <= 0.0:
            c_t = np.minimum(c_t, (min_prior_eig[t] - CLAMP_MARGIN) / 2.0)
            clamp_events += 1
        b[t], c[t] = b_t, c_t

        if t > 0:
            next_log_chi = _batch_log_chi(b_t, c_t, approx, t, x[:, t - 1, :])

    if clamp_events:
        logger.warning(f"Kernel calibration clamped {clamp_events} quadratic coefficients")
    return KernelParams(b=b, c=c, clamp_events=clamp_events, max_residual=max_residual)


def _batch_log_chi(b_t, c_t, approx: StateApprox, t: int, x_prev: np.ndarray) -> np.ndarray:
    prior_prec = approx._prior_prec[t]
    mean = approx._intercepts[t] + x_prev @ approx._matrices[t].T
    precision = prior_prec - 2.0 * np.diag(c_t)
    v = np.linalg.inv(precision)
    mu = (b_t + mean @ prior_prec) @ v
    logdet_v = -np.linalg.slogdet(precision)[1]
    return (
        0.5 * (logdet_v - approx._prior_logdet[t])
        + 0.5 * np.einsum("si,ij,sj->s", mu, precision, mu)
        - 0.5 * np.einsum("si,ij,sj->s", mean, prior_prec, mean)
    )
