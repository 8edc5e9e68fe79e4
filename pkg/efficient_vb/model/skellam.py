from __future__ import annotations

from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.special import expit, gammaln, ive, logit

from efficient_vb.dataset import Dataset
from efficient_vb.exceptions import ConfigurationError, ParameterDomainError
from efficient_vb.model import ModelSpec, TransitionMoments, register_model
from efficient_vb.model.seasonal import build_seasonal_basis

N_SPLINE = 3


def bessel_i_scaled(nu, z):
    """Exponentially scaled modified Bessel function I_nu(z) exp(-z).

    Example:
        >>> round(float(bessel_i_scaled(0, 1.0)), 5)
        0.46576
    """
    z = np.asarray(z, dtype=float)
    if np.any(z < 0):
        raise ParameterDomainError("bessel_i_scaled requires z >= 0")
    return ive(nu, z)


def skellam_pmf(y, sigma2, kappa):
    """Zero-inflated Skellam probability kappa 1{y=0} + (1 - kappa) exp(-s) I_|y|(s)."""
    y = np.asarray(y)
    sigma2 = np.asarray(sigma2, dtype=float)
    return kappa * (y == 0) + (1.0 - kappa) * bessel_i_scaled(np.abs(y), sigma2)


def skellam_log_terms(y_abs: np.ndarray, log_sigma2: np.ndarray, kappa: np.ndarray):
    """log p(y|x) and its derivatives with respect to log sigma^2 and logit(kappa).

    For y != 0 the derivative uses the ratio I_{|y|-1}/I_|y| so that kappa cancels; where the
    scaled Bessel value underflows the small-argument limits are used.
    """
    z = np.exp(log_sigma2)
    zero = y_abs == 0
    n = np.broadcast_to(y_abs, z.shape).astype(float)

    i_n = ive(n, z)
    i_prev = ive(np.abs(n - 1.0), z)
    i_1 = ive(1.0, z)

    with np.errstate(divide="ignore", invalid="ignore"):
        small = i_n <= 0.0
        log_i_n = np.where(small, n * (log_sigma2 - np.log(2.0)) - gammaln(n + 1.0) - z, np.log(np.where(small, 1.0, i_n)))
        ratio = np.where(small, 2.0 * n / z, i_prev / np.where(small, 1.0, i_n))

        p_zero = kappa + (1.0 - kappa) * i_n
        logp = np.where(zero, np.log(np.where(zero, p_zero, 1.0)), np.log1p(-kappa) + log_i_n)
        d_log_sigma2 = np.where(
            zero,
            (1.0 - kappa) * (i_1 - i_n) * z / np.where(zero, p_zero, 1.0),
            (ratio - n / z - 1.0) * z,
        )
        d_kappa_logit = np.where(zero, (1.0 - i_n) * kappa * (1.0 - kappa) / np.where(zero, p_zero, 1.0), -kappa)
    return logp, d_log_sigma2, d_kappa_logit


def _logistic_logpdf(u: np.ndarray) -> np.ndarray:
    return u - 2.0 * np.logaddexp(0.0, u)


class SkellamParams(BaseModel):
    """Unconstrained Skellam SV parameters.

    Attributes:
        kappa_logit: logit of the zero-inflation probabilities, (N,).
        x_bar: State intercepts, (N,).
        l: Column-major half-vectorization of L*, the Cholesky factor of the state precision
            with log-transformed diagonal.
        omega_logit: logit of the persistences, (N,).
        beta: Seasonal spline coefficients, (N, 3).
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    kappa_logit: np.ndarray
    x_bar: np.ndarray
    l: np.ndarray
    omega_logit: np.ndarray
    beta: np.ndarray

    @staticmethod
    def from_vector(theta: np.ndarray, n_series: int) -> SkellamParams:
        n = n_series
        n_l = n * (n + 1) // 2
        theta = np.asarray(theta, dtype=float)
        return SkellamParams(
            kappa_logit=theta[:n],
            x_bar=theta[n : 2 * n],
            l=theta[2 * n : 2 * n + n_l],
            omega_logit=theta[2 * n + n_l : 3 * n + n_l],
            beta=theta[3 * n + n_l :].reshape(n, N_SPLINE),
        )

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.kappa_logit, self.x_bar, self.l, self.omega_logit, self.beta.ravel()])

    @property
    def n_series(self) -> int:
        return self.x_bar.shape[0]

    @property
    def kappa(self) -> np.ndarray:
        return expit(self.kappa_logit)

    @property
    def omega(self) -> np.ndarray:
        return expit(self.omega_logit)

    @property
    def chol(self) -> np.ndarray:
        """L, lower triangular with positive diagonal, state precision LL'."""
        rows, cols = vech_indices(self.n_series)
        lower = np.zeros((self.n_series, self.n_series))
        lower[rows, cols] = self.l
        diag = np.arange(self.n_series)
        lower[diag, diag] = np.exp(lower[diag, diag])
        return lower


def vech_indices(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Row and column indices of the lower triangle in column-major order."""
    cols, rows = np.triu_indices(n)
    return rows, cols


@register_model
class SkellamModel(ModelSpec):
    """Multivariate zero-inflated Skellam stochastic volatility model.

    y_it is zero-inflated Skellam with variance parameter sigma2_it = exp(s_it + x_it) where
    s_it = W_t' beta_i is an intraday seasonal spline. The log-variances follow
    x_t = x_bar + Omega x_{t-1} + N(0, (LL')^{-1}) with Omega = diag(omega) and x_0 fixed at
    the log sample variances of the observed series.

    Attributes:
        n_series: Number of series N.
        intraday_periods: Grid points per trading day.
        knots: Four spline knots as grid indices.
        prior_level_var: Prior variance of x_bar.
        prior_beta_var: Prior variance of each spline coefficient.
    """

    name = "skellam"

    n_series: int = 1
    intraday_periods: int = 390
    knots: List[float] = [0.0, 30.0, 180.0, 389.0]
    prior_level_var: float = 100.0
    prior_beta_var: float = 100.0

    @property
    def dim_state(self) -> int:
        return self.n_series

    @property
    def dim_theta(self) -> int:
        n = self.n_series
        return 4 * n + n * (n + 1) // 2 + 2 * n

    @property
    def parameter_names(self) -> List[str]:
        n = self.n_series
        rows, cols = vech_indices(n)
        names = [f"kappa[{i + 1}]" for i in range(n)]
        names += [f"x_bar[{i + 1}]" for i in range(n)]
        names += [f"L[{i + 1},{j + 1}]" for i, j in zip(rows, cols)]
        names += [f"omega[{i + 1}]" for i in range(n)]
        names += [f"beta[{i + 1},{j + 1}]" for i in range(n) for j in range(N_SPLINE)]
        return names

    def _blocks(self, params: np.ndarray):
        n = self.n_series
        n_l = n * (n + 1) // 2
        return (
            params[:n],
            params[n : 2 * n],
            params[2 * n : 2 * n + n_l],
            params[2 * n + n_l : 3 * n + n_l],
            params[3 * n + n_l :],
        )

    def check_domain(self, params: np.ndarray, allow_boundary: bool = False):
        params = np.asarray(params, dtype=float)
        if params.shape != (self.dim_theta,) or not np.all(np.isfinite(params)):
            raise ParameterDomainError(f"Expected {self.dim_theta} finite parameters, got shape {params.shape}")
        kappa, _, l_vech, omega, _ = self._blocks(params)
        rows, cols = vech_indices(self.n_series)
        diag = l_vech[rows == cols]
        if allow_boundary:
            ok = np.all((kappa >= 0) & (kappa <= 1)) and np.all((omega >= 0) & (omega < 1))
        else:
            ok = np.all((kappa > 0) & (kappa < 1)) and np.all((omega > 0) & (omega < 1))
        if not ok or np.any(diag <= 0):
            raise ParameterDomainError("Require 0 < kappa < 1, 0 < omega < 1 and a positive diagonal of L")

    def transform(self, params: np.ndarray) -> np.ndarray:
        params = np.asarray(params, dtype=float)
        self.check_domain(params)
        kappa, x_bar, l_vech, omega, beta = self._blocks(params)
        rows, cols = vech_indices(self.n_series)
        l_star = np.where(rows == cols, np.log(np.where(rows == cols, l_vech, 1.0)), l_vech)
        return np.concatenate([logit(kappa), x_bar, l_star, logit(omega), beta])

    def inverse_transform(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        kappa_logit, x_bar, l_star, omega_logit, beta = self._blocks(theta)
        rows, cols = vech_indices(self.n_series)
        l_vech = np.where(rows == cols, np.exp(l_star), l_star)
        return np.concatenate([expit(kappa_logit), x_bar, l_vech, expit(omega_logit), beta])

    def unpack(self, theta: np.ndarray) -> SkellamParams:
        return SkellamParams.from_vector(theta, self.n_series)

    def initial_states(self, data: Optional[Dataset], x_bar: np.ndarray, omega: np.ndarray) -> np.ndarray:
        """x_0: log sample variances of the data, or the stationary mean when simulating."""
        if data is None:
            return x_bar / (1.0 - omega)
        return np.log(np.maximum(np.var(data.observations, axis=0), 1e-8))

    def transition_moments(self, params: np.ndarray, data: Optional[Dataset] = None) -> TransitionMoments:
        _, x_bar, l_vech, omega, _ = self._blocks(np.asarray(params, dtype=float))
        rows, cols = vech_indices(self.n_series)
        lower = np.zeros((self.n_series, self.n_series))
        lower[rows, cols] = l_vech
        sigma = np.linalg.inv(lower @ lower.T)
        x0 = self.initial_states(data, x_bar, omega)
        return TransitionMoments(
            initial_mean=x_bar + omega * x0,
            initial_cov=sigma,
            intercept=x_bar,
            matrix=np.diag(omega),
            cov=sigma,
        )

    def covariates_for(self, n_times: int) -> Optional[np.ndarray]:
        times = np.arange(n_times) % self.intraday_periods
        return build_seasonal_basis(times, self.knots).values

    def _basis(self, data: Dataset) -> np.ndarray:
        if data.covariates is not None:
            return data.covariates
        return self.covariates_for(data.n_times)

    def _log_terms(self, data: Dataset, x: np.ndarray, kappa: np.ndarray, beta: np.ndarray):
        seasonal = self._basis(data) @ beta.reshape(self.n_series, N_SPLINE).T
        y_abs = np.abs(data.observations)
        return skellam_log_terms(y_abs, seasonal + x, kappa)

    def measurement_logdensity(self, data: Dataset, x: np.ndarray, params: np.ndarray) -> np.ndarray:
        kappa, _, _, _, beta = self._blocks(np.asarray(params, dtype=float))
        logp, _, _ = self._log_terms(data, x, kappa, beta)
        return logp.sum(axis=-1)

    def measurement_grad_x(self, data: Dataset, x: np.ndarray, params: np.ndarray) -> np.ndarray:
        kappa, _, _, _, beta = self._blocks(np.asarray(params, dtype=float))
        return self._log_terms(data, x, kappa, beta)[1]

    def measurement_logdensity_at(self, data: Dataset, t: int, x_t: np.ndarray, params: np.ndarray) -> np.ndarray:
        kappa, _, _, _, beta = self._blocks(np.asarray(params, dtype=float))
        seasonal = self._basis(data)[t] @ beta.reshape(self.n_series, N_SPLINE).T
        logp, _, _ = skellam_log_terms(np.abs(data.observations[t]), seasonal + np.asarray(x_t, dtype=float), kappa)
        return logp.sum(axis=-1)

    def log_prior(self, theta: np.ndarray) -> Tuple[float, np.ndarray]:
        p = self.unpack(theta)
        n = self.n_series
        rows, cols = vech_indices(n)
        on_diag = rows == cols
        lower = p.chol
        prec_inv = np.linalg.inv(lower @ lower.T)

        # Jeffreys-type prior on L*: -(N+1)/2 log|LL'| + sum_i (N + 2 - i) L*_ii
        weights = (n + 2 - (rows + 1)) * on_diag
        logdet = 2.0 * np.sum(p.l[on_diag])
        value = (
            np.sum(_logistic_logpdf(p.kappa_logit))
            - 0.5 * n * np.log(2.0 * np.pi * self.prior_level_var)
            - np.sum(p.x_bar**2) / (2.0 * self.prior_level_var)
            - 0.5 * (n + 1) * logdet
            + np.sum(weights * p.l)
            + np.sum(_logistic_logpdf(p.omega_logit))
            - 0.5 * p.beta.size * np.log(2.0 * np.pi * self.prior_beta_var)
            - np.sum(p.beta**2) / (2.0 * self.prior_beta_var)
        )
        grad_l = self._chol_gradient(-(n + 1) * prec_inv, lower) + weights
        grad = SkellamParams(
            kappa_logit=1.0 - 2.0 * p.kappa,
            x_bar=-p.x_bar / self.prior_level_var,
            l=grad_l,
            omega_logit=1.0 - 2.0 * p.omega,
            beta=-p.beta / self.prior_beta_var,
        )
        return float(value), grad.to_vector()

    def _chol_gradient(self, a: np.ndarray, lower: np.ndarray) -> np.ndarray:
        """Gradient over l of a function f(LL') whose derivative with respect to L is a @ L.

        Equals the vech part of vec(A)'(I + K)(L kron I)/2 with the log-diagonal chain factor.
        """
        rows, cols = vech_indices(self.n_series)
        d_lower = a @ lower
        return d_lower[rows, cols] * np.where(rows == cols, lower[rows, cols], 1.0)

    def log_joint_grad(self, theta: np.ndarray, x: np.ndarray, data: Dataset) -> np.ndarray:
        _, prior_grad = self.log_prior(theta)
        if x.shape[0] == 0:
            return prior_grad
        p = self.unpack(theta)
        kappa, omega, lower = p.kappa, p.omega, p.chol
        precision = lower @ lower.T

        _, d_log_sigma2, d_kappa_logit = self._log_terms(data, x, kappa, p.beta)

        x0 = self.initial_states(data, p.x_bar, omega)
        lagged = np.vstack([x0[None, :], x[:-1]])
        resid = x - p.x_bar - lagged * omega
        p_resid = resid @ precision
        n_times = x.shape[0]
        scatter = resid.T @ resid

        grad = SkellamParams(
            kappa_logit=d_kappa_logit.sum(axis=0),
            x_bar=p_resid.sum(axis=0),
            l=self._chol_gradient(n_times * np.linalg.inv(precision) - scatter, lower),
            omega_logit=np.sum(p_resid * lagged, axis=0) * omega * (1.0 - omega),
            beta=(self._basis(data).T @ d_log_sigma2).T,
        )
        return grad.to_vector() + prior_grad

    def simulate_observations(
        self, x: np.ndarray, params: np.ndarray, covariates: Optional[np.ndarray], rng: np.random.Generator
    ) -> np.ndarray:
        kappa, _, _, _, beta = self._blocks(np.asarray(params, dtype=float))
        basis = covariates if covariates is not None else self.covariates_for(x.shape[0])
        sigma2 = np.exp(basis @ beta.reshape(self.n_series, N_SPLINE).T + x)
        y = rng.poisson(sigma2 / 2.0) - rng.poisson(sigma2 / 2.0)
        inflated = rng.uniform(size=y.shape) < kappa
        return np.where(inflated, 0, y).astype(float)

    def initial_guess(self, data: Dataset) -> np.ndarray:
        n = self.n_series
        y = data.observations
        kappa = np.clip(0.5 * np.mean(y == 0, axis=0), 0.05, 0.9)
        omega = np.full(n, 0.9)
        x_bar = (1.0 - omega) * self.initial_states(data, np.zeros(n), omega)
        rows, cols = vech_indices(n)
        l_vech = np.where(rows == cols, np.sqrt(10.0), 0.0)
        return np.concatenate([kappa, x_bar, l_vech, omega, np.zeros(N_SPLINE * n)])

    def params_from_mapping(self, mapping: Mapping) -> np.ndarray:
        """Constrained parameters from lists: kappa, x_bar, omega, beta and Sigma (or L)."""
        n = self.n_series
        try:
            kappa = np.asarray(mapping["kappa"], dtype=float).reshape(n)
            x_bar = np.asarray(mapping["x_bar"], dtype=float).reshape(n)
            omega = np.asarray(mapping["omega"], dtype=float).reshape(n)
            beta = np.asarray(mapping.get("beta", np.zeros((n, N_SPLINE))), dtype=float).reshape(n * N_SPLINE)
            if "L" in mapping:
                lower = np.asarray(mapping["L"], dtype=float).reshape(n, n)
            else:
                sigma = np.asarray(mapping["Sigma"], dtype=float).reshape(n, n)
                lower = np.linalg.cholesky(np.linalg.inv(sigma))
        except (KeyError, ValueError, np.linalg.LinAlgError) as error:
            raise ConfigurationError(f"Invalid Skellam parameter mapping: {error}")
        rows, cols = vech_indices(n)
        return np.concatenate([kappa, x_bar, lower[rows, cols], omega, beta])

    def describe(self, theta: np.ndarray) -> Dict[str, float]:
        p = self.unpack(theta)
        lower = p.chol
        sigma = np.linalg.inv(lower @ lower.T)
        n = self.n_series
        out = {}
        for i in range(n):
            out[f"kappa[{i + 1}]"] = float(p.kappa[i])
        for i in range(n):
            out[f"x_bar[{i + 1}]"] = float(p.x_bar[i])
        for i in range(n):
            out[f"omega[{i + 1}]"] = float(p.omega[i])
        for i in range(n):
            for j in range(i, n):
                out[f"Sigma[{i + 1},{j + 1}]"] = float(sigma[i, j])
        for i in range(n):
            for j in range(N_SPLINE):
                out[f"beta[{i + 1},{j + 1}]"] = float(p.beta[i, j])
        return out


def skellam_log_joint_grad(
    model: SkellamModel, theta: np.ndarray, x: np.ndarray, data: Optional[Dataset]
) -> np.ndarray:
    """Gradient of log p(y,x|theta)p(theta) over the unconstrained Skellam parameters.

    With no state rows (T = 0) only the prior contributes and `data` may be None.
    """
    return model.log_joint_grad(np.asarray(theta, dtype=float), np.asarray(x, dtype=float), data)


def skellam_state_grad(model: SkellamModel, theta: np.ndarray, x: np.ndarray, data: Dataset) -> np.ndarray:
    """Gradient of log p(y|x)p(x|theta) over the state path, flattened time-major to (T*N,)."""
    return model.state_grad(np.asarray(theta, dtype=float), np.asarray(x, dtype=float), data).ravel()
