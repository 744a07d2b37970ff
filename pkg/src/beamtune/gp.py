"""Exact Gaussian-process regression with a Matérn-5/2 kernel.

Inputs live in whatever space the caller provides (the optimiser
normalises settings before fitting).  Targets are standardised
internally.  Hyperparameters (per-dimension lengthscales, signal
variance, noise variance) are fitted by maximising the log marginal
likelihood with the simplex method in log-space, restarted from a
fixed default plus seeded log-uniform draws.  The predictive variance
is that of the latent function, without the observation noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .baselines import nelder_mead
from .errors import InvalidParameterError

_SQRT5 = math.sqrt(5.0)
_LOG_2PI = math.log(2.0 * math.pi)

DEFAULT_LENGTHSCALE_BOUNDS = (1e-2, 1e2)
DEFAULT_SIGNAL_BOUNDS = (1e-3, 1e3)
DEFAULT_NOISE_BOUNDS = (1e-8, 1.0)
DEFAULT_FIT_RESTARTS = 4
DEFAULT_FIT_EVALS = 70

# Relative to the signal variance; applied only when the plain Cholesky
# factorisation fails, then doubled up to three times.
BASE_JITTER = 1e-6


@dataclass(frozen=True)
class GPHyperparameters:
    lengthscales: tuple[float, ...]
    signal_variance: float
    noise_variance: float

    def __post_init__(self) -> None:
        values = np.array(self.lengthscales + (self.signal_variance, self.noise_variance))
        if values.size < 3 or not np.all(np.isfinite(values)) or np.any(values <= 0):
            raise InvalidParameterError("hyperparameters must be positive and finite")

    def to_log_vector(self) -> np.ndarray:
        return np.log(
            np.array(self.lengthscales + (self.signal_variance, self.noise_variance))
        )

    @staticmethod
    def from_log_vector(theta: np.ndarray) -> "GPHyperparameters":
        values = np.exp(np.asarray(theta, dtype=float))
        return GPHyperparameters(
            lengthscales=tuple(values[:-2]),
            signal_variance=float(values[-2]),
            noise_variance=float(values[-1]),
        )


def matern52(xa, xb, lengthscales, signal_variance=1.0) -> np.ndarray:
    """Matérn-5/2 covariance matrix between two point sets."""
    xa = np.atleast_2d(np.asarray(xa, dtype=float))
    xb = np.atleast_2d(np.asarray(xb, dtype=float))
    scales = np.asarray(lengthscales, dtype=float)
    diff = (xa[:, None, :] - xb[None, :, :]) / scales
    s = _SQRT5 * np.sqrt(np.sum(diff * diff, axis=-1))
    return signal_variance * (1.0 + s + s * s / 3.0) * np.exp(-s)


def _cholesky_with_jitter(
    covariance: np.ndarray, signal_variance: float
) -> tuple[np.ndarray, float]:
    eye = np.eye(covariance.shape[0])
    jitter = 0.0
    for attempt in range(5):
        try:
            return np.linalg.cholesky(covariance + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter = BASE_JITTER * signal_variance * (2.0**attempt)
    raise np.linalg.LinAlgError("covariance not positive definite even with jitter")


def log_marginal_likelihood(x, y, hyper: GPHyperparameters) -> float:
    """Log marginal likelihood of ``y`` under the noisy-kernel model."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    kernel = matern52(x, x, hyper.lengthscales, hyper.signal_variance)
    kernel += hyper.noise_variance * np.eye(len(y))
    chol, _ = _cholesky_with_jitter(kernel, hyper.signal_variance)
    alpha = cho_solve((chol, True), y)
    return float(
        -0.5 * y @ alpha - np.sum(np.log(np.diag(chol))) - 0.5 * len(y) * _LOG_2PI
    )


@dataclass
class GaussianProcess:
    x: np.ndarray
    y_mean: float
    y_sd: float
    hyper: GPHyperparameters
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float
    lml: float
    flags: tuple[str, ...] = field(default_factory=tuple)

    def predict(self, x_star) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and standard deviation of the latent function."""
        x_star = np.atleast_2d(np.asarray(x_star, dtype=float))
        cross = matern52(x_star, self.x, self.hyper.lengthscales, self.hyper.signal_variance)
        mean = cross @ self.alpha
        v = solve_triangular(self.chol, cross.T, lower=True)
        variance = self.hyper.signal_variance - np.sum(v * v, axis=0)
        variance = np.maximum(variance, 0.0)
        return self.y_mean + self.y_sd * mean, self.y_sd * np.sqrt(variance)


def _build_gp(x, y_std, y_mean, y_sd, hyper, flags) -> GaussianProcess:
    kernel = matern52(x, x, hyper.lengthscales, hyper.signal_variance)
    kernel += hyper.noise_variance * np.eye(len(y_std))
    chol, jitter = _cholesky_with_jitter(kernel, hyper.signal_variance)
    alpha = cho_solve((chol, True), y_std)
    lml = float(
        -0.5 * y_std @ alpha
        - np.sum(np.log(np.diag(chol)))
        - 0.5 * len(y_std) * _LOG_2PI
    )
    return GaussianProcess(
        x=x, y_mean=y_mean, y_sd=y_sd, hyper=hyper,
        chol=chol, alpha=alpha, jitter=jitter, lml=lml, flags=flags,
    )


def _standardise(y: np.ndarray) -> tuple[np.ndarray, float, float]:
    y_mean = float(np.mean(y))
    y_sd = float(np.std(y))
    if y_sd == 0.0:
        y_sd = 1.0
    return (y - y_mean) / y_sd, y_mean, y_sd


def build_gp(x, y, hyper: GPHyperparameters, flags: tuple[str, ...] = ()) -> GaussianProcess:
    """Posterior state for fixed hyperparameters, without any fitting."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if x.shape[0] != y.shape[0] or x.shape[0] == 0:
        raise InvalidParameterError(
            f"need matching non-empty x, y; got {x.shape} and {y.shape}"
        )
    y_std, y_mean, y_sd = _standardise(y)
    return _build_gp(x, y_std, y_mean, y_sd, hyper, flags)


def fit_gp(
    x,
    y,
    *,
    seed: int = 0,
    n_restarts: int = DEFAULT_FIT_RESTARTS,
    max_fit_evals: int = DEFAULT_FIT_EVALS,
    initial_hyper: GPHyperparameters | None = None,
    lengthscale_bounds: tuple[float, float] = DEFAULT_LENGTHSCALE_BOUNDS,
    signal_bounds: tuple[float, float] = DEFAULT_SIGNAL_BOUNDS,
    noise_bounds: tuple[float, float] = DEFAULT_NOISE_BOUNDS,
) -> GaussianProcess:
    """Fit hyperparameters by marginal likelihood and return the posterior state.

    Restart zero starts from unit lengthscales, unit signal variance
    (the targets are standardised first), and a small noise floor, or
    from ``initial_hyper`` when given (warm start); the remaining
    restarts start log-uniform inside the bounds.  Each likelihood
    evaluation clamps the log-parameters to the bounds, so the search
    cannot leave them.  If every restart fails the fallback is the
    restart-zero point with a flag recorded on the model.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if x.shape[0] != y.shape[0] or x.shape[0] == 0:
        raise InvalidParameterError(
            f"need matching non-empty x, y; got {x.shape} and {y.shape}"
        )
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise InvalidParameterError("training data must be finite")
    n, dim = x.shape

    y_std, y_mean, y_sd = _standardise(y)

    log_lo = np.log(np.array([lengthscale_bounds[0]] * dim + [signal_bounds[0], noise_bounds[0]]))
    log_hi = np.log(np.array([lengthscale_bounds[1]] * dim + [signal_bounds[1], noise_bounds[1]]))

    def negative_lml(theta: np.ndarray) -> float:
        clamped = np.clip(theta, log_lo, log_hi)
        try:
            value = log_marginal_likelihood(
                x, y_std, GPHyperparameters.from_log_vector(clamped)
            )
        except np.linalg.LinAlgError:
            return float("inf")
        if not np.isfinite(value):
            return float("inf")
        return -value

    default_theta = np.concatenate([np.zeros(dim), [0.0, math.log(1e-4)]])
    default_theta = np.clip(default_theta, log_lo, log_hi)
    if initial_hyper is not None:
        if len(initial_hyper.lengthscales) != dim:
            raise InvalidParameterError("initial_hyper dimensionality mismatch")
        starts = [np.clip(initial_hyper.to_log_vector(), log_lo, log_hi)]
    else:
        starts = [default_theta]
    for restart in range(1, n_restarts):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 37, restart]))
        starts.append(rng.uniform(log_lo, log_hi))

    best_theta = None
    best_value = float("inf")
    for restart, theta0 in enumerate(starts):
        simplex = np.tile(theta0, (dim + 3, 1))
        simplex[1:] += 0.3 * np.eye(dim + 2)
        result = nelder_mead(
            negative_lml,
            simplex,
            max_evals=max_fit_evals,
            xatol=1e-2,
            fatol=1e-3,
            rng=np.random.default_rng(np.random.SeedSequence([seed, 41, restart])),
        )
        if np.isfinite(result.f_best) and result.f_best < best_value:
            best_value = result.f_best
            best_theta = np.clip(result.x_best, log_lo, log_hi)

    flags: tuple[str, ...] = ()
    if best_theta is None:
        best_theta = default_theta
        flags = ("hyper-fit-fallback",)

    hyper = GPHyperparameters.from_log_vector(best_theta)
    return _build_gp(x, y_std, y_mean, y_sd, hyper, flags)
