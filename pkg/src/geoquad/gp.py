"""Exact Gaussian-process regression with ARD kernels and rank-1 updates.

The model is noise-free interpolation: observations enter the Gram matrix
with only a small jitter on the diagonal for numerical stability.  The
Cholesky factor is maintained incrementally so that acquisition loops can
add one observation at a time without refactorizing, and hyperparameters
are fit by maximizing the exact log marginal likelihood with analytic
gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from .errors import DuplicateInputError, NumericalError, ValidationError

__all__ = [
    "RBFKernel",
    "Matern52Kernel",
    "GaussianProcess",
    "BASE_JITTER",
    "MAX_JITTER",
    "DUPLICATE_TOL",
]

BASE_JITTER = 1e-10
MAX_JITTER = 1e-6
DUPLICATE_TOL = 1e-10

_SQRT5 = math.sqrt(5.0)


def _validate_kernel_params(lengthscales: np.ndarray, output_scale: float) -> np.ndarray:
    ls = np.asarray(lengthscales, dtype=float)
    if ls.ndim != 1 or ls.size == 0:
        raise ValidationError("lengthscales must be a 1-D array with at least one entry")
    if not np.all(np.isfinite(ls)) or np.any(ls <= 0):
        raise ValidationError("lengthscales must be finite and positive")
    if not np.isfinite(output_scale) or output_scale <= 0:
        raise ValidationError("output_scale must be finite and positive")
    return ls


@dataclass(frozen=True)
class RBFKernel:
    """Squared-exponential kernel with per-dimension lengthscales."""

    lengthscales: np.ndarray
    output_scale: float

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "lengthscales", _validate_kernel_params(self.lengthscales, self.output_scale)
        )

    @property
    def dim(self) -> int:
        return self.lengthscales.size

    @property
    def log_params(self) -> np.ndarray:
        """Stacked log(lengthscales) followed by log(output_scale)."""
        return np.concatenate([np.log(self.lengthscales), [np.log(self.output_scale)]])

    def with_log_params(self, theta: np.ndarray) -> "RBFKernel":
        theta = np.asarray(theta, dtype=float)
        return type(self)(
            lengthscales=np.exp(theta[:-1]), output_scale=float(np.exp(theta[-1]))
        )

    def _scaled_sq_dists(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        diff = (A[:, None, :] - B[None, :, :]) / self.lengthscales
        return np.einsum("mnd,mnd->mn", diff, diff)

    def __call__(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        return self.output_scale**2 * np.exp(-0.5 * self._scaled_sq_dists(A, B))

    def diag(self, A: np.ndarray) -> np.ndarray:
        return np.full(A.shape[0], self.output_scale**2)

    def grad_x(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        """d k(a_m, b_n) / d a_m, shape (M, N, D)."""
        K = self(A, B)
        diff = (A[:, None, :] - B[None, :, :]) / self.lengthscales**2
        return -K[:, :, None] * diff

    def grad_log_params(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        """d K / d theta_i for theta = log_params, shape (D + 1, M, N)."""
        K = self(A, B)
        diff2 = ((A[:, None, :] - B[None, :, :]) / self.lengthscales) ** 2
        grads = np.empty((self.dim + 1, A.shape[0], B.shape[0]))
        for d in range(self.dim):
            grads[d] = K * diff2[:, :, d]
        grads[-1] = 2.0 * K
        return grads


@dataclass(frozen=True)
class Matern52Kernel:
    """Matern kernel with smoothness 5/2 and per-dimension lengthscales."""

    lengthscales: np.ndarray
    output_scale: float

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "lengthscales", _validate_kernel_params(self.lengthscales, self.output_scale)
        )

    @property
    def dim(self) -> int:
        return self.lengthscales.size

    @property
    def log_params(self) -> np.ndarray:
        return np.concatenate([np.log(self.lengthscales), [np.log(self.output_scale)]])

    def with_log_params(self, theta: np.ndarray) -> "Matern52Kernel":
        theta = np.asarray(theta, dtype=float)
        return type(self)(
            lengthscales=np.exp(theta[:-1]), output_scale=float(np.exp(theta[-1]))
        )

    def _r(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        diff = (A[:, None, :] - B[None, :, :]) / self.lengthscales
        return np.sqrt(np.einsum("mnd,mnd->mn", diff, diff))

    def __call__(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        r = self._r(A, B)
        sr = _SQRT5 * r
        return self.output_scale**2 * (1.0 + sr + sr**2 / 3.0) * np.exp(-sr)

    def diag(self, A: np.ndarray) -> np.ndarray:
        return np.full(A.shape[0], self.output_scale**2)

    def grad_x(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        r = self._r(A, B)
        # dk/dr = -(5/3) s^2 r (1 + sqrt5 r) exp(-sqrt5 r); combined with
        # dr/da = (a - b) / (lengthscale^2 r) the r in the denominator cancels.
        coef = (
            -(5.0 / 3.0)
            * self.output_scale**2
            * (1.0 + _SQRT5 * r)
            * np.exp(-_SQRT5 * r)
        )
        diff = (A[:, None, :] - B[None, :, :]) / self.lengthscales**2
        return coef[:, :, None] * diff

    def grad_log_params(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        r = self._r(A, B)
        coef = (
            (5.0 / 3.0)
            * self.output_scale**2
            * (1.0 + _SQRT5 * r)
            * np.exp(-_SQRT5 * r)
        )
        diff2 = ((A[:, None, :] - B[None, :, :]) / self.lengthscales) ** 2
        grads = np.empty((self.dim + 1, A.shape[0], B.shape[0]))
        for d in range(self.dim):
            grads[d] = coef * diff2[:, :, d]
        grads[-1] = 2.0 * self(A, B)
        return grads


def _factorize(K: np.ndarray) -> tuple[np.ndarray, float]:
    """Cholesky of K + jitter*I, escalating jitter tenfold on failure."""
    jitter = BASE_JITTER
    eye = np.eye(K.shape[0])
    while jitter <= MAX_JITTER * (1 + 1e-12):
        try:
            L = np.linalg.cholesky(K + jitter * eye)
            return L, jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NumericalError(
        f"Gram matrix not positive definite even with jitter {MAX_JITTER:g}"
    )


@dataclass
class GaussianProcess:
    """Noise-free GP interpolator with incremental Cholesky updates."""

    kernel: RBFKernel | Matern52Kernel
    prior_mean: float = 0.0
    _V: np.ndarray = field(init=False, repr=False)
    _f: np.ndarray = field(init=False, repr=False)
    _L: np.ndarray | None = field(init=False, repr=False, default=None)
    _alpha: np.ndarray | None = field(init=False, repr=False, default=None)
    jitter: float = field(init=False, default=BASE_JITTER)

    def __post_init__(self) -> None:
        if not np.isfinite(self.prior_mean):
            raise ValidationError("prior_mean must be finite")
        self._V = np.empty((0, self.kernel.dim))
        self._f = np.empty(0)

    # -- observation management ------------------------------------------

    @property
    def n_obs(self) -> int:
        return self._V.shape[0]

    @property
    def inputs(self) -> np.ndarray:
        return self._V.copy()

    @property
    def values(self) -> np.ndarray:
        return self._f.copy()

    def _check_input(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.kernel.dim,):
            raise ValidationError(
                f"expected input of shape ({self.kernel.dim},), got {v.shape}"
            )
        if not np.all(np.isfinite(v)):
            raise ValidationError("input contains non-finite values")
        return v

    def add_observation(self, v: np.ndarray, g: float) -> None:
        v = self._check_input(v)
        if not np.isfinite(g):
            raise ValidationError("observed value must be finite")
        if self.n_obs > 0:
            dists = np.linalg.norm(self._V - v, axis=1)
            nearest = int(np.argmin(dists))
            if dists[nearest] <= DUPLICATE_TOL:
                raise DuplicateInputError(
                    f"input within {DUPLICATE_TOL:g} of observation {nearest}"
                )
        if self._L is None or self.n_obs == 0:
            self._V = v[None, :]
            self._f = np.array([float(g)])
            self._refactorize()
            return
        # rank-1 extension of the Cholesky factor
        k_vec = self.kernel(self._V, v[None, :])[:, 0]
        k_vv = float(self.kernel.diag(v[None, :])[0]) + self.jitter
        a = solve_triangular(self._L, k_vec, lower=True)
        d2 = k_vv - a @ a
        self._V = np.vstack([self._V, v[None, :]])
        self._f = np.append(self._f, float(g))
        if d2 <= max(self.jitter * 1e-3, 1e-15 * k_vv):
            # extension is numerically unsafe; rebuild (possibly escalating jitter)
            self._refactorize()
            return
        n = self._L.shape[0]
        L_new = np.zeros((n + 1, n + 1))
        L_new[:n, :n] = self._L
        L_new[n, :n] = a
        L_new[n, n] = math.sqrt(d2)
        self._L = L_new
        self._update_alpha()

    def add_observations(self, V: np.ndarray, f: np.ndarray) -> None:
        V = np.asarray(V, dtype=float)
        f = np.asarray(f, dtype=float)
        if V.ndim != 2 or V.shape[1] != self.kernel.dim:
            raise ValidationError(
                f"expected inputs of shape (n, {self.kernel.dim}), got {V.shape}"
            )
        if f.shape != (V.shape[0],):
            raise ValidationError("values must have one entry per input row")
        if not (np.all(np.isfinite(V)) and np.all(np.isfinite(f))):
            raise ValidationError("inputs and values must be finite")
        for v, g in zip(V, f):
            self.add_observation(v, g)

    def _refactorize(self) -> None:
        K = self.kernel(self._V, self._V)
        self._L, self.jitter = _factorize(K)
        self._update_alpha()

    def _update_alpha(self) -> None:
        r = self._f - self.prior_mean
        self._alpha = cho_solve((self._L, True), r)

    def set_kernel(self, kernel: RBFKernel | Matern52Kernel) -> None:
        if kernel.dim != self.kernel.dim:
            raise ValidationError("kernel dimension cannot change")
        self.kernel = kernel
        if self.n_obs > 0:
            self._refactorize()

    # -- posterior ---------------------------------------------------------

    def _check_query(self, Q: np.ndarray) -> np.ndarray:
        Q = np.asarray(Q, dtype=float)
        if Q.ndim != 2 or Q.shape[1] != self.kernel.dim:
            raise ValidationError(
                f"expected query of shape (m, {self.kernel.dim}), got {Q.shape}"
            )
        if not np.all(np.isfinite(Q)):
            raise ValidationError("query contains non-finite values")
        return Q

    def posterior(self, Q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance at query points, shapes (m,), (m,)."""
        Q = self._check_query(Q)
        if self.n_obs == 0:
            return (
                np.full(Q.shape[0], self.prior_mean),
                self.kernel.diag(Q).copy(),
            )
        Kq = self.kernel(self._V, Q)  # (n_obs, m)
        mean = self.prior_mean + Kq.T @ self._alpha
        W = solve_triangular(self._L, Kq, lower=True)  # (n_obs, m)
        var = self.kernel.diag(Q) - np.einsum("nm,nm->m", W, W)
        return mean, np.maximum(var, 0.0)

    def posterior_cross_covariance(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        """Posterior covariance matrix between two query sets, shape (a, b)."""
        A = self._check_query(A)
        B = self._check_query(B)
        prior = self.kernel(A, B)
        if self.n_obs == 0:
            return prior
        WA = solve_triangular(self._L, self.kernel(self._V, A), lower=True)
        WB = solve_triangular(self._L, self.kernel(self._V, B), lower=True)
        return prior - WA.T @ WB

    def posterior_gradient(self, Q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Gradients of posterior mean and variance w.r.t. each query point.

        Returns (dmean, dvar) with shapes (m, D) and (m, D).
        """
        Q = self._check_query(Q)
        if self.n_obs == 0:
            return np.zeros_like(Q), np.zeros_like(Q)
        G = self.kernel.grad_x(Q, self._V)  # (m, n_obs, D)
        dmean = np.einsum("mnd,n->md", G, self._alpha)
        Kq = self.kernel(self._V, Q)  # (n_obs, m)
        beta = cho_solve((self._L, True), Kq)  # (n_obs, m)
        dvar = -2.0 * np.einsum("mnd,nm->md", G, beta)
        return dmean, dvar

    # -- marginal likelihood ------------------------------------------------

    def log_marginal_likelihood(self) -> float:
        if self.n_obs == 0:
            raise ValidationError("cannot evaluate marginal likelihood without observations")
        r = self._f - self.prior_mean
        return float(
            -0.5 * r @ self._alpha
            - np.sum(np.log(np.diag(self._L)))
            - 0.5 * self.n_obs * math.log(2 * math.pi)
        )

    def lml_gradient(self) -> np.ndarray:
        """Gradient of the log marginal likelihood w.r.t. kernel.log_params."""
        if self.n_obs == 0:
            raise ValidationError("cannot evaluate marginal likelihood without observations")
        dK = self.kernel.grad_log_params(self._V, self._V)  # (P, n, n)
        Kinv = cho_solve((self._L, True), np.eye(self.n_obs))
        A = np.outer(self._alpha, self._alpha) - Kinv
        return 0.5 * np.einsum("ij,pij->p", A, dK)

    # -- hyperparameter optimization ----------------------------------------

    def optimize_hyperparameters(
        self, seed: int | None = 0, restarts: int = 3
    ) -> float:
        """Maximize the log marginal likelihood over kernel hyperparameters.

        Runs L-BFGS-B in log-parameter space from the current values plus
        ``restarts`` random initializations inside the bounds, and keeps the
        best result.  The fitted likelihood never falls below the incumbent:
        if no start improves on the current parameters they are kept as-is.
        Returns the final log marginal likelihood.
        """
        if self.n_obs < 2:
            return self.log_marginal_likelihood() if self.n_obs else float("-inf")
        V, f, m0 = self._V, self._f, self.prior_mean
        kern0 = self.kernel
        D = kern0.dim

        input_scale = np.std(V, axis=0)
        input_scale[input_scale == 0] = 1.0
        value_scale = float(np.std(f - m0))
        if value_scale == 0:
            value_scale = 1.0
        lower = np.log(np.concatenate([1e-3 * input_scale, [1e-3 * value_scale]]))
        upper = np.log(np.concatenate([1e3 * input_scale, [1e3 * value_scale]]))
        bounds = list(zip(lower, upper))

        def neg_lml_and_grad(theta: np.ndarray) -> tuple[float, np.ndarray]:
            try:
                trial = GaussianProcess(
                    kernel=kern0.with_log_params(theta), prior_mean=m0
                )
                trial._V = V
                trial._f = f
                trial._refactorize()
                return -trial.log_marginal_likelihood(), -trial.lml_gradient()
            except (NumericalError, FloatingPointError):
                return 1e25, np.zeros(D + 1)

        starts = [np.clip(kern0.log_params, lower, upper)]
        rng = np.random.default_rng(seed)
        for _ in range(restarts):
            starts.append(rng.uniform(lower, upper))

        incumbent_lml = self.log_marginal_likelihood()
        best_theta, best_val = None, -np.inf
        for theta0 in starts:
            result = minimize(
                neg_lml_and_grad,
                theta0,
                jac=True,
                method="L-BFGS-B",
                bounds=bounds,
            )
            if np.all(np.isfinite(result.x)) and -result.fun > best_val:
                best_val, best_theta = -result.fun, result.x
        if best_theta is not None and best_val > incumbent_lml:
            self.kernel = kern0.with_log_params(best_theta)
            self._refactorize()
            return self.log_marginal_likelihood()
        return incumbent_lml
