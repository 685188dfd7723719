"""Riemannian metrics learned from point clouds.

Two learned families are provided, both diagonal:

* :class:`KernelMetric` — the diagonal entries are inverse local weighted
  variances of the data, ``M_dd(x) = (sum_n w_n(x) (x_nd - x_d)^2 + rho)^-1``
  with Gaussian weights ``w_n(x) = exp(-||x_n - x||^2 / (2 sigma^2))``.
* :class:`MixtureMetric` — a conformal metric ``M(x) = (q(x) + rho)^(-2/D) I``
  built from a Gaussian mixture density ``q`` (e.g. an aggregated posterior
  over a latent space).

:class:`EuclideanMetric` is the flat reference every reduction test uses.
The base class supplies generic implementations (finite-difference metric
derivative, Christoffel symbols, geodesic acceleration, curve functionals)
so custom metrics only need ``metric_at``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import simpson

from .errors import ValidationError

# Gaussian weights below this are flushed to exact zeros: they are physically
# meaningless and denormals would slow the inner loops down.
WEIGHT_FLUSH = 1e-300


def _as_finite_array(x, name: str, ndim: int | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise ValidationError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


class Metric:
    """Base class: a Riemannian metric on R^D.

    Subclasses either override :meth:`metric_at` (generic dense route) or set
    ``is_diagonal = True`` and override :meth:`diag_fields` with analytic
    diagonal entries and their gradients (fast route used by the solvers).
    """

    is_diagonal: bool = False

    def __init__(self, dim: int):
        if dim < 1:
            raise ValidationError(f"metric dimension must be >= 1, got {dim}")
        self.dim = int(dim)

    # -- points ------------------------------------------------------------

    def _check_point(self, x) -> np.ndarray:
        x = _as_finite_array(x, "point", ndim=1)
        if x.size != self.dim:
            raise ValidationError(
                f"point has dimension {x.size}, metric expects {self.dim}"
            )
        return x

    def _check_points(self, X) -> np.ndarray:
        X = _as_finite_array(X, "points", ndim=2)
        if X.shape[1] != self.dim:
            raise ValidationError(
                f"points have dimension {X.shape[1]}, metric expects {self.dim}"
            )
        return X

    # -- core fields ---------------------------------------------------------

    def diag_fields(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Diagonal entries and their gradients at a batch of points.

        Returns ``(diag, grad)`` with ``diag[m, d] = M_dd(x_m)`` and
        ``grad[m, d, k] = dM_dd/dx_k (x_m)``.  Only for diagonal metrics.
        """
        raise NotImplementedError

    def metric_at(self, x) -> np.ndarray:
        """Full metric matrix at a single point."""
        x = self._check_point(x)
        if self.is_diagonal:
            diag, _ = self.diag_fields(x[None, :])
            return np.diag(diag[0])
        raise NotImplementedError

    def metric_derivative(self, x) -> np.ndarray:
        """Tensor ``dM[i, j, k] = dM_ij/dx_k``; finite differences as fallback.

        The fallback uses central differences with step ``1e-5 * (1 + ||x||)``.
        """
        x = self._check_point(x)
        if self.is_diagonal:
            _, grad = self.diag_fields(x[None, :])
            out = np.zeros((self.dim, self.dim, self.dim))
            idx = np.arange(self.dim)
            out[idx, idx, :] = grad[0]
            return out
        h = 1e-5 * (1.0 + float(np.linalg.norm(x)))
        out = np.empty((self.dim, self.dim, self.dim))
        for k in range(self.dim):
            e = np.zeros(self.dim)
            e[k] = h
            out[:, :, k] = (self.metric_at(x + e) - self.metric_at(x - e)) / (2 * h)
        return out

    # -- derived geometry ----------------------------------------------------

    def christoffel(self, x) -> np.ndarray:
        """Christoffel symbols ``Gamma[k, i, j]`` of the Levi-Civita connection."""
        x = self._check_point(x)
        M = self.metric_at(x)
        dM = self.metric_derivative(x)
        Minv = np.linalg.inv(M)
        bracket = (
            np.einsum("ihj->hij", dM)
            + np.einsum("jhi->hij", dM)
            - np.einsum("ijh->hij", dM)
        )
        return 0.5 * np.einsum("kh,hij->kij", Minv, bracket)

    def geodesic_rhs(self, pos, vel) -> np.ndarray:
        """Geodesic acceleration ``-Gamma^k_ij v^i v^j`` at one point."""
        pos = self._check_point(pos)
        vel = _as_finite_array(vel, "velocity", ndim=1)
        return self.geodesic_rhs_batch(pos[None, :], vel[None, :])[0]

    def geodesic_rhs_batch(self, P: np.ndarray, V: np.ndarray) -> np.ndarray:
        """Geodesic accelerations for a batch of (position, velocity) pairs."""
        P = self._check_points(P)
        V = np.asarray(V, dtype=float)
        if self.is_diagonal:
            diag, grad = self.diag_fields(P)
            # For a diagonal metric the contraction collapses to
            #   a_k = -(2 v_k <grad_k, v> - sum_i grad[i, k] v_i^2) / (2 M_kk)
            gv = np.einsum("mkj,mj->mk", grad, V)
            t2 = np.einsum("mik,mi->mk", grad, V**2)
            return -(2.0 * V * gv - t2) / (2.0 * diag)
        out = np.empty_like(P)
        for i in range(P.shape[0]):
            gamma = self.christoffel(P[i])
            out[i] = -np.einsum("kij,i,j->k", gamma, V[i], V[i])
        return out

    def volume_element(self, x) -> float:
        """Riemannian volume element ``sqrt(det M(x))``."""
        return float(self.volume_elements(np.asarray(x, dtype=float)[None, :])[0])

    def volume_elements(self, X: np.ndarray) -> np.ndarray:
        X = self._check_points(X)
        if self.is_diagonal:
            diag, _ = self.diag_fields(X)
            return np.exp(0.5 * np.sum(np.log(diag), axis=1))
        out = np.empty(X.shape[0])
        for i in range(X.shape[0]):
            sign, logdet = np.linalg.slogdet(self.metric_at(X[i]))
            if sign <= 0:
                raise ValidationError("metric is not positive definite")
            out[i] = np.exp(0.5 * logdet)
        return out

    def far_field_volume_element(self) -> float:
        """Limit of the volume element far away from all data."""
        raise NotImplementedError

    def inner(self, x, u, v) -> float:
        """Metric inner product ``<u, M(x) v>``."""
        x = self._check_point(x)
        if self.is_diagonal:
            diag, _ = self.diag_fields(x[None, :])
            return float(np.sum(diag[0] * np.asarray(u) * np.asarray(v)))
        return float(np.asarray(u) @ self.metric_at(x) @ np.asarray(v))


class EuclideanMetric(Metric):
    """Flat metric; every geometric quantity reduces to its classical form."""

    is_diagonal = True

    def __init__(self, dim: int):
        super().__init__(dim=dim)

    def diag_fields(self, X):
        X = self._check_points(X)
        m = X.shape[0]
        return np.ones((m, self.dim)), np.zeros((m, self.dim, self.dim))

    def far_field_volume_element(self) -> float:
        return 1.0

    def descriptor(self) -> dict:
        return {"family": "euclidean", "dim": self.dim}


@dataclass(eq=False)
class KernelMetric(Metric):
    """Diagonal metric from inverse locally-weighted variances of a point cloud.

    Parameters
    ----------
    data : (N, D) array
        Point cloud the metric is learned from.
    sigma : float
        Bandwidth of the Gaussian weights.
    rho : float
        Additive regularizer; far from the data every diagonal entry tends
        to ``1/rho`` and the volume element to ``rho**(-D/2)``.
    """

    data: np.ndarray
    sigma: float
    rho: float
    is_diagonal = True

    def __post_init__(self):
        self.data = _as_finite_array(self.data, "data", ndim=2)
        if self.data.shape[0] < 1:
            raise ValidationError("data must contain at least one point")
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ValidationError(f"sigma must be positive, got {self.sigma}")
        if not (np.isfinite(self.rho) and self.rho > 0):
            raise ValidationError(f"rho must be positive, got {self.rho}")
        super().__init__(dim=self.data.shape[1])

    def diag_fields(self, X):
        X = self._check_points(X)
        delta = self.data[None, :, :] - X[:, None, :]  # (m, N, D)
        d2 = np.einsum("mnd,mnd->mn", delta, delta)
        w = np.exp(-d2 / (2.0 * self.sigma**2))
        w[w < WEIGHT_FLUSH] = 0.0
        delta2 = delta**2
        s = np.einsum("mn,mnd->md", w, delta2)
        diag = 1.0 / (s + self.rho)
        # dS[m, d, k] = sum_n w (delta_k / sigma^2) delta_d^2 - 2 delta_d 1{d=k}
        ds = np.einsum("mn,mnk,mnd->mdk", w, delta, delta2) / self.sigma**2
        first_moment = np.einsum("mn,mnd->md", w, delta)
        idx = np.arange(self.dim)
        ds[:, idx, idx] -= 2.0 * first_moment
        grad = -ds * (diag**2)[:, :, None]
        return diag, grad

    def far_field_volume_element(self) -> float:
        return float(self.rho ** (-self.dim / 2.0))

    def descriptor(self) -> dict:
        return {
            "family": "kernel",
            "dim": self.dim,
            "sigma": float(self.sigma),
            "rho": float(self.rho),
            "n_data": int(self.data.shape[0]),
        }


@dataclass(eq=False)
class MixtureMetric(Metric):
    """Conformal metric ``(q(x) + rho)^(-2/D) I`` from a Gaussian mixture ``q``.

    Components have diagonal covariances; the volume element is exactly
    ``1/(q(x) + rho)``, tending to ``1/rho`` far from every component.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    rho: float
    is_diagonal = True
    _log_norms: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.weights = _as_finite_array(self.weights, "weights", ndim=1)
        self.means = _as_finite_array(self.means, "means", ndim=2)
        self.variances = _as_finite_array(self.variances, "variances", ndim=2)
        if not (np.isfinite(self.rho) and self.rho > 0):
            raise ValidationError(f"rho must be positive, got {self.rho}")
        if np.any(self.weights < 0) or self.weights.sum() <= 0:
            raise ValidationError("mixture weights must be nonnegative, not all zero")
        if self.means.shape != self.variances.shape:
            raise ValidationError("means and variances must have matching shapes")
        if self.means.shape[0] != self.weights.size:
            raise ValidationError("number of weights and components must match")
        if np.any(self.variances <= 0):
            raise ValidationError("component variances must be positive")
        super().__init__(dim=self.means.shape[1])
        self._log_norms = -0.5 * np.sum(np.log(2.0 * np.pi * self.variances), axis=1)

    def _density_and_grad(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        diff = X[:, None, :] - self.means[None, :, :]  # (m, K, D)
        expo = -0.5 * np.einsum("mkd,kd->mk", diff**2, 1.0 / self.variances)
        comp = self.weights[None, :] * np.exp(expo + self._log_norms[None, :])
        q = comp.sum(axis=1)
        dq = -np.einsum("mk,mkd->md", comp, diff / self.variances[None, :, :])
        return q, dq

    def diag_fields(self, X):
        X = self._check_points(X)
        q, dq = self._density_and_grad(X)
        base = q + self.rho
        h = base ** (-2.0 / self.dim)
        dh = (-2.0 / self.dim) * base ** (-2.0 / self.dim - 1.0)
        diag = np.repeat(h[:, None], self.dim, axis=1)
        grad = np.repeat((dh[:, None] * dq)[:, None, :], self.dim, axis=1)
        return diag, grad

    def far_field_volume_element(self) -> float:
        return float(1.0 / self.rho)

    def descriptor(self) -> dict:
        return {
            "family": "mixture",
            "dim": self.dim,
            "rho": float(self.rho),
            "n_components": int(self.weights.size),
        }


# ---------------------------------------------------------------------------
# Curve functionals


def _speeds(metric: Metric, t, gamma, gamma_dot):
    t = _as_finite_array(t, "t", ndim=1)
    if t.size < 2:
        raise ValidationError("curve must be sampled at >= 2 nodes")
    if np.any(np.diff(t) <= 0):
        raise ValidationError("curve parameter must be strictly increasing")
    gamma = metric._check_points(gamma)
    if gamma.shape[0] != t.size:
        raise ValidationError("t and gamma must have matching lengths")
    if gamma_dot is None:
        gamma_dot = np.gradient(gamma, t, axis=0)
    else:
        gamma_dot = _as_finite_array(gamma_dot, "gamma_dot", ndim=2)
    if metric.is_diagonal:
        diag, _ = metric.diag_fields(gamma)
        sq = np.einsum("md,md->m", diag * gamma_dot, gamma_dot)
    else:
        sq = np.array(
            [
                gamma_dot[i] @ metric.metric_at(gamma[i]) @ gamma_dot[i]
                for i in range(t.size)
            ]
        )
    return t, np.maximum(sq, 0.0)


def curve_length(metric: Metric, t, gamma, gamma_dot=None) -> float:
    """Length ``int sqrt(<gamma', M gamma'>) dt`` of a sampled curve.

    Velocities default to second-order finite differences of the samples;
    pass analytic velocities when available (e.g. from a dense solution).
    """
    t, sq = _speeds(metric, t, gamma, gamma_dot)
    return float(simpson(np.sqrt(sq), x=t))


def curve_energy(metric: Metric, t, gamma, gamma_dot=None) -> float:
    """Energy ``1/2 int <gamma', M gamma'> dt`` of a sampled curve."""
    t, sq = _speeds(metric, t, gamma, gamma_dot)
    return float(0.5 * simpson(sq, x=t))
