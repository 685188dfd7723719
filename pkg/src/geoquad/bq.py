"""Warped Bayesian quadrature over Gaussian measures on tangent spaces.

The scalar integral of interest is ``C = Z * E_pi[g(v)]`` where ``g`` is the
Riemannian volume element along geodesics shot from a base point, ``pi`` is a
zero-mean Gaussian on the tangent space, and ``Z = sqrt((2*pi)^D |Sigma|)``.
The integrand's square root is modeled by a Gaussian process (``f =
sqrt(2(g - delta))``), which keeps the unwarped belief positive; the unwarped
moments are either linearized (eta = 0) or moment-matched (eta = 1).

Active evaluation locations are chosen by uncertainty sampling (variance
scaled with the squared measure) or by the directional policy, which picks
whole rays through the origin by maximizing the cumulative variance along the
ray and then harvests several points per solved geodesic from the dense
interpolant.  ``run_integration`` drives the full loop, including node reuse
across covariance-only parameter updates and both sample-count and wall-clock
budgets.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import simpson
from scipy.linalg import cho_solve, solve_triangular
from scipy.stats import chi2

from .errors import (
    DuplicateInputError,
    NumericalError,
    SolverFailure,
    UnreliableEstimateError,
    ValidationError,
)
from .geodesics import GeodesicSolution, SolverConfig, DEFAULT_SOLVER, exp_map
from .gp import (
    DUPLICATE_TOL,
    GaussianProcess,
    Matern52Kernel,
    RBFKernel,
)
from .metrics import Metric

__all__ = [
    "GaussianMeasure",
    "WarpedIntegrandModel",
    "RayObservationBatch",
    "ObservationSet",
    "IntegrationProblem",
    "IntegrationConfig",
    "IntegrationResult",
    "IntegralPosterior",
    "SampleBudget",
    "RuntimeBudget",
    "warp",
    "unwarp_moments",
    "build_warped_model",
    "posterior_integrals",
    "integral_posterior",
    "vector_integral",
    "matrix_integral",
    "uncertainty_sampling_next",
    "alpha_max",
    "dcv_objective",
    "dcv_gradient",
    "dcv_select_direction",
    "dcv_collect_along_ray",
    "run_integration",
]

DELTA_FRACTION = 1e-3
DELTA_FLOOR = 1e-10


def _as_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# Gaussian integration measure


class GaussianMeasure:
    """Zero-mean Gaussian measure N(0, Sigma) on the tangent space."""

    def __init__(self, covariance: np.ndarray):
        Sigma = np.asarray(covariance, dtype=float)
        if Sigma.ndim != 2 or Sigma.shape[0] != Sigma.shape[1]:
            raise ValidationError("covariance must be a square matrix")
        if not np.all(np.isfinite(Sigma)):
            raise ValidationError("covariance contains non-finite values")
        if np.max(np.abs(Sigma - Sigma.T)) > 1e-10 * max(1.0, np.max(np.abs(Sigma))):
            raise ValidationError("covariance must be symmetric")
        try:
            L = np.linalg.cholesky(Sigma)
        except np.linalg.LinAlgError as exc:
            raise ValidationError("covariance must be positive definite") from exc
        self.covariance = Sigma
        self.dim = Sigma.shape[0]
        self._chol = L
        self.precision = cho_solve((L, True), np.eye(self.dim))
        logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
        self.log_normalization = 0.5 * self.dim * math.log(2 * math.pi) + 0.5 * logdet
        self.normalization = math.exp(self.log_normalization)

    def _check(self, V: np.ndarray) -> np.ndarray:
        V = np.asarray(V, dtype=float)
        if V.ndim != 2 or V.shape[1] != self.dim:
            raise ValidationError(
                f"expected points of shape (n, {self.dim}), got {V.shape}"
            )
        return V

    def mahalanobis_sq(self, V: np.ndarray) -> np.ndarray:
        V = self._check(V)
        W = solve_triangular(self._chol, V.T, lower=True)
        return np.einsum("dn,dn->n", W, W)

    def log_density(self, V: np.ndarray) -> np.ndarray:
        return -0.5 * self.mahalanobis_sq(V) - self.log_normalization

    def density(self, V: np.ndarray) -> np.ndarray:
        return np.exp(self.log_density(V))

    def precision_apply(self, V: np.ndarray) -> np.ndarray:
        """Rows ``Sigma^{-1} v`` for each row v of V."""
        return self._check(V) @ self.precision

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        z = rng.standard_normal((n, self.dim))
        return z @ self._chol.T


# ---------------------------------------------------------------------------
# Square-root warping


def warp(g_value, delta: float):
    """Map integrand values to model space: f = sqrt(2 (g - delta))."""
    return np.sqrt(2.0 * (np.asarray(g_value, dtype=float) - delta))


@dataclass
class WarpedIntegrandModel:
    """GP on the square-root of the integrand plus unwarping formulas.

    ``eta = 0`` linearizes the unwarped moments; ``eta = 1`` moment-matches.
    Integrand values below ``delta`` are clamped upward (counted in
    ``clamp_count``) to keep the warp real.
    """

    gp: GaussianProcess
    delta: float
    eta: float
    g_values: np.ndarray = field(default_factory=lambda: np.empty(0))
    clamp_count: int = 0

    def __post_init__(self) -> None:
        if not np.isfinite(self.delta) or self.delta < 0:
            raise ValidationError("delta must be finite and non-negative")
        if not 0.0 <= self.eta <= 1.0:
            raise ValidationError("eta must lie in [0, 1]")

    @property
    def dim(self) -> int:
        return self.gp.kernel.dim

    def add(self, v: np.ndarray, g: float) -> None:
        g = float(g)
        if not np.isfinite(g):
            raise ValidationError("integrand value must be finite")
        if g < self.delta:
            g = self.delta
            self.clamp_count += 1
        self.gp.add_observation(v, float(warp(g, self.delta)))
        self.g_values = np.append(self.g_values, g)

    def unwarped_mean(self, V: np.ndarray) -> np.ndarray:
        m, k = self.gp.posterior(V)
        return self.delta + 0.5 * m**2 + 0.5 * self.eta * k

    def unwarped_variance(self, V: np.ndarray) -> np.ndarray:
        """Diagonal of the unwarped covariance, k_tilde(v, v)."""
        m, k = self.gp.posterior(V)
        return 0.5 * self.eta * k + m**2 * k

    def unwarped_mean_and_variance(
        self, V: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        m, k = self.gp.posterior(V)
        return (
            self.delta + 0.5 * m**2 + 0.5 * self.eta * k,
            0.5 * self.eta * k + m**2 * k,
        )

    def unwarped_cross_covariance(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        kAB = self.gp.posterior_cross_covariance(A, B)
        mA, _ = self.gp.posterior(A)
        mB, _ = self.gp.posterior(B)
        return 0.5 * self.eta * kAB + np.outer(mA, mB) * kAB

    def unwarped_variance_gradient(self, V: np.ndarray) -> np.ndarray:
        """Gradient of k_tilde(v, v) with respect to v, shape (m, D)."""
        m, k = self.gp.posterior(V)
        dm, dk = self.gp.posterior_gradient(V)
        return (0.5 * self.eta + m**2)[:, None] * dk + (2.0 * m * k)[:, None] * dm


def unwarp_moments(model: WarpedIntegrandModel, v: np.ndarray) -> tuple[float, float]:
    """Unwarped posterior mean and variance at a single tangent vector."""
    V = np.asarray(v, dtype=float)[None, :]
    mt, kt = model.unwarped_mean_and_variance(V)
    return float(mt[0]), float(kt[0])


def _default_kernel(kind: str, V: np.ndarray, f: np.ndarray):
    ls = np.std(V, axis=0)
    ls[~(ls > 0)] = 1.0
    out = float(np.std(f))
    if not out > 0:
        out = 1.0
    cls = {"rbf": RBFKernel, "matern52": Matern52Kernel}.get(kind)
    if cls is None:
        raise ValidationError(f"unknown kernel kind: {kind!r}")
    return cls(lengthscales=ls, output_scale=out)


def _kernel_from_log_params(kind: str, log_params: np.ndarray):
    cls = {"rbf": RBFKernel, "matern52": Matern52Kernel}.get(kind)
    if cls is None:
        raise ValidationError(f"unknown kernel kind: {kind!r}")
    p = np.asarray(log_params, dtype=float)
    return cls(lengthscales=np.exp(p[:-1]), output_scale=float(np.exp(p[-1])))


def _kernel_kind(kernel) -> str:
    return "rbf" if isinstance(kernel, RBFKernel) else "matern52"


def build_warped_model(
    V: np.ndarray,
    g: np.ndarray,
    *,
    eta: float = 0.0,
    kernel=None,
    delta: float | None = None,
    far_field_value: float | None = None,
) -> WarpedIntegrandModel:
    """Condition a warped model on integrand observations.

    ``delta`` defaults to ``1e-3 * min(g)`` floored at 1e-10.  When
    ``far_field_value`` is given, the GP's constant prior mean is set so the
    unwarped prior mean matches that value far from all observations.
    """
    V = np.asarray(V, dtype=float)
    g = np.asarray(g, dtype=float)
    if V.ndim != 2 or g.shape != (V.shape[0],) or V.shape[0] == 0:
        raise ValidationError("need inputs of shape (n, D) and one value per row")
    if not (np.all(np.isfinite(V)) and np.all(np.isfinite(g))):
        raise ValidationError("observations must be finite")
    if delta is None:
        delta = max(DELTA_FRACTION * float(np.min(g)), DELTA_FLOOR)
    if kernel is None:
        kernel = _default_kernel("matern52", V, warp(np.maximum(g, delta), delta))
    prior_mean = 0.0
    if far_field_value is not None:
        prior_mean = math.sqrt(2.0 * max(far_field_value - delta, 0.0))
    model = WarpedIntegrandModel(
        gp=GaussianProcess(kernel=kernel, prior_mean=prior_mean),
        delta=float(delta),
        eta=float(eta),
    )
    for v, gv in zip(V, g):
        model.add(v, gv)
    return model


# ---------------------------------------------------------------------------
# Integral posteriors


@dataclass(frozen=True)
class IntegralPosterior:
    """Moments of the integral belief, all without the Gaussian constant Z."""

    mean: float
    variance: float
    standard_error: float
    vector: np.ndarray
    matrix: np.ndarray
    n_draws: int


def posterior_integrals(
    model: WarpedIntegrandModel,
    measure: GaussianMeasure,
    sample_count: int,
    seed,
    *,
    control_variates: bool = True,
    variance_subsample: int = 2000,
) -> IntegralPosterior:
    """Estimate E_pi[m_tilde], E_pi[v m_tilde], E_pi[v v^T m_tilde].

    All three estimates share one set of seeded draws from the measure.  The
    integral variance uses the unwarped covariance averaged over a double sum
    on a subsample of the draws.  Control variates subtract the exactly-known
    Gaussian moments scaled by the mean estimate, which makes the vector and
    matrix estimates exact whenever the unwarped mean is constant.
    """
    if sample_count < 1000:
        raise ValidationError("sample_count must be at least 1000")
    if model.gp.n_obs < 1:
        raise ValidationError("model must hold at least one observation")
    if measure.dim != model.dim:
        raise ValidationError("measure and model dimensions differ")
    rng = _as_generator(seed)
    draws = measure.sample(rng, sample_count)
    mt = model.unwarped_mean(draws)
    bad = ~np.isfinite(mt)
    if np.any(bad):
        idx = np.flatnonzero(bad)[:5]
        raise NumericalError(
            f"non-finite posterior mean at {int(bad.sum())} draw(s); "
            f"first locations: {draws[idx].tolist()}"
        )
    mean = float(np.mean(mt))
    if sample_count > 1:
        standard_error = float(np.std(mt, ddof=1) / math.sqrt(sample_count))
    else:
        standard_error = 0.0

    n_var = min(sample_count, variance_subsample)
    sub = draws[:n_var]
    ktilde = model.unwarped_cross_covariance(sub, sub)
    variance = max(float(np.mean(ktilde)), 0.0)

    vector = (draws * mt[:, None]).mean(axis=0)
    matrix = (draws.T * mt) @ draws / sample_count
    if control_variates:
        vector = vector - draws.mean(axis=0) * mean
        second = draws.T @ draws / sample_count
        matrix = matrix - (second - measure.covariance) * mean
    return IntegralPosterior(
        mean=mean,
        variance=variance,
        standard_error=standard_error,
        vector=vector,
        matrix=matrix,
        n_draws=sample_count,
    )


def integral_posterior(
    model: WarpedIntegrandModel,
    measure: GaussianMeasure,
    sample_count: int,
    seed,
    **kwargs,
) -> tuple[float, float, float]:
    """Scalar integral belief: (mean, variance, standard error), without Z."""
    ip = posterior_integrals(model, measure, sample_count, seed, **kwargs)
    return ip.mean, ip.variance, ip.standard_error


def vector_integral(
    model: WarpedIntegrandModel,
    measure: GaussianMeasure,
    sample_count: int,
    seed,
    **kwargs,
) -> np.ndarray:
    return posterior_integrals(model, measure, sample_count, seed, **kwargs).vector


def matrix_integral(
    model: WarpedIntegrandModel,
    measure: GaussianMeasure,
    sample_count: int,
    seed,
    **kwargs,
) -> np.ndarray:
    return posterior_integrals(model, measure, sample_count, seed, **kwargs).matrix


# ---------------------------------------------------------------------------
# Uncertainty sampling


def _acquisition_values(
    model: WarpedIntegrandModel, measure: GaussianMeasure, V: np.ndarray
) -> np.ndarray:
    return model.unwarped_variance(V) * measure.density(V) ** 2


def _log_acquisition(
    model: WarpedIntegrandModel, measure: GaussianMeasure, v: np.ndarray
) -> float:
    kt = float(model.unwarped_variance(v[None, :])[0])
    if not np.isfinite(kt) or kt <= 0.0:
        return -np.inf
    return math.log(kt) + 2.0 * float(measure.log_density(v[None, :])[0])


def _ascend_acquisition(
    model: WarpedIntegrandModel,
    measure: GaussianMeasure,
    v0: np.ndarray,
    max_steps: int,
) -> tuple[np.ndarray, float]:
    """Backtracking gradient ascent on log u from one start point."""
    scale = math.sqrt(float(np.trace(measure.covariance)) / measure.dim)
    step = 0.5 * scale
    v = np.array(v0, dtype=float)
    val = _log_acquisition(model, measure, v)
    if not np.isfinite(val):
        return v, val
    for _ in range(max_steps):
        kt = float(model.unwarped_variance(v[None, :])[0])
        if kt <= 0.0:
            break
        dkt = model.unwarped_variance_gradient(v[None, :])[0]
        grad = dkt / kt - 2.0 * (measure.precision @ v)
        norm = float(np.linalg.norm(grad))
        if not np.isfinite(norm) or norm < 1e-12:
            break
        direction = grad / norm
        improved = False
        s = step
        for _ in range(20):
            cand = v + s * direction
            cval = _log_acquisition(model, measure, cand)
            if cval > val:
                v, val = cand, cval
                step = 1.5 * s
                improved = True
                break
            s *= 0.5
            if s < 1e-14 * scale:
                break
        if not improved:
            break
    return v, val


def uncertainty_sampling_next(
    model: WarpedIntegrandModel,
    measure: GaussianMeasure,
    seed=0,
    *,
    pool_size: int = 200,
    n_starts: int = 10,
    max_steps: int = 30,
) -> np.ndarray:
    """Next evaluation location by maximizing u(v) = k_tilde(v,v) pi(v)^2.

    Multi-start gradient ascent: the best point of a seeded candidate pool
    plus fresh draws from the measure; the returned point's acquisition value
    is at least that of every start.
    """
    rng = _as_generator(seed)
    pool = measure.sample(rng, pool_size)
    u_pool = _acquisition_values(model, measure, pool)
    finite = np.isfinite(u_pool)
    if not np.any(finite):
        raise NumericalError("acquisition is non-finite on the whole candidate pool")
    incumbent = pool[int(np.argmax(np.where(finite, u_pool, -np.inf)))]
    starts = [incumbent] + list(measure.sample(rng, n_starts))
    best_v, best_val = incumbent, -np.inf
    for v0 in starts:
        v, val = _ascend_acquisition(model, measure, v0, max_steps)
        if val > best_val:
            best_v, best_val = v, val
    if not np.isfinite(best_val):
        raise NumericalError("acquisition ascent failed from every start")
    # never return a point that would collide with existing observations
    if model.gp.n_obs > 0:
        scale = math.sqrt(float(np.trace(measure.covariance)) / measure.dim)
        for _ in range(50):
            dists = np.linalg.norm(model.gp.inputs - best_v, axis=1)
            if float(np.min(dists)) > DUPLICATE_TOL:
                break
            best_v = best_v + 1e-6 * scale * rng.standard_normal(measure.dim)
    return np.asarray(best_v, dtype=float)


# ---------------------------------------------------------------------------
# Directional cumulative variance


def _unit(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    norm = float(np.linalg.norm(r))
    if not np.isfinite(norm) or norm == 0.0:
        raise ValidationError("direction must be a non-zero finite vector")
    if abs(norm - 1.0) > 1e-9:
        raise ValidationError("direction must have unit norm")
    return r / norm


def alpha_max(measure: GaussianMeasure, r: np.ndarray, p: float = 0.995) -> float:
    """Ray length capturing the p-mass isoprobability contour along r."""
    if not 0.0 < p < 1.0:
        raise ValidationError("p must lie strictly between 0 and 1")
    r = np.asarray(r, dtype=float)
    if r.shape != (measure.dim,) or not np.all(np.isfinite(r)):
        raise ValidationError("direction has wrong shape or non-finite entries")
    rSr = float(r @ measure.precision @ r)
    if rSr <= 0:
        raise ValidationError("direction has non-positive precision norm")
    return math.sqrt(float(chi2.ppf(p, df=measure.dim)) / rSr)


def _line_cumulative(values: np.ndarray, betas: np.ndarray) -> float:
    """Composite Simpson integral of sampled values along a ray."""
    return float(simpson(values, x=betas))


def _require_linearized(model: WarpedIntegrandModel) -> None:
    if model.eta != 0.0:
        raise ValidationError(
            "directional acquisition requires the linearized unwarping (eta = 0)"
        )


def _ray_nodes(
    measure: GaussianMeasure, r: np.ndarray, p: float, nodes: int
) -> tuple[float, np.ndarray, np.ndarray]:
    a_max = alpha_max(measure, r, p)
    betas = np.linspace(0.0, a_max, nodes)
    return a_max, betas, betas[:, None] * r[None, :]


def dcv_objective(
    model: WarpedIntegrandModel,
    measure: GaussianMeasure,
    r: np.ndarray,
    *,
    p: float = 0.995,
    nodes: int = 50,
) -> float:
    """Cumulative acquisition along the ray: integral of u(beta r) d beta."""
    _require_linearized(model)
    r = _unit(r)
    _, betas, V = _ray_nodes(measure, r, p, nodes)
    u = _acquisition_values(model, measure, V)
    return _line_cumulative(u, betas)


def dcv_gradient(
    model: WarpedIntegrandModel,
    measure: GaussianMeasure,
    r: np.ndarray,
    *,
    p: float = 0.995,
    nodes: int = 50,
) -> np.ndarray:
    """Gradient of the truncated cumulative acquisition, projected onto the
    sphere tangent plane at r.

    Two contributions: the Simpson integral of the pointwise chain rule
    (predictive gradients of the unwarped variance and of the measure), and a
    boundary term because the truncation length alpha_max itself depends on
    the direction.
    """
    _require_linearized(model)
    r = _unit(r)
    a_max, betas, V = _ray_nodes(measure, r, p, nodes)
    m, k = model.gp.posterior(V)
    dm, dk = model.gp.posterior_gradient(V)
    kt = m**2 * k
    dkt = (2.0 * m * k)[:, None] * dm + (m**2)[:, None] * dk
    pi = measure.density(V)
    dpi = -pi[:, None] * measure.precision_apply(V)
    integrand = betas[:, None] * pi[:, None] * (
        2.0 * kt[:, None] * dpi + pi[:, None] * dkt
    )
    grad = simpson(integrand, x=betas, axis=0)
    # Leibniz boundary term from the direction-dependent upper limit
    u_end = float(kt[-1] * pi[-1] ** 2)
    Sr = measure.precision @ r
    grad = grad + u_end * (-a_max * Sr / float(r @ Sr))
    grad = grad - (grad @ r) * r
    return grad


def _sphere_ascend(
    model: WarpedIntegrandModel,
    measure: GaussianMeasure,
    r0: np.ndarray,
    *,
    max_steps: int,
    linesearch_max: int,
    optimism: float,
    initial_step: float,
    step_abort: float,
    p: float,
    nodes: int,
) -> tuple[np.ndarray, float]:
    r = r0 / np.linalg.norm(r0)
    val = dcv_objective(model, measure, r, p=p, nodes=nodes)
    step = initial_step
    for _ in range(max_steps):
        grad = dcv_gradient(model, measure, r, p=p, nodes=nodes)
        if not np.all(np.isfinite(grad)) or np.linalg.norm(grad) < 1e-18:
            break
        accepted = False
        s = step
        for _ in range(linesearch_max):
            xi = s * grad
            if np.linalg.norm(xi) < step_abort:
                return r, val
            cand = r + xi
            cand = cand / np.linalg.norm(cand)
            cval = dcv_objective(model, measure, cand, p=p, nodes=nodes)
            if cval > val:
                r, val = cand, cval
                step = s * optimism
                accepted = True
                break
            s *= 0.5
        if not accepted:
            break
    return r, val


def dcv_select_direction(
    model: WarpedIntegrandModel,
    measure: GaussianMeasure,
    seed=0,
    *,
    max_steps: int = 5,
    n_starts: int = 8,
    linesearch_max: int = 5,
    optimism: float = 2.0,
    initial_step: float = 1.0,
    step_abort: float = 1e-10,
    p: float = 0.995,
    nodes: int = 50,
) -> np.ndarray:
    """Sphere-constrained ascent of the cumulative acquisition.

    Tangent-projected gradient steps with the retraction (r + xi)/|r + xi|
    and a value-only linesearch; the best of several seeded starts is
    returned as a unit vector.
    """
    _require_linearized(model)
    rng = _as_generator(seed)
    draws = measure.sample(rng, n_starts)
    norms = np.linalg.norm(draws, axis=1)
    ok = norms > 0
    if not np.any(ok):
        raise NumericalError("could not draw any non-zero start direction")
    best_r, best_val = None, -np.inf
    for r0 in draws[ok] / norms[ok, None]:
        r, val = _sphere_ascend(
            model,
            measure,
            r0,
            max_steps=max_steps,
            linesearch_max=linesearch_max,
            optimism=optimism,
            initial_step=initial_step,
            step_abort=step_abort,
            p=p,
            nodes=nodes,
        )
        if val > best_val:
            best_r, best_val = r, val
    return best_r / np.linalg.norm(best_r)


@dataclass(frozen=True)
class RayObservationBatch:
    """Observations harvested along one solved geodesic ray."""

    direction: np.ndarray
    alphas: np.ndarray
    g_values: np.ndarray
    source: str
    selected_order: list

    def __post_init__(self) -> None:
        if abs(float(np.linalg.norm(self.direction)) - 1.0) > 1e-12:
            raise ValidationError("ray direction must have unit norm")
        if np.any(self.alphas <= 0) or np.any(np.diff(self.alphas) <= 0):
            raise ValidationError("alphas must be positive and strictly sorted")


def dcv_collect_along_ray(
    model: WarpedIntegrandModel,
    solution: GeodesicSolution,
    measure: GaussianMeasure,
    r: np.ndarray,
    a_max: float,
    *,
    n_candidates: int = 30,
    n_select: int = 6,
    source: str = "ray",
) -> RayObservationBatch:
    """Harvest several observations from a solved ray geodesic.

    Candidates are evenly spaced in (0, a_max]; picks maximize the standard
    acquisition sequentially, updating the model after each one.  Integrand
    values are read from the dense interpolant, so no new ODE solves happen.
    """
    r = _unit(np.asarray(r, dtype=float))
    if not solution.converged:
        raise SolverFailure("ray geodesic did not converge; skip this ray")
    betas = a_max * np.arange(1, n_candidates + 1) / n_candidates
    candidates = betas[:, None] * r[None, :]
    alive = list(range(n_candidates))
    if model.gp.n_obs > 0:
        existing = model.gp.inputs
        alive = [
            i
            for i in alive
            if float(np.min(np.linalg.norm(existing - candidates[i], axis=1)))
            > DUPLICATE_TOL
        ]
    picked: list[tuple[float, float]] = []
    for _ in range(n_select):
        if not alive:
            break
        u = _acquisition_values(model, measure, candidates[alive])
        idx = alive[int(np.argmax(u))]
        beta = float(betas[idx])
        x_end = solution.curve(beta / a_max)
        g = float(solution.metric.volume_elements(x_end[None, :])[0])
        if not np.isfinite(g):
            alive.remove(idx)
            continue
        model.add(candidates[idx], g)
        picked.append((beta, g))
        alive.remove(idx)
    order = np.array([b for b, _ in picked])
    sort = np.argsort(order)
    return RayObservationBatch(
        direction=r,
        alphas=order[sort],
        g_values=np.array([g for _, g in picked])[sort],
        source=source,
        selected_order=[b for b, _ in picked],
    )


# ---------------------------------------------------------------------------
# Integration driver


@dataclass(frozen=True)
class SampleBudget:
    """Fixed evaluation budget; the reuse numbers apply when a problem
    carries observations from a covariance-only parameter update."""

    samples: int = 80
    rays: int = 18
    reuse_samples: int = 10
    reuse_rays: int = 2


@dataclass(frozen=True)
class RuntimeBudget:
    """Wall-clock budget: acquisition continues until the limit is reached,
    so realized runtime is at least ``seconds`` for live methods."""

    seconds: float


@dataclass
class ObservationSet:
    """Reusable integrand observations plus the fitted warped-model state.

    When ``kernel_log_params``, ``kernel_kind``, and ``delta`` are all
    present, a reuse run can rebuild the warped model exactly as the
    producing run left it and skip re-fitting hyperparameters on data they
    were already optimized on."""

    inputs: np.ndarray
    values: np.ndarray
    kernel_log_params: np.ndarray | None = None
    kernel_kind: str | None = None
    delta: float | None = None


def _problem_id(metric: Metric, mu: np.ndarray, Sigma: np.ndarray) -> str:
    payload = json.dumps(metric.descriptor(), sort_keys=True).encode()
    h = hashlib.sha1()
    h.update(payload)
    h.update(np.ascontiguousarray(mu, dtype=float).tobytes())
    h.update(np.ascontiguousarray(Sigma, dtype=float).tobytes())
    return h.hexdigest()


@dataclass(eq=False)
class IntegrationProblem:
    """One normalization-constant problem: metric, base point, covariance.

    ``reuse`` carries observations from the previous iteration when only the
    covariance changed (the integrand is unchanged in that case)."""

    metric: Metric
    mu: np.ndarray
    Sigma: np.ndarray
    reuse: ObservationSet | None = None

    def __post_init__(self) -> None:
        self.mu = np.asarray(self.mu, dtype=float)
        self.Sigma = np.asarray(self.Sigma, dtype=float)
        if self.mu.shape != (self.metric.dim,):
            raise ValidationError("mu must match the metric dimension")
        self.problem_id = _problem_id(self.metric, self.mu, self.Sigma)


@dataclass(frozen=True)
class IntegrationConfig:
    """Knobs for the integration loop; defaults follow the reference setup."""

    kernel: str = "matern52"
    prior_mean_from_far_field: bool = True
    init_jitter_count: int = 4
    init_jitter_scale: float = 1e-3
    integral_samples: int = 30000
    variance_subsample: int = 2000
    control_variates: bool = True
    hyperopt_interval: int = 10
    hyperopt_restarts: int = 3
    mc_samples: int = 1000
    us_pool_size: int = 200
    us_starts: int = 10
    us_max_steps: int = 30
    chi_square_p: float = 0.995
    simpson_nodes: int = 50
    ray_candidates: int = 30
    points_per_ray: int = 6
    dcv_starts: int = 8
    dcv_max_steps_fixed: int = 5
    dcv_max_steps_runtime: int = 15
    dcv_linesearch_max: int = 5
    dcv_optimism: float = 2.0
    dcv_initial_step: float = 1.0
    dcv_step_abort: float = 1e-10


@dataclass
class IntegrationResult:
    """Outcome of one integration: the estimate (including the Gaussian
    constant Z), tangent-space moment integrals (without Z), effort counters,
    and the observation set for reuse."""

    method: str
    problem_id: str
    mean: float
    variance: float
    standard_error: float
    vector: np.ndarray
    matrix: np.ndarray
    wall_clock_s: float
    n_exp_maps: int
    n_g_evals: int
    n_exp_failures: int
    n_observations: int
    observations: ObservationSet
    diagnostics: dict

    def to_record(self) -> dict:
        return {
            "method": self.method,
            "problem_id": self.problem_id,
            "mean": self.mean,
            "variance": self.variance,
            "standard_error": self.standard_error,
            "vector": np.asarray(self.vector).tolist(),
            "matrix": np.asarray(self.matrix).tolist(),
            "wall_clock_s": self.wall_clock_s,
            "n_exp_maps": self.n_exp_maps,
            "n_g_evals": self.n_g_evals,
            "n_exp_failures": self.n_exp_failures,
            "n_observations": self.n_observations,
            "diagnostics": self.diagnostics,
        }


@dataclass
class _Counters:
    n_exp_maps: int = 0
    n_g_evals: int = 0
    n_exp_failures: int = 0
    hyperopt_runs: int = 0


def _evaluate_g(
    metric: Metric,
    mu: np.ndarray,
    v: np.ndarray,
    exp_tol: float,
    counters: _Counters,
) -> tuple[float | None, GeodesicSolution | None]:
    """Integrand value at tangent vector v; None on solver or value failure."""
    if float(np.linalg.norm(v)) == 0.0:
        sol = None
        x_end = mu
    else:
        try:
            sol = exp_map(metric, mu, v, tol=exp_tol)
        except SolverFailure:
            counters.n_exp_maps += 1
            counters.n_exp_failures += 1
            return None, None
        counters.n_exp_maps += 1
        x_end = sol.curve(1.0)
    try:
        g = float(metric.volume_elements(np.asarray(x_end, dtype=float)[None, :])[0])
    except (ValidationError, FloatingPointError):
        counters.n_exp_failures += 1
        return None, None
    if not np.isfinite(g) or g <= 0.0:
        counters.n_exp_failures += 1
        return None, None
    counters.n_g_evals += 1
    return g, sol


def _maybe_hyperopt(
    model: WarpedIntegrandModel,
    since_opt: int,
    interval: int,
    hseed: int,
    restarts: int,
    counters: _Counters,
) -> int:
    if since_opt >= interval:
        model.gp.optimize_hyperparameters(seed=hseed, restarts=restarts)
        counters.hyperopt_runs += 1
        return 0
    return since_opt


def _prepare_model(
    problem: IntegrationProblem,
    measure: GaussianMeasure,
    eta: float,
    config: IntegrationConfig,
    solver: SolverConfig,
    counters: _Counters,
    seed: int,
) -> WarpedIntegrandModel:
    far = None
    if config.prior_mean_from_far_field:
        far = problem.metric.far_field_volume_element()
    if problem.reuse is not None and problem.reuse.inputs.shape[0] > 0:
        stored = problem.reuse
        V0 = np.asarray(stored.inputs, dtype=float)
        g0 = np.asarray(stored.values, dtype=float)
        restored = (
            stored.kernel_log_params is not None
            and stored.kernel_kind == config.kernel
            and stored.delta is not None
        )
        if restored:
            delta = float(stored.delta)
            kernel = _kernel_from_log_params(config.kernel, stored.kernel_log_params)
        else:
            delta = max(DELTA_FRACTION * float(np.min(g0)), DELTA_FLOOR)
            kernel = _default_kernel(config.kernel, V0, warp(np.maximum(g0, delta), delta))
        model = build_warped_model(
            V0, g0, eta=eta, kernel=kernel, delta=delta, far_field_value=far
        )
        if restored:
            # The stored hyperparameters are the marginal-likelihood optimum
            # for exactly these warped targets (the warp does not involve the
            # measure or eta), so re-optimizing here would redo the producing
            # run's final fit on identical data.
            return model
    else:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        jitter_scale = config.init_jitter_scale * np.sqrt(
            np.diag(measure.covariance)
        )
        design = [np.zeros(measure.dim)] + [
            jitter_scale * rng.standard_normal(measure.dim)
            for _ in range(config.init_jitter_count)
        ]
        V_rows, g_vals = [], []
        for v in design:
            g, _ = _evaluate_g(problem.metric, problem.mu, v, solver.exp_tol, counters)
            if g is not None:
                V_rows.append(v)
                g_vals.append(g)
        if not V_rows:
            raise UnreliableEstimateError(
                "no successful integrand evaluations during initialization"
            )
        kernel = _default_kernel(
            config.kernel,
            np.vstack([row[None, :] for row in V_rows]),
            np.zeros(len(V_rows)),
        )
        # length scales from the measure, not the clustered design points
        kernel = type(kernel)(
            lengthscales=np.sqrt(np.diag(measure.covariance)),
            output_scale=kernel.output_scale,
        )
        model = build_warped_model(
            np.vstack(V_rows),
            np.asarray(g_vals),
            eta=eta,
            kernel=kernel,
            far_field_value=far,
        )
    hseed = int(np.random.SeedSequence([seed, 3]).generate_state(1)[0])
    model.gp.optimize_hyperparameters(seed=hseed, restarts=config.hyperopt_restarts)
    counters.hyperopt_runs += 1
    return model


def _acquire_samples(
    model: WarpedIntegrandModel,
    problem: IntegrationProblem,
    measure: GaussianMeasure,
    budget,
    n_samples: int,
    config: IntegrationConfig,
    solver: SolverConfig,
    counters: _Counters,
    seed: int,
    t_start: float,
) -> None:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    hseed = int(np.random.SeedSequence([seed, 3]).generate_state(1)[0])
    since_opt = 0
    done = 0
    while True:
        if isinstance(budget, RuntimeBudget):
            if time.perf_counter() - t_start >= budget.seconds:
                break
        elif done >= n_samples:
            break
        v = uncertainty_sampling_next(
            model,
            measure,
            seed=rng,
            pool_size=config.us_pool_size,
            n_starts=config.us_starts,
            max_steps=config.us_max_steps,
        )
        g, _ = _evaluate_g(problem.metric, problem.mu, v, solver.exp_tol, counters)
        done += 1
        if g is None:
            continue
        try:
            model.add(v, g)
        except DuplicateInputError:
            continue
        since_opt = _maybe_hyperopt(
            model, since_opt + 1, config.hyperopt_interval, hseed,
            config.hyperopt_restarts, counters,
        )


def _acquire_rays(
    model: WarpedIntegrandModel,
    problem: IntegrationProblem,
    measure: GaussianMeasure,
    budget,
    n_rays: int,
    config: IntegrationConfig,
    solver: SolverConfig,
    counters: _Counters,
    seed: int,
    t_start: float,
) -> None:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    hseed = int(np.random.SeedSequence([seed, 3]).generate_state(1)[0])
    runtime_mode = isinstance(budget, RuntimeBudget)
    max_steps = (
        config.dcv_max_steps_runtime if runtime_mode else config.dcv_max_steps_fixed
    )
    since_opt = 0
    done = 0
    last_failed = False
    while True:
        if runtime_mode:
            if time.perf_counter() - t_start >= budget.seconds:
                break
        elif done >= n_rays:
            break
        if last_failed:
            # a failed ray leaves the model unchanged, so re-optimizing would
            # pick the same direction; fall back to a random one
            draw = measure.sample(rng, 1)[0]
            norm = np.linalg.norm(draw)
            r = draw / norm if norm > 0 else np.eye(measure.dim)[0]
        else:
            r = dcv_select_direction(
                model,
                measure,
                seed=rng,
                max_steps=max_steps,
                n_starts=config.dcv_starts,
                linesearch_max=config.dcv_linesearch_max,
                optimism=config.dcv_optimism,
                initial_step=config.dcv_initial_step,
                step_abort=config.dcv_step_abort,
                p=config.chi_square_p,
                nodes=config.simpson_nodes,
            )
        a_max = alpha_max(measure, r, config.chi_square_p)
        done += 1
        try:
            sol = exp_map(problem.metric, problem.mu, a_max * r, tol=solver.exp_tol)
        except SolverFailure:
            counters.n_exp_maps += 1
            counters.n_exp_failures += 1
            last_failed = True
            continue
        counters.n_exp_maps += 1
        last_failed = False
        batch = dcv_collect_along_ray(
            model,
            sol,
            measure,
            r,
            a_max,
            n_candidates=config.ray_candidates,
            n_select=config.points_per_ray,
            source=f"ray-{done}",
        )
        counters.n_g_evals += len(batch.alphas)
        since_opt = _maybe_hyperopt(
            model, since_opt + len(batch.alphas), config.hyperopt_interval, hseed,
            config.hyperopt_restarts, counters,
        )


def _run_mc(
    problem: IntegrationProblem,
    measure: GaussianMeasure,
    budget,
    config: IntegrationConfig,
    solver: SolverConfig,
    counters: _Counters,
    seed: int,
    t_start: float,
) -> tuple[float, float, float, np.ndarray, np.ndarray, ObservationSet]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
    V_rows, g_vals = [], []
    attempts = 0
    while True:
        if isinstance(budget, RuntimeBudget):
            if time.perf_counter() - t_start >= budget.seconds:
                break
        elif attempts >= budget.samples:
            break
        v = measure.sample(rng, 1)[0]
        attempts += 1
        g, _ = _evaluate_g(problem.metric, problem.mu, v, solver.exp_tol, counters)
        if g is None:
            continue
        V_rows.append(v)
        g_vals.append(g)
    n_ok = len(g_vals)
    if n_ok == 0 or n_ok < attempts / 2:
        raise UnreliableEstimateError(
            f"{attempts - n_ok} of {attempts} integrand evaluations failed"
        )
    V = np.vstack(V_rows)
    g = np.asarray(g_vals)
    Z = measure.normalization
    mean = Z * float(np.mean(g))
    se = Z * float(np.std(g, ddof=1) / math.sqrt(n_ok)) if n_ok > 1 else 0.0
    vector = (V * g[:, None]).mean(axis=0)
    matrix = (V.T * g) @ V / n_ok
    obs = ObservationSet(inputs=V, values=g)
    return mean, se**2, se, vector, matrix, obs


_METHODS = ("wsabi-l", "wsabi-m", "dcv", "mc")


def run_integration(
    problem: IntegrationProblem,
    method: str,
    budget: SampleBudget | RuntimeBudget = SampleBudget(),
    seed: int = 0,
    config: IntegrationConfig | None = None,
    solver: SolverConfig = DEFAULT_SOLVER,
) -> IntegrationResult:
    """Estimate the normalization constant of one problem with one method.

    Returns the constant (including Z), its uncertainty, the tangent-space
    moment integrals shared by downstream gradient computations, wall-clock
    time, effort counters, and the observation set for node reuse.
    """
    if method not in _METHODS:
        raise ValidationError(f"method must be one of {_METHODS}, got {method!r}")
    if isinstance(budget, SampleBudget):
        if budget.samples < 1 or budget.rays < 1:
            raise ValidationError("sample budget must be positive")
    elif isinstance(budget, RuntimeBudget):
        if not budget.seconds > 0:
            raise ValidationError("runtime budget must be positive")
    else:
        raise ValidationError("budget must be a SampleBudget or RuntimeBudget")
    config = config or IntegrationConfig()
    t_start = time.perf_counter()
    measure = GaussianMeasure(problem.Sigma)
    counters = _Counters()
    reusing = problem.reuse is not None and problem.reuse.inputs.shape[0] > 0

    if method == "mc":
        mean, variance, se, vector, matrix, obs = _run_mc(
            problem, measure, budget, config, solver, counters, seed, t_start
        )
        diagnostics = {"attempted": counters.n_g_evals + counters.n_exp_failures}
    else:
        eta = 1.0 if method == "wsabi-m" else 0.0
        model = _prepare_model(problem, measure, eta, config, solver, counters, seed)
        if method in ("wsabi-l", "wsabi-m"):
            n_samples = (
                budget.reuse_samples if reusing else budget.samples
            ) if isinstance(budget, SampleBudget) else 0
            _acquire_samples(
                model, problem, measure, budget, n_samples, config, solver,
                counters, seed, t_start,
            )
        else:
            n_rays = (
                budget.reuse_rays if reusing else budget.rays
            ) if isinstance(budget, SampleBudget) else 0
            _acquire_rays(
                model, problem, measure, budget, n_rays, config, solver,
                counters, seed, t_start,
            )
        hseed = int(np.random.SeedSequence([seed, 3]).generate_state(1)[0])
        model.gp.optimize_hyperparameters(
            seed=hseed, restarts=config.hyperopt_restarts
        )
        counters.hyperopt_runs += 1
        ip = posterior_integrals(
            model,
            measure,
            config.integral_samples,
            seed=np.random.SeedSequence([seed, 2]),
            control_variates=config.control_variates,
            variance_subsample=config.variance_subsample,
        )
        Z = measure.normalization
        mean = Z * ip.mean
        variance = Z**2 * ip.variance
        se = Z * ip.standard_error
        vector = ip.vector
        matrix = ip.matrix
        obs = ObservationSet(
            inputs=model.gp.inputs,
            values=model.g_values.copy(),
            kernel_log_params=model.gp.kernel.log_params,
            kernel_kind=_kernel_kind(model.gp.kernel),
            delta=model.delta,
        )
        diagnostics = {
            "delta": model.delta,
            "eta": eta,
            "clamp_count": model.clamp_count,
            "hyperopt_runs": counters.hyperopt_runs,
            "kernel_log_params": model.gp.kernel.log_params.tolist(),
            "reused_observations": int(problem.reuse.inputs.shape[0]) if reusing else 0,
        }

    return IntegrationResult(
        method=method,
        problem_id=problem.problem_id,
        mean=mean,
        variance=variance,
        standard_error=se,
        vector=vector,
        matrix=matrix,
        wall_clock_s=time.perf_counter() - t_start,
        n_exp_maps=counters.n_exp_maps,
        n_g_evals=counters.n_g_evals,
        n_exp_failures=counters.n_exp_failures,
        n_observations=int(obs.inputs.shape[0]),
        observations=obs,
        diagnostics=diagnostics,
    )
