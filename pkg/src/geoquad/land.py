"""Locally adaptive normal distributions on learned Riemannian geometries.

A component is a Riemannian normal law anchored at a base point ``mu`` with a
tangent-space covariance ``Sigma``: its density at a point ``x`` is
``exp(-0.5 * v^T Sigma^{-1} v) / C`` where ``v`` is the boundary-value
geodesic tangent (log map) of ``x`` at ``mu`` and ``C`` is the normalization
constant produced by an integration backend.  Mixtures of such components are
fitted by an expectation-maximization loop whose maximization step performs
steepest descent on the means (via the exponential map) and a linesearch
descent on the covariances along the manifold of symmetric positive-definite
matrices.

The module separates three layers:

- pure formulas (densities, responsibilities, objective, mean direction,
  covariance gradient) that consume a pre-computed integration record;
- manifold primitives for symmetric positive-definite matrices
  (exponential, norm, projection, distance);
- the fitting loop, which owns seeding, caching, observation reuse between
  covariance trials, and the emitted corpus of integration problems.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .bq import (
    IntegrationConfig,
    IntegrationProblem,
    IntegrationResult,
    ObservationSet,
    RuntimeBudget,
    SampleBudget,
    run_integration,
)
from .errors import (
    GeodesicFailure,
    NumericalError,
    SolverFailure,
    ValidationError,
)
from .geodesics import DEFAULT_SOLVER, GeodesicCache, SolverConfig, exp_map, log_map
from .metrics import Metric

__all__ = [
    "FitConfig",
    "FitResult",
    "Integrator",
    "LandComponent",
    "SigmaUpdateOutcome",
    "component_log_maps",
    "covariance_update",
    "fit",
    "init_components",
    "kmeans_plusplus",
    "land_density",
    "land_log_density",
    "manifold_covariance",
    "mu_direction",
    "nll",
    "responsibilities",
    "sigma_euclidean_gradient",
    "spd_distance",
    "spd_exp",
    "spd_norm",
    "spd_project",
]


def _gauss_norm(Sigma: np.ndarray) -> float:
    """sqrt((2 pi)^D det Sigma): the Gaussian constant of the covariance."""
    dim = Sigma.shape[0]
    sign, logdet = np.linalg.slogdet(Sigma)
    if sign <= 0:
        raise NumericalError("covariance has non-positive determinant")
    return math.exp(0.5 * (dim * math.log(2.0 * math.pi) + logdet))


def _sym(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + A.T)


# ---------------------------------------------------------------------------
# component


@dataclass
class LandComponent:
    """One Riemannian normal component: base point, tangent covariance,
    normalization constant, and mixture weight."""

    mu: np.ndarray
    Sigma: np.ndarray
    norm_const: float
    weight: float

    def __post_init__(self) -> None:
        self.mu = np.asarray(self.mu, dtype=float)
        self.Sigma = np.asarray(self.Sigma, dtype=float)
        if self.mu.ndim != 1:
            raise ValidationError("mu must be a vector")
        dim = self.mu.shape[0]
        if self.Sigma.shape != (dim, dim):
            raise ValidationError(
                f"Sigma must be {dim}x{dim}, got {self.Sigma.shape}"
            )
        if not (np.isfinite(self.norm_const) and self.norm_const > 0):
            raise ValidationError(
                f"norm_const must be positive and finite, got {self.norm_const}"
            )
        if not (np.isfinite(self.weight) and 0.0 <= self.weight <= 1.0):
            raise ValidationError(f"weight must lie in [0, 1], got {self.weight}")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def _chol(self) -> np.ndarray:
        try:
            return np.linalg.cholesky(self.Sigma)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(
                "component covariance is not positive definite"
            ) from exc

    def mahalanobis_sq(self, tangents: np.ndarray) -> np.ndarray:
        """v^T Sigma^{-1} v for each row of ``tangents``.

        Non-finite tangents yield non-finite values rather than raising, so
        callers can attribute the failure to specific data."""
        V = np.atleast_2d(np.asarray(tangents, dtype=float))
        with np.errstate(all="ignore"):
            white = solve_triangular(
                self._chol(), V.T, lower=True, check_finite=False
            )
            return np.einsum("ij,ij->j", white, white)

    @property
    def precision(self) -> np.ndarray:
        chol = self._chol()
        inv_l = solve_triangular(chol, np.eye(self.dim), lower=True)
        return inv_l.T @ inv_l

    def to_record(self) -> dict:
        return {
            "mu": self.mu.tolist(),
            "Sigma": self.Sigma.tolist(),
            "norm_const": self.norm_const,
            "weight": self.weight,
        }


def land_log_density(component: LandComponent, tangent: np.ndarray):
    """Log density of the component at log-map tangent(s) ``tangent``."""
    arr = np.asarray(tangent, dtype=float)
    single = arr.ndim == 1
    value = -0.5 * component.mahalanobis_sq(arr) - math.log(component.norm_const)
    return float(value[0]) if single else value


def land_density(component: LandComponent, tangent: np.ndarray):
    """Density of the component at log-map tangent(s) ``tangent``."""
    out = np.exp(land_log_density(component, tangent))
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# expectation step and objective


def _check_estep_inputs(components, tangents, mask):
    T = np.asarray(tangents, dtype=float)
    M = np.asarray(mask, dtype=bool)
    if T.ndim != 3:
        raise ValidationError("tangents must have shape (n, k, dim)")
    n, k, dim = T.shape
    if k != len(components):
        raise ValidationError(
            f"tangents carry {k} components but {len(components)} were given"
        )
    if M.shape != (n, k):
        raise ValidationError(f"mask must have shape ({n}, {k}), got {M.shape}")
    for comp in components:
        if comp.dim != dim:
            raise ValidationError("component dimension does not match tangents")
    return T, M, n, k


def responsibilities(
    components: list[LandComponent], tangents: np.ndarray, mask: np.ndarray
) -> np.ndarray:
    """Posterior component probabilities for each datum.

    ``tangents[n, k]`` is the log map of datum ``n`` at component ``k``'s base
    point and ``mask[n, k]`` marks it usable.  Rows with no usable component
    fall back to the uniform distribution.
    """
    T, M, n, k = _check_estep_inputs(components, tangents, mask)
    logp = np.full((n, k), -np.inf)
    for j, comp in enumerate(components):
        rows = M[:, j]
        if not np.any(rows):
            continue
        with np.errstate(divide="ignore"):
            log_w = np.log(comp.weight) if comp.weight > 0 else -np.inf
        logp[rows, j] = land_log_density(comp, T[rows, j, :]) + log_w
    out = np.empty((n, k))
    norm = logsumexp(logp, axis=1)
    dead = ~np.isfinite(norm)
    live = ~dead
    out[live] = np.exp(logp[live] - norm[live, None])
    out[dead] = 1.0 / k
    return out


def nll(
    components: list[LandComponent],
    tangents: np.ndarray,
    mask: np.ndarray,
    resp: np.ndarray,
) -> float:
    """Responsibility-weighted negative log-likelihood of the mixture.

    Data with failed log maps are excluded from the sums.  Any non-finite
    contribution raises :class:`NumericalError` naming the offending data
    indices.
    """
    T, M, n, k = _check_estep_inputs(components, tangents, mask)
    R = np.asarray(resp, dtype=float)
    if R.shape != (n, k):
        raise ValidationError(f"resp must have shape ({n}, {k}), got {R.shape}")
    total = 0.0
    bad: set[int] = set()
    for j, comp in enumerate(components):
        rows = M[:, j] & (R[:, j] > 0)
        if not np.any(rows):
            continue
        with np.errstate(divide="ignore"):
            log_w = np.log(comp.weight) if comp.weight > 0 else -np.inf
        terms = R[rows, j] * (
            0.5 * comp.mahalanobis_sq(T[rows, j, :])
            + math.log(comp.norm_const)
            - log_w
        )
        finite = np.isfinite(terms)
        if not np.all(finite):
            bad.update(np.nonzero(rows)[0][~finite].tolist())
            continue
        total += float(terms.sum())
    if bad:
        raise NumericalError(
            f"non-finite likelihood terms at data indices {sorted(bad)[:10]}"
        )
    return total


# ---------------------------------------------------------------------------
# gradients


def mu_direction(
    component: LandComponent,
    tangents: np.ndarray,
    mask: np.ndarray,
    resp: np.ndarray,
    record,
) -> np.ndarray:
    """Steepest-descent direction for the component base point.

    ``record`` is an integration result at the component's current
    parameters: ``record.mean`` is the normalization constant (including the
    Gaussian constant) and ``record.vector`` the tangent first-moment
    integral (without it).  The direction is the responsibility-weighted sum
    of log maps minus the density-mass correction; a positive step along it
    through the exponential map decreases the objective.
    """
    T = np.atleast_2d(np.asarray(tangents, dtype=float))
    M = np.asarray(mask, dtype=bool)
    r = np.asarray(resp, dtype=float)
    rows = M & (r > 0)
    r_sum = float(r[rows].sum())
    data_term = (r[rows, None] * T[rows]).sum(axis=0)
    z = _gauss_norm(component.Sigma)
    correction = (z * r_sum / component.norm_const) * np.asarray(
        record.vector, dtype=float
    )
    return data_term - correction


def sigma_euclidean_gradient(
    component: LandComponent,
    tangents: np.ndarray,
    mask: np.ndarray,
    resp: np.ndarray,
    record,
) -> np.ndarray:
    """Euclidean gradient of the objective with respect to the covariance.

    Combines the responsibility-weighted whitened scatter of the log maps
    with the tangent second-moment integral from ``record`` (``record.matrix``,
    without the Gaussian constant).  The result is symmetric; project it with
    :func:`spd_project` before taking a manifold step.
    """
    T = np.atleast_2d(np.asarray(tangents, dtype=float))
    M = np.asarray(mask, dtype=bool)
    r = np.asarray(resp, dtype=float)
    rows = M & (r > 0)
    r_sum = float(r[rows].sum())
    prec = component.precision
    scatter = (r[rows, None] * T[rows]).T @ T[rows]
    data_term = -0.5 * prec @ scatter @ prec
    z = _gauss_norm(component.Sigma)
    moment = prec @ np.asarray(record.matrix, dtype=float) @ prec
    correction = (r_sum * z / (2.0 * component.norm_const)) * moment
    return _sym(data_term + correction)


# ---------------------------------------------------------------------------
# symmetric positive-definite manifold primitives


def _spd_eig(X: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    A = np.asarray(X, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValidationError(f"{what} must be a square matrix")
    if not np.all(np.isfinite(A)):
        raise NumericalError(f"{what} contains non-finite entries")
    lam, vec = np.linalg.eigh(_sym(A))
    if np.any(lam <= 0) or not np.all(np.isfinite(lam)):
        raise NumericalError(
            f"{what} is not positive definite (eigenvalues {lam})"
        )
    return lam, vec


def spd_exp(X: np.ndarray, Xi: np.ndarray) -> np.ndarray:
    """Exponential map on the positive-definite cone at ``X``:
    ``X^1/2 expm(X^-1/2 Xi X^-1/2) X^1/2`` for a symmetric tangent ``Xi``."""
    lam, vec = _spd_eig(X, "base matrix")
    root = (vec * np.sqrt(lam)) @ vec.T
    inv_root = (vec / np.sqrt(lam)) @ vec.T
    inner = _sym(inv_root @ _sym(np.asarray(Xi, dtype=float)) @ inv_root)
    mu, w = np.linalg.eigh(inner)
    if not np.all(np.isfinite(mu)):
        raise NumericalError("tangent produced non-finite spectrum")
    exp_inner = (w * np.exp(mu)) @ w.T
    return _sym(root @ exp_inner @ root)


def spd_norm(X: np.ndarray, Xi: np.ndarray) -> float:
    """Riemannian tangent norm at ``X``: Frobenius norm of the whitened
    tangent ``L^-1 Xi L^-T`` where ``X = L L^T``."""
    A = np.asarray(X, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValidationError("base matrix must be square")
    Xi = np.asarray(Xi, dtype=float)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(Xi))):
        raise NumericalError("matrix norm inputs contain non-finite entries")
    try:
        chol = np.linalg.cholesky(_sym(A))
    except np.linalg.LinAlgError as exc:
        raise NumericalError("base matrix is not positive definite") from exc
    half = solve_triangular(chol, Xi, lower=True)
    white = solve_triangular(chol, half.T, lower=True).T
    return float(np.linalg.norm(white))


def spd_project(Sigma: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Convert a Euclidean gradient into the Riemannian gradient at
    ``Sigma``: ``0.5 * Sigma (grad + grad^T) Sigma``."""
    S = np.asarray(Sigma, dtype=float)
    G = np.asarray(grad, dtype=float)
    return S @ _sym(G) @ S


def spd_distance(A: np.ndarray, B: np.ndarray) -> float:
    """Affine-invariant distance between positive-definite matrices:
    Frobenius norm of ``logm(A^-1/2 B A^-1/2)``.  Invariant under congruence
    ``A -> Xi A Xi^T`` by any invertible ``Xi``."""
    lam, vec = _spd_eig(A, "first matrix")
    inv_root = (vec / np.sqrt(lam)) @ vec.T
    inner = _sym(inv_root @ _sym(np.asarray(B, dtype=float)) @ inv_root)
    mu = np.linalg.eigvalsh(inner)
    if np.any(mu <= 0) or not np.all(np.isfinite(mu)):
        raise NumericalError("second matrix is not positive definite")
    return float(np.linalg.norm(np.log(mu)))


def manifold_covariance(component: LandComponent, record) -> np.ndarray:
    """Covariance of the component under its own law: the tangent
    second-moment integral rescaled by the normalization constant.  On a flat
    geometry this reproduces ``Sigma`` exactly."""
    z = _gauss_norm(component.Sigma)
    return _sym(np.asarray(record.matrix, dtype=float) * (z / component.norm_const))


# ---------------------------------------------------------------------------
# integration backend adapter


@dataclass
class Integrator:
    """Normalization-constant backend: quadrature flavor or Monte Carlo.

    ``method`` is one of ``"wsabi-l"``, ``"wsabi-m"``, ``"dcv"``, ``"mc"``.
    ``run`` builds the integration problem (optionally carrying reusable
    observations when only the covariance changed) and returns the full
    integration result.
    """

    method: str = "wsabi-l"
    budget: SampleBudget | RuntimeBudget = field(default_factory=SampleBudget)
    config: IntegrationConfig | None = None
    solver: SolverConfig = DEFAULT_SOLVER

    def run(
        self,
        metric: Metric,
        mu: np.ndarray,
        Sigma: np.ndarray,
        reuse: ObservationSet | None = None,
        seed: int = 0,
    ) -> IntegrationResult:
        problem = IntegrationProblem(metric, mu, Sigma, reuse=reuse)
        return run_integration(
            problem,
            self.method,
            self.budget,
            seed=seed,
            config=self.config,
            solver=self.solver,
        )


# ---------------------------------------------------------------------------
# log maps of a dataset at a base point


def component_log_maps(
    metric: Metric,
    data: np.ndarray,
    mu: np.ndarray,
    solver: SolverConfig = DEFAULT_SOLVER,
    cache: GeodesicCache | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Log maps of every datum at ``mu``.

    Returns ``(tangents, mask)`` where ``mask[n]`` is False when the
    boundary-value solve failed outright; refined-but-unconverged curves are
    kept (their tangent is the pre-solver estimate).
    """
    X = np.atleast_2d(np.asarray(data, dtype=float))
    n = X.shape[0]
    tangents = np.full((n, metric.dim), np.nan)
    mask = np.zeros(n, dtype=bool)
    for i in range(n):
        try:
            sol = log_map(metric, mu, X[i], config=solver, cache=cache)
        except (GeodesicFailure, SolverFailure):
            continue
        tangents[i] = sol.initial_velocity
        mask[i] = True
    return tangents, mask


# ---------------------------------------------------------------------------
# initialization


def kmeans_plusplus(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Distance-squared weighted center seeding; centers are data points."""
    X = np.atleast_2d(np.asarray(data, dtype=float))
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ValidationError(f"need 1 <= k <= {n}, got k={k}")
    centers = [X[int(rng.integers(n))]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = float(d2.sum())
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def init_components(
    data: np.ndarray, n_components: int, seed: int = 0, knn: int = 10
) -> list[LandComponent]:
    """Seed components: centers from distance-weighted sampling, isotropic
    covariance with scale set by the mean distance to the ``knn`` nearest
    neighbours, uniform weights, placeholder normalization constants."""
    X = np.atleast_2d(np.asarray(data, dtype=float))
    if not np.all(np.isfinite(X)):
        raise ValidationError("data must be finite")
    rng = np.random.default_rng(seed)
    centers = kmeans_plusplus(X, n_components, rng)
    comps = []
    for mu in centers:
        dist = np.sort(np.linalg.norm(X - mu[None, :], axis=1))
        positive = dist[dist > 0][:knn]
        if positive.size == 0:
            raise ValidationError("data are degenerate: all points coincide")
        s = float(np.mean(positive))
        comps.append(
            LandComponent(
                mu=mu.copy(),
                Sigma=s**2 * np.eye(X.shape[1]),
                norm_const=1.0,
                weight=1.0 / n_components,
            )
        )
    return comps


# ---------------------------------------------------------------------------
# covariance update


@dataclass
class SigmaUpdateOutcome:
    """Result of one covariance descent call: updated component, retained
    stepsize, the integration record at the accepted parameters, accumulated
    observations at the current base point, and effort counters."""

    component: LandComponent
    alpha: float
    record: IntegrationResult
    observations: ObservationSet
    n_integrations: int
    accepted: int
    trials: list


def _component_objective(comp, tangents, mask, resp) -> float:
    return nll([comp], tangents[:, None, :], mask[:, None], resp[:, None])


def covariance_update(
    component: LandComponent,
    metric: Metric,
    tangents: np.ndarray,
    mask: np.ndarray,
    resp: np.ndarray,
    integrator: Integrator,
    record: IntegrationResult,
    *,
    observations: ObservationSet | None = None,
    alpha: float | None = None,
    seed: int = 0,
    outer_steps: int = 2,
    linesearch_max: int = 4,
    initial_step: float = 1.0,
    sufficient_decrease: float = 0.5,
    contraction: float = 0.5,
    optimism: float = 1.3,
    grad_tol: float = 1e-9,
) -> SigmaUpdateOutcome:
    """Covariance descent with backtracking linesearch on the
    positive-definite cone.

    Each outer step takes the Riemannian gradient at the current covariance,
    normalizes the first stepsize so the trial step has unit manifold norm,
    and backtracks until sufficient decrease holds.  A trial that still
    increases the objective is rejected: the covariance is kept and the
    stepsize reset to zero (to be re-normalized next call).  All trial
    integrations reuse the observations accumulated at the current base
    point — including those from rejected trials, which remain valid
    integrand evaluations.
    """
    T = np.atleast_2d(np.asarray(tangents, dtype=float))
    M = np.asarray(mask, dtype=bool)
    r = np.asarray(resp, dtype=float)
    comp = component
    rec = record
    obs = observations if observations is not None else rec.observations
    current = _component_objective(comp, T, M, r)
    a = alpha
    n_int = 0
    accepted = 0
    trials: list[dict] = []

    for _ in range(outer_steps):
        grad_e = sigma_euclidean_gradient(comp, T, M, r, rec)
        grad = spd_project(comp.Sigma, grad_e)
        gnorm = spd_norm(comp.Sigma, grad)
        if not np.isfinite(gnorm):
            raise NumericalError("covariance gradient is not finite")
        if gnorm <= grad_tol:
            break
        if a is None or a == 0.0:
            a = initial_step / gnorm

        def try_step(step):
            sigma_trial = spd_exp(comp.Sigma, -step * grad)
            rec_trial = integrator.run(
                metric, comp.mu, sigma_trial, reuse=obs, seed=seed
            )
            comp_trial = replace(
                comp, Sigma=sigma_trial, norm_const=rec_trial.mean
            )
            value = _component_objective(comp_trial, T, M, r)
            return comp_trial, rec_trial, value

        comp_trial, rec_trial, value = try_step(a)
        n_int += 1
        obs = rec_trial.observations
        trials.append(
            {
                "alpha": a,
                "nll": value,
                "Sigma": comp_trial.Sigma.copy(),
                "record": rec_trial,
                "accepted": None,
            }
        )
        evals = 1
        while (
            value > current - sufficient_decrease * a * gnorm**2
            and evals <= linesearch_max
        ):
            a *= contraction
            comp_trial, rec_trial, value = try_step(a)
            n_int += 1
            obs = rec_trial.observations
            trials.append(
                {
                    "alpha": a,
                    "nll": value,
                    "Sigma": comp_trial.Sigma.copy(),
                    "record": rec_trial,
                    "accepted": None,
                }
            )
            evals += 1
        if value > current:
            a = 0.0
            trials[-1]["accepted"] = False
        else:
            comp, rec, current = comp_trial, rec_trial, value
            accepted += 1
            trials[-1]["accepted"] = True
        if evals != 2:
            a *= optimism

    return SigmaUpdateOutcome(
        component=comp,
        alpha=float(a) if a is not None else 0.0,
        record=rec,
        observations=obs,
        n_integrations=n_int,
        accepted=accepted,
        trials=trials,
    )


# ---------------------------------------------------------------------------
# fitting loop


@dataclass
class FitConfig:
    """Hyperparameters of the mixture fit."""

    n_components: int = 1
    max_iterations: int = 20
    initial_mu_step: float = 0.1
    mu_gradient_tol: float = 0.01
    nll_tol: float = 2.0
    mu_optimism: float = 1.1
    mu_pessimism: float = 0.75
    sigma_outer_steps: int = 2
    sigma_linesearch_max: int = 4
    sigma_initial_step: float = 1.0
    sufficient_decrease: float = 0.5
    contraction: float = 0.5
    sigma_optimism: float = 1.3
    knn_init: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_components < 1:
            raise ValidationError("n_components must be at least 1")
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be at least 1")
        for name in (
            "initial_mu_step",
            "mu_optimism",
            "mu_pessimism",
            "sigma_initial_step",
            "sufficient_decrease",
            "contraction",
            "sigma_optimism",
        ):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if self.nll_tol < 0 or self.mu_gradient_tol < 0:
            raise ValidationError("tolerances must be non-negative")


@dataclass
class FitResult:
    """Outcome of a mixture fit.

    ``responsibilities`` are the expectation-step weights used by the final
    maximization step (the same ones the final mixture weights were computed
    from).  ``problems`` is the corpus of integration problems the fit
    generated, one record per integration, suitable for benchmark replay.
    """

    components: list[LandComponent]
    responsibilities: np.ndarray
    nll_trace: list[float]
    iterations: list[dict]
    problems: list[dict]
    alpha_mu: np.ndarray
    alpha_sigma: list[float]
    diagnostics: dict
    wall_clock_s: float

    def iteration_records(self) -> list[dict]:
        return self.iterations


def _integration_seed(root: int, iteration: int, component: int) -> int:
    return int(
        np.random.SeedSequence([root, iteration, component]).generate_state(1)[0]
    )


def fit(
    data: np.ndarray,
    metric: Metric,
    config: FitConfig | None = None,
    integrator: Integrator | None = None,
    *,
    solver: SolverConfig = DEFAULT_SOLVER,
    caches: list[GeodesicCache] | None = None,
) -> FitResult:
    """Fit a mixture of Riemannian normal components to ``data``.

    Expectation-maximization: the expectation step computes component
    responsibilities from log-map tangents; the maximization step moves each
    base point along the steepest-descent direction through the exponential
    map (step scaled by the component's responsibility mass), refreshes the
    normalization constant, descends the covariance with a linesearch, and
    resets the component weight.  Components whose scaled mean direction is
    already below tolerance are left untouched for the iteration.  The mean
    stepsizes adapt by a shared rule: grown when the objective decreased,
    shrunk otherwise.  Stops when the objective change drops to ``nll_tol``.

    ``caches`` optionally supplies one geodesic cache per component (e.g.
    preloaded from disk); they are filled in place, so the caller can persist
    them after the fit.
    """
    start = time.perf_counter()
    config = config if config is not None else FitConfig()
    integrator = integrator if integrator is not None else Integrator()
    X = np.atleast_2d(np.asarray(data, dtype=float))
    n, dim = X.shape
    if dim != metric.dim:
        raise ValidationError(
            f"data dimension {dim} does not match metric dimension {metric.dim}"
        )
    k = config.n_components
    if n < k:
        raise ValidationError("need at least as many data as components")

    components = init_components(X, k, seed=config.seed, knn=config.knn_init)
    if caches is None:
        caches = [GeodesicCache(epsilon=solver.cache_epsilon) for _ in range(k)]
    elif len(caches) != k:
        raise ValidationError(
            f"need one geodesic cache per component, got {len(caches)} for {k}"
        )
    records: list[IntegrationResult] = []
    obs_at_mu: list[ObservationSet] = []
    problems: list[dict] = []
    diagnostics = {
        "mu_exp_failures": 0,
        "skipped_components": 0,
        "failed_log_maps": 0,
        "n_integrations": 0,
    }

    def run_and_log(mu, Sigma, *, reuse, seed, iteration, comp_idx, phase):
        rec = integrator.run(metric, mu, Sigma, reuse=reuse, seed=seed)
        diagnostics["n_integrations"] += 1
        entry = {
            "iteration": iteration,
            "component": comp_idx,
            "phase": phase,
            "mu": np.asarray(mu, dtype=float).tolist(),
            "Sigma": np.asarray(Sigma, dtype=float).tolist(),
            "seed": seed,
        }
        entry.update(rec.to_record())
        problems.append(entry)
        return rec

    # normalization constants for the initial components
    for j, comp in enumerate(components):
        seed_j = _integration_seed(config.seed, 0, j)
        rec = run_and_log(
            comp.mu,
            comp.Sigma,
            reuse=None,
            seed=seed_j,
            iteration=0,
            comp_idx=j,
            phase="init",
        )
        components[j] = replace(comp, norm_const=rec.mean)
        records.append(rec)
        obs_at_mu.append(rec.observations)

    tangents = np.full((n, k, dim), np.nan)
    mask = np.zeros((n, k), dtype=bool)
    for j, comp in enumerate(components):
        t_j, m_j = component_log_maps(metric, X, comp.mu, solver, caches[j])
        if not np.any(m_j):
            raise GeodesicFailure(
                f"component {j}: no datum is reachable by a geodesic from its "
                "base point; the component has collapsed"
            )
        tangents[:, j, :] = t_j
        mask[:, j] = m_j
    diagnostics["failed_log_maps"] += int((~mask).sum())

    resp = responsibilities(components, tangents, mask)
    previous = nll(components, tangents, mask, resp)
    nll_trace = [previous]
    alpha_mu = np.full(k, config.initial_mu_step)
    alpha_sigma: list[float | None] = [None] * k
    iterations: list[dict] = []

    for t in range(1, config.max_iterations + 1):
        resp = responsibilities(components, tangents, mask)
        for j in range(k):
            comp = components[j]
            seed_tj = _integration_seed(config.seed, t, j)
            r_j = resp[:, j]
            mass = float(r_j[mask[:, j]].sum())
            if mass <= 0:
                diagnostics["skipped_components"] += 1
                continue
            direction = mu_direction(
                comp, tangents[:, j, :], mask[:, j], r_j, records[j]
            )
            if np.linalg.norm(direction) / mass < config.mu_gradient_tol:
                diagnostics["skipped_components"] += 1
                continue

            step = (alpha_mu[j] / mass) * direction
            try:
                path = exp_map(metric, comp.mu, step, tol=solver.exp_tol)
            except (SolverFailure, GeodesicFailure):
                diagnostics["mu_exp_failures"] += 1
                continue
            new_mu = path.end

            t_j, m_j = component_log_maps(metric, X, new_mu, solver, caches[j])
            if not np.any(m_j):
                raise GeodesicFailure(
                    f"component {j}: no datum is reachable by a geodesic from "
                    "its updated base point; the component has collapsed"
                )
            diagnostics["failed_log_maps"] += int((~m_j).sum())

            rec = run_and_log(
                new_mu,
                comp.Sigma,
                reuse=None,
                seed=seed_tj,
                iteration=t,
                comp_idx=j,
                phase="post-mu",
            )
            comp = replace(comp, mu=new_mu, norm_const=rec.mean)
            obs = rec.observations

            out = covariance_update(
                comp,
                metric,
                t_j,
                m_j,
                r_j,
                integrator,
                rec,
                observations=obs,
                alpha=alpha_sigma[j],
                seed=seed_tj,
                outer_steps=config.sigma_outer_steps,
                linesearch_max=config.sigma_linesearch_max,
                initial_step=config.sigma_initial_step,
                sufficient_decrease=config.sufficient_decrease,
                contraction=config.contraction,
                optimism=config.sigma_optimism,
            )
            diagnostics["n_integrations"] += out.n_integrations
            for idx, trial in enumerate(out.trials):
                entry = {
                    "iteration": t,
                    "component": j,
                    "phase": f"sigma-trial-{idx}",
                    "mu": comp.mu.tolist(),
                    "Sigma": np.asarray(trial["Sigma"], dtype=float).tolist(),
                    "seed": seed_tj,
                    "alpha": trial["alpha"],
                    "accepted": trial["accepted"],
                }
                entry.update(trial["record"].to_record())
                problems.append(entry)

            comp = replace(
                out.component, weight=float(r_j.mean())
            )
            components[j] = comp
            records[j] = out.record
            obs_at_mu[j] = out.observations
            alpha_sigma[j] = out.alpha
            tangents[:, j, :] = t_j
            mask[:, j] = m_j

        current = nll(components, tangents, mask, resp)
        nll_trace.append(current)
        if current < previous:
            alpha_mu *= config.mu_optimism
        else:
            alpha_mu *= config.mu_pessimism
        iterations.append(
            {
                "iteration": t,
                "nll": current,
                "alpha_mu": alpha_mu.tolist(),
                "alpha_sigma": [a if a is not None else 0.0 for a in alpha_sigma],
                "components": [c.to_record() for c in components],
            }
        )
        converged = abs(current - previous) <= config.nll_tol
        previous = current
        if converged:
            break

    return FitResult(
        components=components,
        responsibilities=resp,
        nll_trace=nll_trace,
        iterations=iterations,
        problems=problems,
        alpha_mu=alpha_mu,
        alpha_sigma=[a if a is not None else 0.0 for a in alpha_sigma],
        diagnostics=diagnostics,
        wall_clock_s=time.perf_counter() - start,
    )
