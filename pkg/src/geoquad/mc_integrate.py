"""Monte Carlo baseline estimators for tangent-space Gaussian integrals.

The scalar normalization constant is ``Z * E[g(v)]`` with ``v ~ N(0, Sigma)``
and ``Z = sqrt((2*pi)^D |Sigma|)``; the vector and matrix moments weight the
same integrand by ``v`` and ``v v^T`` (reported without the ``Z`` factor).
Each draw costs one exponential-map solve; failed geodesics are dropped and
counted rather than zero-imputed, and an estimate aborts when more than half
of the draws fail.

Large seeded pools double as ground truth: every sample is stored with its
tangent vector, integrand value, and measured runtime, so benchmark runs can
later subsample a matched wall-clock budget without re-solving geodesics.
Pools persist as ``.npz`` files keyed by the problem id.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bq import GaussianMeasure, _problem_id
from .errors import SolverFailure, UnreliableEstimateError, ValidationError
from .geodesics import exp_map
from .metrics import Metric

__all__ = [
    "McEstimate",
    "GroundTruthPool",
    "mc_normalization",
    "mc_vector",
    "mc_matrix",
    "build_ground_truth_pool",
    "pool_estimate",
    "mc_subsample",
    "save_pool",
    "load_pool",
]


@dataclass
class GroundTruthPool:
    """Successful Monte Carlo samples of one integration problem.

    ``draws`` holds the tangent vectors whose geodesics solved, ``g_values``
    the integrand there, and ``runtimes_ms`` the measured per-sample cost
    (used to convert wall-clock budgets into sample counts)."""

    draws: np.ndarray
    g_values: np.ndarray
    runtimes_ms: np.ndarray
    n_failures: int
    sigma: np.ndarray
    problem_id: str = ""
    seed: int | None = None

    @property
    def size(self) -> int:
        return int(self.g_values.shape[0])


@dataclass
class McEstimate:
    """A Monte Carlo estimate plus its per-sample cache for reuse."""

    value: float | np.ndarray
    standard_error: float | np.ndarray
    sample_count: int
    wall_clock_s: float
    cache: GroundTruthPool
    n_failures: int


def _eval_chunk(
    metric: Metric, mu: np.ndarray, V: np.ndarray, exp_tol: float
) -> tuple[np.ndarray, np.ndarray]:
    """Integrand values for a chunk of tangent draws; NaN marks failure."""
    g = np.full(V.shape[0], np.nan)
    rt = np.zeros(V.shape[0])
    for i, v in enumerate(V):
        t0 = time.perf_counter()
        try:
            if float(np.linalg.norm(v)) == 0.0:
                x_end = np.asarray(mu, dtype=float)
            else:
                x_end = np.asarray(exp_map(metric, mu, v, tol=exp_tol).curve(1.0))
            val = float(metric.volume_elements(x_end[None, :])[0])
            if np.isfinite(val) and val > 0.0:
                g[i] = val
        except (SolverFailure, ValidationError, FloatingPointError):
            pass
        rt[i] = (time.perf_counter() - t0) * 1000.0
    return g, rt


def _collect(
    metric: Metric,
    mu: np.ndarray,
    Sigma: np.ndarray,
    S: int,
    seed: int,
    *,
    workers: int = 1,
    exp_tol: float = 1e-3,
) -> GroundTruthPool:
    if S < 1:
        raise ValidationError("sample count must be at least 1")
    measure = GaussianMeasure(Sigma)
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (measure.dim,):
        raise ValidationError("mu must match the covariance dimension")
    rng = np.random.default_rng(seed)
    V = measure.sample(rng, S)
    if workers <= 1 or S < 2 * workers:
        g, rt = _eval_chunk(metric, mu, V, exp_tol)
    else:
        chunks = np.array_split(V, workers)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_eval_chunk, metric, mu, chunk, exp_tol)
                for chunk in chunks
            ]
            parts = [f.result() for f in futures]
        g = np.concatenate([p[0] for p in parts])
        rt = np.concatenate([p[1] for p in parts])
    ok = np.isfinite(g)
    n_fail = int(S - ok.sum())
    if ok.sum() == 0 or n_fail * 2 > S:
        raise UnreliableEstimateError(
            f"{n_fail} of {S} integrand evaluations failed; estimate unreliable"
        )
    return GroundTruthPool(
        draws=V[ok],
        g_values=g[ok],
        runtimes_ms=rt[ok],
        n_failures=n_fail,
        sigma=np.asarray(Sigma, dtype=float),
        seed=seed,
    )


def _scalar_from(pool: GroundTruthPool, wall_clock_s: float) -> McEstimate:
    Z = GaussianMeasure(pool.sigma).normalization
    g = pool.g_values
    n = g.shape[0]
    se = Z * float(np.std(g, ddof=1)) / math.sqrt(n) if n > 1 else 0.0
    return McEstimate(
        value=Z * float(np.mean(g)),
        standard_error=se,
        sample_count=n,
        wall_clock_s=wall_clock_s,
        cache=pool,
        n_failures=pool.n_failures,
    )


def mc_normalization(
    metric: Metric,
    mu: np.ndarray,
    Sigma: np.ndarray,
    S: int,
    seed: int,
    *,
    cache: GroundTruthPool | None = None,
    workers: int = 1,
    exp_tol: float = 1e-3,
) -> McEstimate:
    """Naive Monte Carlo estimate of the normalization constant Z * E[g]."""
    t0 = time.perf_counter()
    pool = cache or _collect(
        metric, mu, Sigma, S, seed, workers=workers, exp_tol=exp_tol
    )
    return _scalar_from(pool, time.perf_counter() - t0)


def mc_vector(
    metric: Metric,
    mu: np.ndarray,
    Sigma: np.ndarray,
    S: int,
    seed: int,
    *,
    cache: GroundTruthPool | None = None,
    workers: int = 1,
    exp_tol: float = 1e-3,
) -> McEstimate:
    """Monte Carlo estimate of E[v g(v)] (without the Gaussian constant)."""
    t0 = time.perf_counter()
    pool = cache or _collect(
        metric, mu, Sigma, S, seed, workers=workers, exp_tol=exp_tol
    )
    terms = pool.draws * pool.g_values[:, None]
    n = terms.shape[0]
    se = np.std(terms, axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(
        terms[0]
    )
    return McEstimate(
        value=terms.mean(axis=0),
        standard_error=se,
        sample_count=n,
        wall_clock_s=time.perf_counter() - t0,
        cache=pool,
        n_failures=pool.n_failures,
    )


def mc_matrix(
    metric: Metric,
    mu: np.ndarray,
    Sigma: np.ndarray,
    S: int,
    seed: int,
    *,
    cache: GroundTruthPool | None = None,
    workers: int = 1,
    exp_tol: float = 1e-3,
) -> McEstimate:
    """Monte Carlo estimate of E[v v^T g(v)] (without the Gaussian constant)."""
    t0 = time.perf_counter()
    pool = cache or _collect(
        metric, mu, Sigma, S, seed, workers=workers, exp_tol=exp_tol
    )
    V, g = pool.draws, pool.g_values
    terms = V[:, :, None] * V[:, None, :] * g[:, None, None]
    n = terms.shape[0]
    se = np.std(terms, axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(
        terms[0]
    )
    return McEstimate(
        value=terms.mean(axis=0),
        standard_error=se,
        sample_count=n,
        wall_clock_s=time.perf_counter() - t0,
        cache=pool,
        n_failures=pool.n_failures,
    )


# ---------------------------------------------------------------------------
# Ground-truth pools


def build_ground_truth_pool(
    metric: Metric,
    mu: np.ndarray,
    Sigma: np.ndarray,
    S: int,
    seed: int,
    *,
    workers: int = 1,
    exp_tol: float = 1e-3,
) -> GroundTruthPool:
    """Collect a reusable seeded sample pool tagged with its problem id."""
    pool = _collect(metric, mu, Sigma, S, seed, workers=workers, exp_tol=exp_tol)
    pool.problem_id = _problem_id(
        metric, np.asarray(mu, dtype=float), np.asarray(Sigma, dtype=float)
    )
    return pool


def pool_estimate(pool: GroundTruthPool) -> McEstimate:
    """Scalar estimate from every sample in the pool."""
    return _scalar_from(pool, float(np.sum(pool.runtimes_ms)) / 1000.0)


def mc_subsample(
    pool: GroundTruthPool,
    *,
    count: int | None = None,
    runtime_budget_s: float | None = None,
    seed: int = 0,
) -> McEstimate:
    """Estimate from a without-replacement subsample of a ground-truth pool.

    In runtime mode the sample count is the budget divided by the pool's mean
    per-sample runtime (rounded down).  The reported wall-clock is the sum of
    the selected samples' recorded runtimes, i.e. what the subsample would
    have cost to evaluate directly.
    """
    if (count is None) == (runtime_budget_s is None):
        raise ValidationError("specify exactly one of count or runtime_budget_s")
    n = pool.size
    if runtime_budget_s is not None:
        if not runtime_budget_s > 0:
            raise ValidationError("runtime budget must be positive")
        mean_rt_s = float(np.mean(pool.runtimes_ms)) / 1000.0
        if mean_rt_s <= 0:
            raise ValidationError("pool has no recorded runtimes")
        # tiny slack absorbs the float round-trip when the budget was itself
        # computed as a multiple of the mean runtime
        count = int(math.floor(runtime_budget_s / mean_rt_s + 1e-9))
    if count < 1:
        raise ValidationError(
            "requested subsample is empty (budget below one sample's runtime)"
        )
    if count > n:
        raise ValidationError(f"requested {count} samples but the pool holds {n}")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=count, replace=False))
    sub = GroundTruthPool(
        draws=pool.draws[idx],
        g_values=pool.g_values[idx],
        runtimes_ms=pool.runtimes_ms[idx],
        n_failures=0,
        sigma=pool.sigma,
        problem_id=pool.problem_id,
        seed=seed,
    )
    est = _scalar_from(sub, float(np.sum(sub.runtimes_ms)) / 1000.0)
    est.n_failures = pool.n_failures
    return est


def _pool_path(directory, problem_id: str) -> Path:
    return Path(directory) / f"{problem_id}.npz"


def save_pool(pool: GroundTruthPool, directory) -> Path:
    """Persist a pool as an .npz record file named by its problem id."""
    if not pool.problem_id:
        raise ValidationError("pool has no problem id; build it from a problem")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = _pool_path(directory, pool.problem_id)
    np.savez(
        path,
        draws=pool.draws,
        g_values=pool.g_values,
        runtimes_ms=pool.runtimes_ms,
        n_failures=np.array(pool.n_failures),
        sigma=pool.sigma,
        problem_id=np.array(pool.problem_id),
        seed=np.array(-1 if pool.seed is None else pool.seed),
    )
    return path


def load_pool(directory, problem_id: str) -> GroundTruthPool:
    path = _pool_path(directory, problem_id)
    if not path.exists():
        raise ValidationError(
            f"no ground-truth pool for problem {problem_id} in {directory}; "
            "generate one with the benchmark command's truth stage"
        )
    with np.load(path) as data:
        seed = int(data["seed"])
        return GroundTruthPool(
            draws=data["draws"],
            g_values=data["g_values"],
            runtimes_ms=data["runtimes_ms"],
            n_failures=int(data["n_failures"]),
            sigma=data["sigma"],
            problem_id=str(data["problem_id"]),
            seed=None if seed < 0 else seed,
        )
