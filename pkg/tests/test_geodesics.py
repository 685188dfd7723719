import numpy as np
import pytest

from geoquad.errors import GeodesicFailure, ValidationError
from geoquad.geodesics import (
    GeodesicCache,
    SolverConfig,
    exp_map,
    fixed_point_geodesic,
    log_map,
)
from geoquad.metrics import EuclideanMetric, KernelMetric, curve_length

from conftest import ring


@pytest.fixture(scope="module")
def mild_metric():
    # mildly curved ring manifold: fast, well-conditioned solves for unit tests
    return KernelMetric(data=ring(60, 0.05, seed=17), sigma=0.25, rho=0.05)


@pytest.fixture(scope="module")
def euclid():
    return EuclideanMetric(dim=2)


# ---------------------------------------------------------------------------
# Exponential map


def test_exp_map_euclidean_is_straight(euclid):
    mu = np.array([0.5, -0.25])
    v = np.array([1.0, 2.0])
    sol = exp_map(euclid, mu, v)
    assert sol.converged
    assert np.allclose(sol.end, mu + v, atol=1e-9)
    assert np.allclose(sol.initial_velocity, v)
    ts = np.linspace(0, 1, 7)
    assert np.allclose(sol.curve(ts), mu + np.outer(ts, v), atol=1e-9)


def test_exp_map_tolerance_refinement(mild_metric):
    mu = np.array([1.0, 0.05])
    v = np.array([-0.6, 0.8])
    end_default = exp_map(mild_metric, mu, v, tol=1e-3).end
    end_tight = exp_map(mild_metric, mu, v, tol=5e-4).end
    assert np.linalg.norm(end_default - end_tight) < 1e-2


def test_exp_map_constant_speed_drift(mild_metric):
    mu = np.array([0.95, 0.1])
    v = np.array([0.4, 0.7])
    sol = exp_map(mild_metric, mu, v, tol=1e-8)
    ts = np.linspace(0.0, 1.0, 50)
    gam = sol.curve(ts)
    dot = sol.velocity(ts)
    diag, _ = mild_metric.diag_fields(gam)
    speed_sq = np.einsum("md,md->m", diag * dot, dot)
    drift = (speed_sq.max() - speed_sq.min()) / speed_sq.mean()
    assert drift < 1e-3


def test_exp_map_scaling_consistency(mild_metric):
    # evaluating the dense curve at beta matches re-solving with velocity beta*v
    mu = np.array([0.9, 0.2])
    v = np.array([0.5, 0.5])
    sol = exp_map(mild_metric, mu, v)
    for beta in (0.25, 0.5, 0.75):
        direct = exp_map(mild_metric, mu, beta * v).end
        assert np.linalg.norm(sol.curve(beta) - direct) < 5e-3


def test_exp_map_length_energy(mild_metric):
    mu = np.array([1.0, 0.0])
    v = np.array([0.0, 0.9])
    sol = exp_map(mild_metric, mu, v)
    assert sol.length > 0
    assert sol.length**2 <= 2.0 * sol.energy * (1 + 1e-6)
    ts = np.linspace(0, 1, 201)
    manual = curve_length(mild_metric, ts, sol.curve(ts), sol.velocity(ts))
    assert sol.length == pytest.approx(manual, rel=1e-6)


def test_exp_map_validation(euclid):
    with pytest.raises(ValidationError):
        exp_map(euclid, np.array([0.0, 0.0, 0.0]), np.array([1.0, 0.0]))
    with pytest.raises(ValidationError):
        exp_map(euclid, np.array([0.0, np.nan]), np.array([1.0, 0.0]))


# ---------------------------------------------------------------------------
# Fixed-point pre-solver


def test_fixed_point_euclidean_immediate(euclid):
    fp = fixed_point_geodesic(euclid, np.zeros(2), np.array([1.0, 1.0]))
    assert fp.converged
    assert fp.iterations == 0
    assert fp.residual == pytest.approx(0.0, abs=1e-12)
    ts = np.linspace(0, 1, 5)
    assert np.allclose(fp.curve(ts), np.outer(ts, [1.0, 1.0]), atol=1e-12)


def test_fixed_point_on_curved_metric(mild_metric):
    fp = fixed_point_geodesic(mild_metric, np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    assert fp.converged
    assert fp.residual <= 0.1


# ---------------------------------------------------------------------------
# Logarithmic map


def test_log_map_euclidean_exact(euclid):
    mu = np.array([0.25, 0.5])
    x = np.array([-1.0, 2.0])
    sol = log_map(euclid, mu, x)
    assert sol.converged
    assert np.allclose(sol.initial_velocity, x - mu, atol=1e-9)
    assert np.allclose(sol.end, x, atol=1e-9)


def test_log_map_trivial_same_point(euclid):
    mu = np.array([0.3, 0.3])
    sol = log_map(euclid, mu, mu)
    assert sol.converged
    assert np.array_equal(sol.initial_velocity, np.zeros(2))
    assert sol.length == 0.0


def test_round_trip_mild_metric(mild_metric):
    rng = np.random.default_rng(4)
    mu = np.array([1.0, 0.0])
    for _ in range(3):
        v = rng.standard_normal(2) * 0.5
        fwd = exp_map(mild_metric, mu, v)
        back = log_map(mild_metric, mu, fwd.end)
        assert back.converged
        rel = np.linalg.norm(back.initial_velocity - v) / np.linalg.norm(v)
        assert rel < 1e-2


def test_log_map_constant_speed(mild_metric):
    sol = log_map(mild_metric, np.array([1.0, 0.0]), np.array([-0.2, 0.9]))
    ts = np.linspace(0, 1, 50)
    gam = sol.curve(ts)
    dot = sol.velocity(ts)
    diag, _ = mild_metric.diag_fields(gam)
    speeds = np.sqrt(np.einsum("md,md->m", diag * dot, dot))
    assert speeds.std() / speeds.mean() < 1e-2


def test_log_map_pre_solver_failure_aborts(mild_metric):
    cfg = SolverConfig(fp_max_iter=1, fp_tol=1e-12)
    with pytest.raises(GeodesicFailure):
        log_map(mild_metric, np.array([1.0, 0.0]), np.array([-1.0, 0.0]), config=cfg)


def test_log_map_collocation_failure_returns_presolver(mild_metric):
    # max_nodes below the seed mesh size forces the collocation stage to fail
    cfg = SolverConfig(bvp_max_nodes=5)
    sol = log_map(mild_metric, np.array([1.0, 0.0]), np.array([0.0, 1.0]), config=cfg)
    assert not sol.converged
    assert sol.solver == "fixed-point"
    assert np.allclose(sol.end, [0.0, 1.0], atol=1e-9)


# ---------------------------------------------------------------------------
# Geodesic cache


def test_cache_radius_semantics(mild_metric):
    cache = GeodesicCache()
    mu = np.array([1.0, 0.0])
    x = np.array([0.0, 1.0])
    sol = log_map(mild_metric, mu, x, cache=cache)
    assert sol.converged
    assert cache.lookup(x, mu) is not None
    assert cache.lookup(x, mu + np.array([0.4, 0.0])) is not None
    assert cache.lookup(x, mu + np.array([0.6, 0.0])) is None
    assert cache.lookup(x + np.array([1e-9, 0.0]), mu) is None  # keyed by exact bytes


def test_cache_insert_idempotent(mild_metric):
    cache = GeodesicCache()
    mu = np.array([1.0, 0.0])
    x = np.array([0.0, 1.0])
    sol = log_map(mild_metric, mu, x, cache=cache)
    cache.insert(x, mu, sol)
    cache.insert(x, mu, sol)
    assert cache.n_entries == 1


def test_cache_seeded_agrees_with_cold(mild_metric):
    cache = GeodesicCache()
    x = np.array([0.0, 1.0])
    mu0 = np.array([1.0, 0.0])
    mu1 = mu0 + np.array([0.05, 0.05])
    log_map(mild_metric, mu0, x, cache=cache)
    seeded = log_map(mild_metric, mu1, x, cache=cache)
    cold = log_map(mild_metric, mu1, x)
    assert seeded.converged and cold.converged
    rel = np.linalg.norm(seeded.initial_velocity - cold.initial_velocity)
    rel /= np.linalg.norm(cold.initial_velocity)
    assert rel < 1e-2


def test_cache_persistence_round_trip(tmp_path, mild_metric):
    cache = GeodesicCache()
    mu = np.array([1.0, 0.0])
    for x in (np.array([0.0, 1.0]), np.array([-0.8, 0.3])):
        log_map(mild_metric, mu, x, cache=cache)
    path = tmp_path / "geodesics.jsonl"
    cache.save(path)
    fresh = GeodesicCache.load(path)
    assert fresh.n_entries == cache.n_entries
    seed = fresh.lookup(np.array([0.0, 1.0]), mu)
    assert seed is not None
    sol = log_map(mild_metric, mu + np.array([0.01, 0.0]), np.array([0.0, 1.0]),
                  cache=fresh)
    assert sol.converged
