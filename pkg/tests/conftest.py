import os

import hypothesis
import numpy as np
import pytest

hypothesis.settings.register_profile(
    "default", max_examples=50, deadline=None, derandomize=True
)
hypothesis.settings.register_profile(
    "fast", max_examples=10, deadline=None, derandomize=True
)
hypothesis.settings.register_profile("thorough", max_examples=300, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def ring(n: int, noise: float, seed: int) -> np.ndarray:
    """Noisy unit ring; local helper so early tests don't depend on data_io."""
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    pts = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    return pts + noise * rng.standard_normal((n, 2))


@pytest.fixture(scope="session")
def ring_points() -> np.ndarray:
    return ring(200, 0.05, seed=7)


@pytest.fixture(scope="session")
def polar_grid_moments():
    """Dense polar-grid quadrature of the Gaussian-weighted volume element.

    Returns a callable (metric, mu, Sigma, ...) -> (scalar, vector, matrix)
    giving E_pi[g], E_pi[v g], and E_pi[v v^T g] with one solved geodesic ray
    per direction and radial reads off the dense interpolant. Serves as an
    integration oracle independent of the Monte Carlo and quadrature code.
    """
    import math

    from scipy.integrate import simpson
    from scipy.stats import chi2

    from geoquad.geodesics import exp_map

    def compute(metric, mu, Sigma, p=0.9999, n_dirs=200, n_radial=200,
                exp_tol=1e-4):
        dim = len(mu)
        precision = np.linalg.inv(Sigma)
        z = math.sqrt((2 * math.pi) ** dim * np.linalg.det(Sigma))
        q = chi2.ppf(p, df=dim)
        thetas = 2 * np.pi * np.arange(n_dirs) / n_dirs
        w_theta = 2 * np.pi / n_dirs
        scalar = 0.0
        vector = np.zeros(dim)
        matrix = np.zeros((dim, dim))
        for th in thetas:
            d = np.array([math.cos(th), math.sin(th)])
            radius = math.sqrt(q / float(d @ precision @ d))
            sol = exp_map(metric, mu, radius * d, tol=exp_tol)
            assert sol.converged
            r = np.linspace(0.0, radius, n_radial)
            pts = np.vstack([sol.curve(t) for t in r / radius])
            g = metric.volume_elements(pts)
            pi = np.exp(-0.5 * r**2 * float(d @ precision @ d)) / z
            scalar += w_theta * simpson(g * pi * r, x=r)
            vector += w_theta * d * simpson(g * pi * r**2, x=r)
            matrix += w_theta * np.outer(d, d) * simpson(g * pi * r**3, x=r)
        return scalar, vector, matrix

    return compute
