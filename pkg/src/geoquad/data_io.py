"""Synthetic dataset generators, high-dimensional embedding, and file I/O.

Generators are pure functions of their parameters and seed.  Shapes:

- ``circle``: unit ring plus isotropic Gaussian noise.
- ``curly``: an open three-quarter arc of the unit ring (a curled hook with
  the gap on the positive-x side) plus noise.  The exact parametric form of
  this dataset is not published; this arc is a qualitative stand-in and the
  choice is documented here.
- ``two-circles``: two concentric rings of radii 0.5 and 1.0, points split
  evenly, plus noise.  Same caveat as ``curly``.

Points files are delimited text: optional ``#`` comment lines (the first one
carries a JSON provenance header when written by :func:`save_points`),
followed by one whitespace- or comma-separated numeric row per point.
Mixture-component files are JSON lines with ``weight`` (scalar), ``mean``
(vector), and ``variance`` (vector) per record.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError

__all__ = [
    "embed_high_dim",
    "gen_circle",
    "gen_curly",
    "gen_two_circles",
    "generate_dataset",
    "load_mixture_components",
    "load_points",
    "random_orthonormal",
    "save_mixture_components",
    "save_points",
]


def _check_gen_args(n: int, noise: float) -> None:
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ValidationError(f"n must be a positive integer, got {n!r}")
    if not (np.isfinite(noise) and noise >= 0):
        raise ValidationError(f"noise must be non-negative, got {noise!r}")


def gen_circle(n: int, noise: float, seed: int) -> np.ndarray:
    """Unit ring with isotropic Gaussian noise of scale ``noise``."""
    _check_gen_args(n, noise)
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    pts = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    return pts + noise * rng.standard_normal((n, 2))


def gen_curly(n: int, noise: float, seed: int) -> np.ndarray:
    """Open three-quarter arc of the unit ring (gap on the positive-x side)
    with isotropic Gaussian noise."""
    _check_gen_args(n, noise)
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0.4 * np.pi, 1.6 * np.pi, size=n)
    pts = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    return pts + noise * rng.standard_normal((n, 2))


def gen_two_circles(n: int, noise: float, seed: int) -> np.ndarray:
    """Two concentric rings (radii 0.5 and 1.0), points split evenly, with
    isotropic Gaussian noise."""
    _check_gen_args(n, noise)
    rng = np.random.default_rng(seed)
    n_inner = n // 2
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    radius = np.where(np.arange(n) < n_inner, 0.5, 1.0)
    pts = radius[:, None] * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    return pts + noise * rng.standard_normal((n, 2))


_GENERATORS = {
    "circle": gen_circle,
    "curly": gen_curly,
    "two-circles": gen_two_circles,
}


def random_orthonormal(rows: int, cols: int, seed: int) -> np.ndarray:
    """Seeded random matrix with orthonormal columns (QR of a Gaussian)."""
    if rows < cols:
        raise ValidationError(
            f"need at least {cols} rows for {cols} orthonormal columns"
        )
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    # fix signs so the result is a deterministic function of the seed
    return q * np.sign(np.diag(r))[None, :]


def embed_high_dim(
    data: np.ndarray, d: int, noise_var: float, seed: int
) -> np.ndarray:
    """Embed low-dimensional data into ``d`` dimensions.

    Projects through a seeded random orthonormal matrix, adds independent
    Gaussian noise of variance ``noise_var`` per coordinate, then
    standardizes each output column to mean 0 and standard deviation 1.
    """
    X = np.atleast_2d(np.asarray(data, dtype=float))
    base_dim = X.shape[1]
    if d < max(2, base_dim):
        raise ValidationError(
            f"target dimension must be at least {max(2, base_dim)}, got {d}"
        )
    if not (np.isfinite(noise_var) and noise_var >= 0):
        raise ValidationError(f"noise_var must be non-negative, got {noise_var!r}")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((d, base_dim)))
    q = q * np.sign(np.diag(r))[None, :]
    out = X @ q.T
    if noise_var > 0:
        out = out + np.sqrt(noise_var) * rng.standard_normal(out.shape)
    out = out - out.mean(axis=0)
    std = out.std(axis=0)
    if np.any(std == 0):
        raise ValidationError("embedding produced a constant column")
    return out / std


def generate_dataset(
    name: str,
    n: int,
    noise: float,
    seed: int,
    embed_dim: int | None = None,
    embed_noise_var: float = 0.01,
) -> np.ndarray:
    """Generate a named dataset, optionally embedded into ``embed_dim``."""
    if name not in _GENERATORS:
        raise ValidationError(
            f"unknown dataset {name!r}; available: {sorted(_GENERATORS)}"
        )
    pts = _GENERATORS[name](n, noise, seed)
    if embed_dim is not None:
        pts = embed_high_dim(pts, embed_dim, embed_noise_var, seed)
    return pts


# ---------------------------------------------------------------------------
# points files


def save_points(path, points: np.ndarray, meta: dict | None = None) -> None:
    """Write points as delimited text with an optional JSON header comment."""
    X = np.atleast_2d(np.asarray(points, dtype=float))
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        if meta is not None:
            fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        for row in X:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def load_points(path) -> np.ndarray:
    """Read a delimited numeric points file.

    ``#`` lines and blank lines are ignored; rows may be separated by
    whitespace or commas.  Malformed or ragged rows raise :class:`ParseError`
    with their 1-based line number.
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"points file does not exist: {path}")
    rows: list[list[float]] = []
    width: int | None = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.replace(",", " ").split()
            try:
                row = [float(tok) for tok in tokens]
            except ValueError as exc:
                raise ParseError(f"non-numeric value in {path.name}", lineno) from exc
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ParseError(
                    f"row has {len(row)} columns, expected {width}", lineno
                )
            rows.append(row)
    if not rows:
        raise ValidationError(f"points file contains no data rows: {path}")
    return np.array(rows, dtype=float)


# ---------------------------------------------------------------------------
# mixture component files


def save_mixture_components(path, components: list[dict]) -> None:
    """Write mixture components as JSON lines (weight, mean, variance)."""
    with open(Path(path), "w", encoding="utf-8") as fh:
        for comp in components:
            record = {
                "weight": float(comp["weight"]),
                "mean": np.asarray(comp["mean"], dtype=float).tolist(),
                "variance": np.asarray(comp["variance"], dtype=float).tolist(),
            }
            fh.write(json.dumps(record) + "\n")


def load_mixture_components(path) -> list[dict]:
    """Read a mixture-component file: one JSON record per line with keys
    ``weight``, ``mean``, ``variance``.  Dimensions must agree across
    components; errors carry the 1-based line number."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"mixture component file does not exist: {path}")
    components: list[dict] = []
    dim: int | None = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError("invalid JSON record", lineno) from exc
            for key in ("weight", "mean", "variance"):
                if key not in record:
                    raise ParseError(f"missing key {key!r}", lineno)
            mean = np.asarray(record["mean"], dtype=float)
            variance = np.asarray(record["variance"], dtype=float)
            if mean.ndim != 1 or variance.shape != mean.shape:
                raise ParseError(
                    "mean and variance must be vectors of equal length", lineno
                )
            if dim is None:
                dim = mean.size
            elif mean.size != dim:
                raise ParseError(
                    f"component has dimension {mean.size}, expected {dim}", lineno
                )
            components.append(
                {
                    "weight": float(record["weight"]),
                    "mean": mean,
                    "variance": variance,
                }
            )
    if not components:
        raise ValidationError(f"mixture component file is empty: {path}")
    return components
