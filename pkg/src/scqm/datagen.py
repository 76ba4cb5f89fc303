"""Seeded synthetic data: noise samplers, the circle toy and the sphere.

Randomness comes from :class:`numpy.random.Generator` (PCG64).  A dataset
built from an integer seed (or a seed sequence) gives column ``i`` its own
stream, child ``i`` of ``SeedSequence(seed).spawn(n)``; within a column the
clean point is drawn before the noise.  Columns can therefore be generated
in any order or in parallel with identical results.  Passing a
``Generator`` instead uses that single stream for everything.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np


@dataclass
class Dataset:
    """``X`` holds one observation per column (``D x n``)."""

    X: np.ndarray
    X_clean: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim != 2:
            raise ValueError("X must be a (D, n) matrix")
        if self.X_clean is not None:
            self.X_clean = np.asarray(self.X_clean, dtype=float)
            if self.X_clean.shape != self.X.shape:
                raise ValueError("X_clean must have the same shape as X")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("X has non-finite entries")

    @property
    def D(self) -> int:
        return self.X.shape[0]

    @property
    def n(self) -> int:
        return self.X.shape[1]


def _rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def sample_gamma(shape, rng=None, size=None):
    """Gamma(shape, 1) variates.

    Backed by :meth:`numpy.random.Generator.standard_gamma`, which uses the
    Marsaglia-Tsang squeeze for ``shape >= 1`` and the ``U**(1/a)`` boost
    below one.
    """
    if not np.all(np.asarray(shape) > 0):
        raise ValueError("gamma shape must be positive")
    return _rng(rng).standard_gamma(shape, size=size)


def sample_generalized_gaussian(p: float, dim: int, n: int, rng=None, scale: float = 1.0):
    """``dim x n`` i.i.d. draws with density proportional to ``exp(-|t/scale|^p)``."""
    if p < 1:
        raise ValueError("p must be >= 1")
    rng = _rng(rng)
    u = rng.standard_gamma(1.0 / p, size=(dim, n))
    signs = np.where(rng.integers(0, 2, size=(dim, n)) == 1, 1.0, -1.0)
    return scale * signs * u ** (1.0 / p)


def _unit_vectors(dim, n, rng):
    z = rng.standard_normal((dim, n))
    return z / np.linalg.norm(z, axis=0)


def sample_radial_laplace(dim: int, n: int, rng=None, scale: float = 1.0):
    """Isotropic draws with density proportional to ``exp(-||e||_2 / scale)``.

    The radius is Gamma(dim, 1) (the radial density ``r^(dim-1) e^-r``) and the
    direction uniform on the sphere.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    rng = _rng(rng)
    radius = rng.standard_gamma(float(dim), size=n)
    return scale * radius * _unit_vectors(dim, n, rng)


NoiseSpec = Union[None, str, tuple]


def parse_noise(spec) -> tuple:
    """Normalize a noise description.

    Accepts ``None``/``"none"``, ``("gg", p)``, ``"radial_laplace"``,
    ``("gaussian", sigma)`` or strings ``"gg:p=1.5"``, ``"gaussian:sigma=0.1"``,
    each with an optional trailing scale, e.g. ``("gg", 2.0, 0.1)``.
    """
    if spec is None:
        return ("none",)
    if isinstance(spec, str):
        kind, _, rest = spec.partition(":")
        params = dict(item.split("=", 1) for item in rest.split(":") if item)
        kind = kind.strip().lower()
        scale = float(params.pop("scale", 1.0))
        if kind == "none":
            return ("none",)
        if kind == "gg":
            return ("gg", float(params["p"]), scale)
        if kind == "radial_laplace":
            return ("radial_laplace", scale)
        if kind == "gaussian":
            return ("gaussian", float(params["sigma"]))
        raise ValueError(f"unknown noise {spec!r}")
    kind = spec[0]
    if kind == "gg":
        return ("gg", float(spec[1]), float(spec[2]) if len(spec) > 2 else 1.0)
    if kind == "radial_laplace":
        return ("radial_laplace", float(spec[1]) if len(spec) > 1 else 1.0)
    if kind == "gaussian":
        return ("gaussian", float(spec[1]))
    if kind == "none":
        return ("none",)
    raise ValueError(f"unknown noise {spec!r}")


def sample_noise(noise, dim: int, n: int, rng) -> np.ndarray:
    noise = parse_noise(noise)
    kind = noise[0]
    if kind == "none":
        return np.zeros((dim, n))
    if kind == "gg":
        return sample_generalized_gaussian(noise[1], dim, n, rng, scale=noise[2])
    if kind == "radial_laplace":
        return sample_radial_laplace(dim, n, rng, scale=noise[1])
    return noise[1] * rng.standard_normal((dim, n))


def _column_streams(seed, n):
    if isinstance(seed, np.random.Generator):
        return None
    return [np.random.default_rng(ss) for ss in np.random.SeedSequence(seed).spawn(n)]


def _per_column(draw, rng, n, dim):
    """Stack ``draw(generator, count)`` (a ``(dim, count)`` array) over columns."""
    streams = _column_streams(rng, n)
    if streams is None:
        return draw(rng, n)
    out = np.empty((dim, n))
    for i, g in enumerate(streams):
        out[:, i] = draw(g, 1)[:, 0]
    return out


def _seed_meta(rng):
    if isinstance(rng, (int, np.integer)):
        return int(rng)
    if isinstance(rng, (list, tuple)):
        return [int(v) for v in rng]
    return None


def circle_dataset(n: int, noise=None, rng=None, t_range=(0.0, 4.0)) -> Dataset:
    """Points ``(cos t_i, sin t_i)`` at equally spaced ``t_i`` plus noise."""
    if n < 2:
        raise ValueError("circle_dataset needs n >= 2")
    t = np.linspace(t_range[0], t_range[1], n)
    X_clean = np.vstack([np.cos(t), np.sin(t)])
    X = X_clean + _per_column(lambda g, k: sample_noise(noise, 2, k, g), rng, n, 2)
    meta = {
        "generator": "circle",
        "n": n,
        "noise": list(parse_noise(noise)),
        "t_range": [float(t_range[0]), float(t_range[1])],
        "seed": _seed_meta(rng),
    }
    return Dataset(X, X_clean, meta)


def sphere_dataset(n: int, sigma: float, rng=None) -> Dataset:
    """``n`` uniform points on the unit sphere in R^3 plus N(0, sigma^2 I) noise."""
    if n < 4:
        raise ValueError("sphere_dataset needs n >= 4")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")

    def draw(g, k):
        clean = _unit_vectors(3, k, g)
        return np.vstack([clean, clean + sigma * g.standard_normal((3, k))])

    both = _per_column(draw, rng, n, 6)
    X_clean, X = both[:3], both[3:]
    meta = {
        "generator": "sphere",
        "n": n,
        "sigma": float(sigma),
        "seed": _seed_meta(rng),
    }
    return Dataset(X, X_clean, meta)


def noise_dataset(noise, dim: int, n: int, rng=None) -> Dataset:
    """Pure noise samples, e.g. for checking a sampler from the command line."""
    X = _per_column(lambda g, k: sample_noise(noise, dim, k, g), rng, n, dim)
    meta = {
        "generator": "noise",
        "noise": list(parse_noise(noise)),
        "dim": dim,
        "n": n,
        "seed": _seed_meta(rng),
    }
    return Dataset(X, None, meta)
