"""Local-fit manifold denoising, the sphere benchmark and latent decoding."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .datagen import Dataset, circle_dataset, sphere_dataset
from .losses import LossSpec, format_loss, parse_loss
from .optimizer import FitConfig, fit, fit_batch
from .projection import project_batch
from .quadmap import QuadraticModel, evaluate

GRID_LIMIT = 10**6


@dataclass(frozen=True)
class DenoiseConfig:
    K: int = 30
    d: int = 2
    s: int = 1
    loss: LossSpec = field(default_factory=lambda: LossSpec("l2sq"))
    linear_ablation: bool = False
    fit: FitConfig = FitConfig()
    # Optional separate settings for the per-point projection.
    project: Optional[FitConfig] = None

    def __post_init__(self):
        if self.K < self.d + self.s + 1:
            raise ValueError(f"K={self.K} is below d+s+1={self.d + self.s + 1}")
        if self.K < 2 * (self.d + self.s):
            warnings.warn(f"K={self.K} is small for d+s={self.d + self.s}")


def neighborhoods(X, K: int) -> np.ndarray:
    """``(n, K)`` neighbor indices of every column; each row starts with itself.

    Ties are broken by the smaller index.
    """
    X = np.asarray(getattr(X, "X", X), dtype=float)
    n = X.shape[1]
    if K > n:
        raise ValueError(f"K={K} exceeds the number of samples n={n}")
    if K < 1:
        raise ValueError("K must be >= 1")
    G = X.T @ X
    sq = np.diag(G)
    dist = np.maximum(sq[:, None] + sq[None, :] - 2 * G, 0.0)
    np.fill_diagonal(dist, -1.0)
    return np.argsort(dist, axis=1, kind="stable")[:, :K]


def knn(X, i: int, K: int) -> np.ndarray:
    """Indices of the ``K`` nearest columns to column ``i`` (``i`` included)."""
    X = np.asarray(getattr(X, "X", X), dtype=float)
    n = X.shape[1]
    if K > n:
        raise ValueError(f"K={K} exceeds the number of samples n={n}")
    dist = ((X - X[:, [i]]) ** 2).sum(axis=0)
    dist[i] = -1.0
    return np.argsort(dist, kind="stable")[:K]


@dataclass
class DenoiseResult:
    X_hat: np.ndarray
    failed: np.ndarray
    fit_converged: np.ndarray
    project_converged: np.ndarray

    @property
    def diagnostics(self) -> dict:
        return {
            "n": int(self.X_hat.shape[1]),
            "n_failed": int(self.failed.sum()),
            "failed": np.flatnonzero(self.failed).tolist(),
            "n_fit_converged": int(self.fit_converged.sum()),
            "n_project_converged": int(self.project_converged.sum()),
        }


def denoise(X, cfg: DenoiseConfig = DenoiseConfig(), *, threads: int = 1) -> DenoiseResult:
    """Refine every point by fitting a local model on its ``K`` neighbors and
    projecting the point onto it under the same loss.

    Points whose local fit fails are passed through unchanged and flagged.
    """
    X = np.asarray(getattr(X, "X", X), dtype=float)
    D, n = X.shape
    if cfg.K > n:
        raise ValueError(f"K={cfg.K} exceeds n={n}")
    nbrs = neighborhoods(X, cfg.K)
    local = X.T[nbrs]
    res = fit_batch(
        local, cfg.d, cfg.s, cfg.loss, cfg.fit,
        freeze_theta=cfg.linear_ablation, threads=threads,
    )
    ok = ~res.diverged
    pcfg = cfg.project or cfg.fit
    _, y_hat, pconv, _ = project_batch(res.c, res.Q, res.Theta, cfg.d, X.T, cfg.loss, pcfg)
    bad = ~ok | ~np.all(np.isfinite(y_hat), axis=1)
    X_hat = np.where(bad[:, None], X.T, y_hat).T
    return DenoiseResult(X_hat, bad, res.converged & ok, pconv & ~bad)


def mse(X_hat, X_clean) -> float:
    """Mean over columns of the squared Euclidean error."""
    if X_clean is None:
        raise ValueError("mse needs ground truth")
    X_hat = np.asarray(X_hat, dtype=float)
    X_clean = np.asarray(X_clean, dtype=float)
    if X_hat.shape != X_clean.shape:
        raise ValueError(f"shape mismatch {X_hat.shape} vs {X_clean.shape}")
    return float(((X_hat - X_clean) ** 2).sum(axis=0).mean())


# --------------------------------------------------------------------------
# sphere benchmark


@dataclass
class Cell:
    mse: float
    mse_per_seed: list
    n_samples: int
    n_failed: int


@dataclass
class BenchReport:
    sigmas: list
    losses: list
    variants: list
    seeds: list
    cells: dict = field(default_factory=dict)
    # long format rows: (sigma, loss, variant, seed, index, squared_error)
    errors: list = field(default_factory=list)

    def cell(self, sigma, loss, variant) -> Cell:
        key = loss if isinstance(loss, str) else format_loss(loss)
        return self.cells[(float(sigma), key, variant)]

    def table(self):
        """Header plus one row per sigma, columns ``loss|variant``."""
        cols = [(loss, v) for v in self.variants for loss in self.losses]
        header = ["sigma"] + [f"{loss}|{v}" for loss, v in cols]
        rows = [
            [sigma] + [self.cells[(sigma, loss, v)].mse for loss, v in cols]
            for sigma in self.sigmas
        ]
        return header, rows


def _data_seed(seed: int, sigma: float):
    return [int(seed), int(round(sigma * 1_000_000))]


def benchmark_sphere(
    sigmas: Sequence[float],
    losses: Sequence,
    variants: Sequence[str] = ("quadratic", "linear"),
    n: int = 300,
    K: int = 30,
    d: int = 2,
    s: int = 1,
    seeds: Sequence[int] = (1, 2, 3),
    fit_cfg: FitConfig = FitConfig(),
    project_cfg: Optional[FitConfig] = None,
    threads: int = 1,
) -> BenchReport:
    """Denoising MSE over a grid of noise levels, losses and model variants.

    For each ``(sigma, seed)`` one noisy sphere sample is drawn and shared by
    every loss and variant; cell values average the per-seed MSE.
    """
    if not sigmas or not losses or not variants or not seeds:
        raise ValueError("benchmark grids must be nonempty")
    for v in variants:
        if v not in ("quadratic", "linear"):
            raise ValueError(f"unknown variant {v!r}")
    specs = [parse_loss(l) if isinstance(l, str) else l for l in losses]
    tags = [format_loss(l) for l in specs]
    report = BenchReport([float(x) for x in sigmas], tags, list(variants), list(seeds))
    for sigma in report.sigmas:
        data = {seed: sphere_dataset(n, sigma, rng=_data_seed(seed, sigma)) for seed in seeds}
        for spec, tag in zip(specs, tags):
            for variant in variants:
                per_seed, n_failed = [], 0
                for seed in seeds:
                    ds = data[seed]
                    cfg = DenoiseConfig(
                        K=K, d=d, s=s, loss=spec,
                        linear_ablation=(variant == "linear"),
                        fit=fit_cfg.replace(seed=seed), project=project_cfg,
                    )
                    out = denoise(ds.X, cfg, threads=threads)
                    err = ((out.X_hat - ds.X_clean) ** 2).sum(axis=0)
                    per_seed.append(float(err.mean()))
                    n_failed += int(out.failed.sum())
                    report.errors.extend(
                        (sigma, tag, variant, seed, i, float(e)) for i, e in enumerate(err)
                    )
                report.cells[(sigma, tag, variant)] = Cell(
                    float(np.mean(per_seed)), per_seed, n * len(seeds), n_failed
                )
    return report


# --------------------------------------------------------------------------
# latent decoding and the circle toy


def latent_grid(taus, grid_per_dim: int) -> np.ndarray:
    """Axis-aligned grid over the latent bounding box, ``(d, grid_per_dim**d)``.

    A single point per axis sits at the midpoint of the range.
    """
    taus = np.asarray(taus, dtype=float)
    if taus.ndim == 1:
        taus = taus[None, :]
    d = taus.shape[0]
    if grid_per_dim < 1:
        raise ValueError("grid_per_dim must be >= 1")
    if grid_per_dim**d > GRID_LIMIT:
        raise ValueError(f"grid of {grid_per_dim}^{d} points exceeds {GRID_LIMIT}")
    lo, hi = taus.min(axis=1), taus.max(axis=1)
    if grid_per_dim == 1:
        axes = [np.array([0.5 * (a + b)]) for a, b in zip(lo, hi)]
    else:
        axes = [np.linspace(a, b, grid_per_dim) for a, b in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.vstack([m.ravel() for m in mesh])


def latent_grid_decode(model: QuadraticModel, taus, grid_per_dim: int):
    """Decode a latent grid; returns ``(points (D, G), grid (d, G))``."""
    grid = latent_grid(taus, grid_per_dim)
    return evaluate(model, grid), grid


def circle_distance(model: QuadraticModel, taus, n_grid: int = 200) -> float:
    """Mean distance from the unit circle of the fitted curve over its latent range."""
    pts, _ = latent_grid_decode(model, taus, n_grid)
    return float(np.abs(np.linalg.norm(pts, axis=0) - 1.0).mean())


@dataclass
class ToyFit:
    p: float
    variant: str
    seed: int
    data: Dataset
    model: QuadraticModel
    taus: np.ndarray
    projections: np.ndarray
    circle_distance: float


def toy_circle(
    p: float,
    seed: int,
    n: int = 100,
    noise_scale: float = 1.0,
    variants: Sequence[str] = ("quadratic", "linear"),
    cfg: FitConfig = FitConfig(),
) -> list:
    """Fit circle data with generalized-Gaussian(p) noise under the matched
    ``lpp`` loss, once per model variant (``lpp`` with ``p = 1`` is ``l1``)."""
    ds = circle_dataset(n, ("gg", p, noise_scale), rng=seed)
    loss = LossSpec("lpp", p=p)
    out = []
    for variant in variants:
        model, taus, _ = fit(ds.X, 1, 1, loss, cfg.replace(seed=seed),
                             freeze_theta=(variant == "linear"))
        _, proj, _, _ = project_batch(
            np.broadcast_to(model.c, (n, 2)),
            np.broadcast_to(model.Q, (n, 2, 2)),
            np.broadcast_to(model.Theta, (n,) + model.Theta.shape),
            1, ds.X.T, loss, cfg,
        )
        out.append(ToyFit(p, variant, seed, ds, model, taus, proj.T,
                          circle_distance(model, taus)))
    return out
