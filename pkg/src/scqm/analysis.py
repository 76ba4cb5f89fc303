"""Second-order diagnostics: latent Hessians, convexity radii and the
sensitivity of the loss-dependent center (Frechet mean) to the data."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional

import numpy as np

from .losses import LossSpec, _gradient, _value, format_loss, loss_gradient, loss_hessian, loss_value
from .optimizer import RESOLUTION, FitConfig
from .quadmap import (
    QuadraticModel,
    evaluate_rows,
    hessian_f,
    jacobian_rows,
    jacobian_tau,
    theta_to_tensor,
)

COND_LIMIT = 1e12
FRECHET_CONFIG = FitConfig(max_iters=100_000, tol=1e-10)


class SingularHessianError(np.linalg.LinAlgError):
    """The aggregated loss Hessian is singular or too badly conditioned."""


# --------------------------------------------------------------------------
# latent Hessian and the convexity certificate


def hessian_tau(model: QuadraticModel, x, tau, loss: LossSpec) -> np.ndarray:
    """Hessian of ``tau -> loss(f(tau) - x)``.

    ``J^T H_loss J`` plus the curvature of ``f`` contracted with the loss
    gradient, ``sum_r g_r d^2 f_r``.  The result is symmetrized.
    """
    x = np.asarray(x, dtype=float)
    tau = np.asarray(tau, dtype=float)
    if x.shape != (model.D,):
        raise ValueError(f"x must have shape ({model.D},), got {x.shape}")
    J = jacobian_tau(model, tau)
    y = evaluate_rows(model, tau) - x
    Hl = loss_hessian(loss, y)
    g = loss_gradient(loss, y)
    H = J.T @ Hl @ J
    if model.s:
        H = H + np.einsum("ruv,r->uv", hessian_f(model), g)
    return 0.5 * (H + H.T)


def _hessian_tau_rows(model, x, T, loss):
    # batched variant for sample sweeps, T is (k, d)
    J = jacobian_rows(model, T)
    Y = evaluate_rows(model, T) - x
    Hl = loss_hessian(loss, Y)
    H = np.einsum("kri,krs,ksj->kij", J, Hl, J)
    if model.s:
        H = H + np.einsum("ruv,kr->kuv", hessian_f(model), loss_gradient(loss, Y))
    return 0.5 * (H + np.swapaxes(H, -1, -2)), Y


def max_slice_norm(model: QuadraticModel) -> float:
    """``max_t ||A_t||_2`` over the symmetric coefficient slices."""
    if model.s == 0:
        return 0.0
    A = theta_to_tensor(model.Theta, model.d)
    return float(max(np.linalg.norm(a, 2) for a in A))


@dataclass
class ConvexityCertificate:
    r_p: float
    rho: float
    sigma0: float
    A0: float
    p: float
    samples_checked: int = 0
    min_eig_observed: float = float("nan")
    # samples outside the certified ball
    n_outside: int = 0
    min_eig_outside: float = float("nan")
    n_skipped: int = 0

    @property
    def holds(self) -> bool:
        """No checked sample inside the ball has a clearly negative eigenvalue."""
        return self.samples_checked == 0 or self.min_eig_observed >= -1e-8

    def to_dict(self) -> dict:
        out = asdict(self)
        out["holds"] = self.holds
        return {k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in out.items()}


def _radius(p, rho, sigma0, A0):
    if A0 == 0:
        return float("inf")
    return float(((p - 1) * rho * sigma0**2 / (2 * A0)) ** (1 / (p - 1)))


def convexity_radius(p: float, rho: float, sigma0: float = 1.0, A0: float = 0.0) -> ConvexityCertificate:
    """Radius ``((p-1) rho sigma0^2 / (2 A0))^(1/(p-1))`` of the ball in which
    the latent Hessian of an lpp fit is positive semidefinite.

    ``A0 = 0`` (no curvature) gives an infinite radius.
    """
    if not 1 < p <= 2:
        raise ValueError(f"p must lie in (1, 2], got {p}")
    if not rho > 0 or not sigma0 > 0:
        raise ValueError("rho and sigma0 must be positive")
    if not A0 >= 0:
        raise ValueError("A0 must be nonnegative")
    return ConvexityCertificate(_radius(p, rho, sigma0, A0), float(rho), float(sigma0), float(A0), float(p))


def verify_convexity_ball(
    model: QuadraticModel,
    x,
    loss: LossSpec,
    n_samples: int,
    rng=None,
    *,
    center=None,
    scale: float = 1.0,
    sigma0: float = 1.0,
) -> ConvexityCertificate:
    """Sample latents around ``center`` and check the certified ball.

    Latents are drawn as ``center + scale * N(0, I)``, with ``center``
    defaulting to ``U^T (x - c)``.  ``rho`` is the smallest
    ``|y_j|^(p-2)`` over the samples kept in the ball: samples are taken in
    order of ``||y||_{p-1}`` and the largest prefix that fits inside the
    radius computed from its own ``rho`` is kept.  Samples with an exactly
    zero residual coordinate are skipped.  ``min_eig_observed`` covers the
    samples inside the ball and ``min_eig_outside`` the others.
    """
    if loss.kind != "lpp" or not 1 < loss.p <= 2:
        raise ValueError("verify_convexity_ball needs an lpp loss with 1 < p <= 2")
    x = np.asarray(x, dtype=float)
    if x.shape != (model.D,):
        raise ValueError(f"x must have shape ({model.D},), got {x.shape}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    p = loss.p
    A0 = max_slice_norm(model)
    if center is None:
        center = model.U.T @ (x - model.c)
    T = np.asarray(center, dtype=float) + scale * rng.standard_normal((n_samples, model.d))
    H, Y = _hessian_tau_rows(model, x, T, loss)
    lam = np.linalg.eigvalsh(H)[:, 0]
    absY = np.abs(Y)
    valid = np.all(absY > 0, axis=1)
    n_skipped = int((~valid).sum())
    lam, absY = lam[valid], absY[valid]
    if lam.size == 0:
        cert = convexity_radius(p, 1.0, sigma0, A0)
        cert.n_skipped = n_skipped
        return cert

    q = (absY ** (p - 1)).sum(axis=1) ** (1 / (p - 1))
    order = np.argsort(q, kind="stable")
    q, lam, absY = q[order], lam[order], absY[order]
    rho_k = np.minimum.accumulate((absY ** (p - 2)).min(axis=1))
    r_k = np.array([_radius(p, r, sigma0, A0) for r in rho_k])
    fits = np.flatnonzero(q <= r_k)
    k = fits[-1] + 1 if fits.size else 0
    rho = rho_k[k - 1] if k else rho_k[0]
    cert = convexity_radius(p, float(rho), sigma0, A0)
    cert.samples_checked = int(k)
    cert.min_eig_observed = float(lam[:k].min()) if k else float("nan")
    cert.n_outside = int(lam.size - k)
    cert.min_eig_outside = float(lam[k:].min()) if k < lam.size else float("nan")
    cert.n_skipped = n_skipped
    return cert


# --------------------------------------------------------------------------
# Frechet mean and its sensitivity


class FrechetMean(NamedTuple):
    c: np.ndarray
    converged: bool
    grad_norm: float
    n_iter: int


def _data(X) -> np.ndarray:
    X = np.asarray(getattr(X, "X", X), dtype=float)
    if X.ndim != 2 or X.shape[1] < 1:
        raise ValueError("X must be a (D, n) matrix with n >= 1")
    return X


def _center_objective(loss, R):
    return float(_value(loss, R).sum())


def _subgradient(loss: LossSpec, X: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Minimum-norm element of the subdifferential of ``c -> sum loss(x_i - c)``."""
    R = X.T - c
    if loss.kind == "l1":
        above = (R > 0).sum(axis=0)
        below = (R < 0).sum(axis=0)
        ties = (R == 0).sum(axis=0)
        base = (below - above).astype(float)
        return np.clip(0.0, base - ties, base + ties)
    if loss.kind == "l2":
        nrm = np.linalg.norm(R, axis=1)
        ties = int((nrm == 0).sum())
        g = -(R[nrm > 0] / nrm[nrm > 0, None]).sum(axis=0)
        gn = np.linalg.norm(g)
        if ties and gn > 0:
            g = g * max(0.0, 1.0 - ties / gn)
        return g
    return -_gradient(loss, R).sum(axis=0)


def _polish_l1(X, c, loss):
    # the l1 center is separable with a minimizer at a data coordinate
    R = X.T - c
    best = _center_objective(loss, R)
    c = c.copy()
    for k in range(X.shape[0]):
        cand = c.copy()
        cand[k] = X[k, np.argmin(np.abs(X[k] - c[k]))]
        val = _center_objective(loss, X.T - cand)
        if val <= best:
            c, best = cand, val
    return c


def frechet_mean(X, loss: LossSpec, cfg: FitConfig = FRECHET_CONFIG, c0=None) -> FrechetMean:
    """Minimize ``sum_i loss(x_i - c)`` over ``c`` by gradient descent with
    Armijo backtracking, starting from the sample mean.

    Convergence means the minimum-norm (sub)gradient is below ``cfg.tol``.
    Once a sufficient decrease is too small to resolve in ``F``, a step is
    accepted if it shrinks the gradient instead.
    For ``l1`` the iterate is finally snapped to the nearest data coordinate
    when that does not increase the objective.
    """
    X = _data(X)
    c = X.mean(axis=1) if c0 is None else np.array(c0, dtype=float)
    loss_value(loss, X.T - c)  # validates
    eta = cfg.eta_c
    it = 0
    with np.errstate(all="ignore"):
        F = _center_objective(loss, X.T - c)
        g = _subgradient(loss, X, c)
        for it in range(1, cfg.max_iters + 1):
            gsq = float(g @ g)
            if np.sqrt(gsq) < cfg.tol:
                it -= 1
                break
            step, moved = eta, False
            for _ in range(cfg.max_backtracks + 1):
                if step * np.sqrt(gsq) <= RESOLUTION * max(1.0, np.abs(c).max()):
                    break
                cand = c - step * g
                Fc = _center_objective(loss, X.T - cand)
                if step * gsq > RESOLUTION * abs(F):
                    ok = Fc <= F - cfg.armijo_alpha * step * gsq
                else:
                    # F is flat to rounding here: require a smaller gradient
                    g_c = _subgradient(loss, X, cand)
                    ok = float(g_c @ g_c) < gsq
                if ok:
                    c, F, moved = cand, Fc, True
                    break
                step *= cfg.shrink
            if not moved:
                break
            g = _subgradient(loss, X, c)
            eta = step * cfg.grow
    if loss.kind == "l1":
        c = _polish_l1(X, c, loss)
    gn = float(np.linalg.norm(_subgradient(loss, X, c)))
    return FrechetMean(c, gn < cfg.tol, gn, it)


def _hessian_terms(X, loss, c):
    R = X.T - c
    Hs = loss_hessian(loss, R)
    return R, Hs, Hs.sum(axis=0)


def _solve(H, rhs):
    cond = np.linalg.cond(H)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularHessianError(f"aggregated Hessian is singular (condition number {cond:.3g})")
    L = np.linalg.cholesky(0.5 * (H + H.T))
    return np.linalg.solve(L.T, np.linalg.solve(L, rhs))


def _deltas(X, deltas):
    deltas = np.asarray(deltas, dtype=float)
    if deltas.shape != X.shape:
        raise ValueError(f"deltas must have shape {X.shape}, got {deltas.shape}")
    return deltas


def sensitivity(X, loss: LossSpec, deltas, cfg: FitConfig = FRECHET_CONFIG, c_star=None) -> np.ndarray:
    """First-order change of the Frechet mean, ``H^{-1} sum_i H_i dx_i`` with
    ``H_i`` the loss Hessian at ``x_i - c*`` and ``H = sum_i H_i``.

    Raises
    ------
    SingularHessianError
        If ``H`` has condition number above ``1e12``.
    """
    X = _data(X)
    deltas = _deltas(X, deltas)
    if c_star is None:
        c_star = frechet_mean(X, loss, cfg).c
    _, Hs, H = _hessian_terms(X, loss, np.asarray(c_star, dtype=float))
    return _solve(H, np.einsum("nij,jn->i", Hs, deltas))


def sensitivity_terms(X, loss: LossSpec, deltas, c_star) -> np.ndarray:
    """Per-sample contributions ``H^{-1} H_i dx_i`` as a ``(D, n)`` matrix."""
    X = _data(X)
    deltas = _deltas(X, deltas)
    _, Hs, H = _hessian_terms(X, loss, np.asarray(c_star, dtype=float))
    return _solve(H, np.einsum("nij,jn->in", Hs, deltas))


def l2_sensitivity_decomposition(
    X, deltas, cfg: FitConfig = FRECHET_CONFIG, c_star=None, min_residual: float = 0.1
) -> np.ndarray:
    """The ``l2`` sensitivity through projectors: each ``dx_i`` is projected
    onto the complement of ``r_i = x_i - c*`` and weighted by ``1/||r_i||``.
    """
    X = _data(X)
    deltas = _deltas(X, deltas)
    if c_star is None:
        c_star = frechet_mean(X, LossSpec("l2"), cfg).c
    R = X.T - np.asarray(c_star, dtype=float)
    nrm = np.linalg.norm(R, axis=1)
    if nrm.min() < min_residual:
        raise ValueError(
            f"residual norm {nrm.min():.3g} is below {min_residual}; the l2 Hessian is near its singularity"
        )
    U = R / nrm[:, None]
    dX = deltas.T
    projected = dX - U * np.einsum("nj,nj->n", U, dX)[:, None]
    rhs = (projected / nrm[:, None]).sum(axis=0)
    D = X.shape[0]
    H = (np.eye(D)[None] - U[:, :, None] * U[:, None, :]) / nrm[:, None, None]
    return _solve(H.sum(axis=0), rhs)


@dataclass
class SensitivityReport:
    loss: str
    predicted: list
    resolved: list
    rel_error: float
    c_star: list
    converged: bool


def sensitivity_check(X, loss: LossSpec, deltas, cfg: FitConfig = FRECHET_CONFIG) -> SensitivityReport:
    """Compare the predicted change with ``c*(X + deltas) - c*(X)``."""
    X = _data(X)
    deltas = _deltas(X, deltas)
    base = frechet_mean(X, loss, cfg)
    moved = frechet_mean(X + deltas, loss, cfg, c0=base.c)
    pred = sensitivity(X, loss, deltas, cfg, c_star=base.c)
    actual = moved.c - base.c
    denom = max(np.linalg.norm(actual), np.finfo(float).tiny)
    return SensitivityReport(
        loss=format_loss(loss),
        predicted=pred.tolist(),
        resolved=actual.tolist(),
        rel_error=float(np.linalg.norm(pred - actual) / denom),
        c_star=base.c.tolist(),
        converged=bool(base.converged and moved.converged),
    )
