"""Projection of new points onto a fitted quadratic model."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .losses import LossSpec, _gradient, _value, loss_value
from .optimizer import (
    FitConfig,
    STEP_CAP,
    _forward,
    _tau_direction,
    _unresolvable,
    armijo_accept,
)
from .quadmap import QuadraticModel


class Projection(NamedTuple):
    tau: np.ndarray
    y_hat: np.ndarray
    converged: bool
    grad_norm: float


def _latent_grad(loss, c, Q, Th, tau, Y, d):
    R = _forward(c, Q, Th, tau[:, None, :], d)[:, 0] - Y
    G = _gradient(loss, R)
    g = _tau_direction(G[:, None, :], Q, Th, tau[:, None, :], d)[:, 0]
    return _value(loss, R), g


def project_batch(c, Q, Th, d, Y, loss: LossSpec, cfg: FitConfig = FitConfig(), tau0=None):
    """Project ``Y[b]`` onto model ``b`` for a stack of models (row convention).

    Returns ``(tau, y_hat, converged, grad_norm)``.  A point stops when its
    latent gradient norm drops below ``cfg.tol * max(1, ||y||)``, or when a
    line search exhausts its backtracks (reported as unconverged).
    """
    c, Q, Th, Y = (np.asarray(a, dtype=float) for a in (c, Q, Th, Y))
    B = Y.shape[0]
    if tau0 is None:
        tau = np.einsum("bD,bDd->bd", Y - c, Q[..., :d])
    else:
        tau = np.array(tau0, dtype=float).reshape(B, d)
    thresh = cfg.tol * np.maximum(1.0, np.linalg.norm(Y, axis=-1))
    eta = np.full(B, cfg.eta_tau)
    active = np.ones(B, bool)
    converged = np.zeros(B, bool)

    with np.errstate(all="ignore"):
        L, g = _latent_grad(loss, c, Q, Th, tau, Y, d)
        for _ in range(cfg.max_iters):
            gn = np.linalg.norm(g, axis=-1)
            converged |= active & (gn < thresh)
            active &= ~converged
            if not active.any():
                break
            gsq = gn * gn
            step = eta.copy()
            todo = active.copy()
            accepted = np.zeros(B, bool)
            for _ in range(cfg.max_backtracks + 1):
                todo &= ~_unresolvable(L, step, gsq)
                if not todo.any():
                    break
                cand = tau - step[:, None] * g
                Lc = _value(loss, _forward(c, Q, Th, cand[:, None, :], d)[:, 0] - Y)
                ok = todo & armijo_accept(L, Lc, step, gsq, cfg.armijo_alpha)
                tau = np.where(ok[:, None], cand, tau)
                accepted |= ok
                todo &= ~ok
                step = np.where(todo, step * cfg.shrink, step)
            active &= accepted
            eta = np.where(accepted, np.minimum(step * cfg.grow, STEP_CAP * cfg.eta_tau), eta)
            L, g = _latent_grad(loss, c, Q, Th, tau, Y, d)
        gn = np.linalg.norm(g, axis=-1)
        converged |= gn < thresh
    y_hat = _forward(c, Q, Th, tau[:, None, :], d)[:, 0]
    return tau, y_hat, converged, gn


def project(
    model: QuadraticModel,
    y,
    loss: LossSpec,
    cfg: FitConfig = FitConfig(),
    *,
    n_starts: int = 1,
    start_scale: float = 0.5,
) -> Projection:
    """Minimize ``tau -> loss(f(tau) - y)`` by gradient descent.

    The first start is ``U^T (y - c)``.  With ``n_starts > 1`` the remaining
    starts are Gaussian perturbations of it (scale
    ``start_scale * max(1, ||tau0||)``, drawn from ``cfg.seed``) and the start
    with the lowest final loss wins.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (model.D,):
        raise ValueError(f"y must have shape ({model.D},), got {y.shape}")
    loss_value(loss, y)  # validates finiteness and dimension
    tau0 = model.U.T @ (y - model.c)
    starts = [tau0]
    if n_starts > 1:
        rng = np.random.default_rng(cfg.seed)
        spread = start_scale * max(1.0, float(np.linalg.norm(tau0)))
        starts += list(tau0 + spread * rng.standard_normal((n_starts - 1, model.d)))
    S = len(starts)
    tau, y_hat, conv, gn = project_batch(
        np.broadcast_to(model.c, (S, model.D)),
        np.broadcast_to(model.Q, (S,) + model.Q.shape),
        np.broadcast_to(model.Theta, (S,) + model.Theta.shape),
        model.d,
        np.broadcast_to(y, (S, model.D)),
        loss,
        cfg,
        tau0=np.array(starts),
    )
    vals = loss_value(loss, y_hat - y)
    # prefer converged starts, then the smaller loss
    best = min(range(S), key=lambda k: (not conv[k], vals[k]))
    return Projection(tau[best].copy(), y_hat[best].copy(), bool(conv[best]), float(gn[best]))
