"""Riemannian gradient descent for subspace-constrained quadratic fits.

The optimizer works on stacks of independent problems: data ``(B, n, D)``,
shifts ``(B, D)``, frames ``(B, D, d+s)``, coefficients ``(B, m, s)`` and
latents ``(B, n, d)``.  Every batch member carries its own step sizes and
stopping state, so a member's result does not depend on what else is in the
batch.  :func:`fit` is the single-problem front end.
"""

from __future__ import annotations

import dataclasses
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .losses import LossSpec, _gradient, _value, loss_gradient, loss_value
from .quadmap import (
    QuadraticModel,
    vech_outer,
    vech_outer_jacobian,
    vech_size,
)
from .stiefel import retract_qr_batch, sym, tangent_project

STEP_CAP = 100.0
# Backtracking stops once eta * ||g||^2 is below this fraction of |F|: no
# decrease of that size is resolvable in floating point.
RESOLUTION = 1e-15


class DivergenceError(FloatingPointError):
    """The objective became non-finite."""


@dataclass(frozen=True)
class FitConfig:
    """Hyperparameters of the block gradient descent."""

    max_iters: int = 1000
    tol: float = 1e-8
    eta_Q: float = 1.0
    eta_theta: float = 1.0
    eta_c: float = 1.0
    eta_tau: float = 1.0
    armijo_alpha: float = 1e-4
    shrink: float = 0.5
    grow: float = 2.0
    max_backtracks: int = 30
    seed: int = 0
    theta_init_sigma: float = 1e-2

    def __post_init__(self):
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        for name in ("eta_Q", "eta_theta", "eta_c", "eta_tau"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.armijo_alpha < 1:
            raise ValueError("armijo_alpha must lie in (0, 1)")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must lie in (0, 1)")
        if not self.grow >= 1:
            raise ValueError("grow must be >= 1")
        if self.max_backtracks < 0:
            raise ValueError("max_backtracks must be >= 0")
        if not self.theta_init_sigma >= 0:
            raise ValueError("theta_init_sigma must be nonnegative")

    def replace(self, **kw) -> "FitConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, mapping: dict) -> "FitConfig":
        names = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = set(mapping) - set(names)
        if unknown:
            raise ValueError(f"unknown FitConfig keys: {sorted(unknown)}")
        kw = {}
        for key, val in mapping.items():
            default = getattr(cls, key)
            kw[key] = int(val) if isinstance(default, int) else float(val)
        return cls(**kw)


@dataclass(frozen=True)
class KKTResiduals:
    res_Q: float
    res_theta: float
    res_c: float
    res_tau_max: float
    # Lagrange form of the frame condition: grad_Q F - 2 Q Lambda.
    multiplier: np.ndarray = field(repr=False)
    res_lagrange: float = 0.0

    def max(self) -> float:
        return max(self.res_Q, self.res_theta, self.res_c, self.res_tau_max)


TRACE_COLUMNS = (
    "iteration",
    "objective",
    "eta_Q",
    "eta_Theta",
    "eta_c",
    "mean_eta_tau",
    "res_Q",
    "res_Theta",
    "res_c",
    "res_tau_max",
)


@dataclass
class FitTrace:
    """Per-iteration diagnostics of one fit.

    ``objective[0]`` is the initial value and ``objective[t]`` the value after
    iteration ``t``.  Step sizes are the accepted ones (NaN when the block was
    skipped); residuals are gradient norms at the start of each iteration.
    """

    objective: np.ndarray
    eta_Q: np.ndarray
    eta_theta: np.ndarray
    eta_c: np.ndarray
    mean_eta_tau: np.ndarray
    res_Q: np.ndarray
    res_theta: np.ndarray
    res_c: np.ndarray
    res_tau_max: np.ndarray
    converged: bool
    kkt: Optional[KKTResiduals] = None

    @property
    def n_iter(self) -> int:
        return len(self.objective) - 1

    def rows(self):
        for t in range(self.n_iter):
            yield (
                t + 1,
                self.objective[t + 1],
                self.eta_Q[t],
                self.eta_theta[t],
                self.eta_c[t],
                self.mean_eta_tau[t],
                self.res_Q[t],
                self.res_theta[t],
                self.res_c[t],
                self.res_tau_max[t],
            )


class FitResult(NamedTuple):
    model: QuadraticModel
    taus: np.ndarray
    trace: FitTrace


# --------------------------------------------------------------------------
# batched kernels (row convention, no input validation)


def _T(A):
    return np.swapaxes(A, -1, -2)


def _forward(c, Q, Th, T, d):
    F = T @ _T(Q[..., :d]) + c[..., None, :]
    if Q.shape[-1] > d:
        F = F + (vech_outer(T) @ Th) @ _T(Q[..., d:])
    return F


def _sample_losses(loss, c, Q, Th, T, X, d):
    return _value(loss, _forward(c, Q, Th, T, d) - X)


def _tau_direction(G, Q, Th, T, d):
    """Per-sample ``J^T g`` with ``J`` taken at ``(Q, Th, T)``."""
    out = G @ Q[..., :d]
    if Q.shape[-1] > d:
        w = (G @ Q[..., d:]) @ _T(Th)
        out = out + np.einsum("...m,...md->...d", w, vech_outer_jacobian(T))
    return out


def _gradients(loss, c, Q, Th, T, X, d):
    R = _forward(c, Q, Th, T, d) - X
    G = _gradient(loss, R)
    Phi = vech_outer(T)
    gc = G.sum(axis=-2)
    gTh = _T(Phi) @ (G @ Q[..., d:])
    gQ = _T(G) @ np.concatenate([T, Phi @ Th], axis=-1)
    gtau = _tau_direction(G, Q, Th, T, d)
    return G, gc, gTh, gQ, gtau


def armijo_accept(F_old, F_new, eta, grad_sq_norm, alpha):
    """Sufficient decrease test ``F_new <= F_old - alpha * eta * ||g||^2``."""
    return np.asarray(F_new) <= np.asarray(F_old) - alpha * np.asarray(eta) * np.asarray(
        grad_sq_norm
    )


def _line_search(trial, F_cur, eta, grad_sq, pending, cfg):
    """Backtrack independently for each pending batch member.

    ``trial(idx, eta_sub)`` returns ``(candidate, L, ok)`` for members ``idx``.
    Returns the accepted mask, the accepted step sizes and, per accepted
    member, its candidate and per-sample losses (as index-aligned lists).
    """
    eta = eta.copy()
    todo = pending.copy()
    accepted = np.zeros_like(pending)
    wins = []
    for _ in range(cfg.max_backtracks + 1):
        todo &= ~_unresolvable(F_cur, eta, grad_sq)
        idx = np.flatnonzero(todo)
        if idx.size == 0:
            break
        cand, L, ok = trial(idx, eta[idx])
        Ft = L.sum(axis=-1)
        acc = ok & armijo_accept(F_cur[idx], Ft, eta[idx], grad_sq[idx], cfg.armijo_alpha)
        if acc.any():
            wins.append((idx[acc], cand[acc], L[acc]))
            accepted[idx[acc]] = True
            todo[idx[acc]] = False
        eta[idx[~acc]] *= cfg.shrink
    return accepted, eta, wins


def _unresolvable(F, eta, grad_sq):
    return (grad_sq > 0) & (eta * grad_sq <= RESOLUTION * np.abs(F))


def _grow(eta_acc, accepted, eta_prev, init, cfg):
    nxt = np.where(accepted, np.minimum(eta_acc * cfg.grow, STEP_CAP * init), eta_prev)
    return nxt


@dataclass
class BatchFit:
    """Raw result of :func:`fit_batch` (row convention)."""

    c: np.ndarray
    Q: np.ndarray
    Theta: np.ndarray
    T: np.ndarray
    d: int
    objective: np.ndarray
    n_iter: np.ndarray
    converged: np.ndarray
    diverged: np.ndarray
    history: Optional[dict] = None

    def model(self, b: int) -> QuadraticModel:
        return QuadraticModel(c=self.c[b], Q=self.Q[b], Theta=self.Theta[b], d=self.d)

    def __len__(self):
        return self.c.shape[0]


def initialize(X, d, s, rng, sigma, freeze_theta=False):
    """Mean shift, PCA frame, projected latents and random ``Theta``.

    ``X`` is ``(B, n, D)``.  Singular vector signs are fixed so that the
    largest-magnitude entry of each column is positive.
    """
    k = d + s
    c = X.mean(axis=-2)
    Xc = X - c[..., None, :]
    _, _, Vt = np.linalg.svd(Xc, full_matrices=True)
    Q = _T(Vt[..., :k, :])
    pivot = np.take_along_axis(Q, np.abs(Q).argmax(axis=-2)[..., None, :], axis=-2)
    Q = Q * np.where(pivot < 0, -1.0, 1.0)
    T = Xc @ Q[..., :d]
    shape = X.shape[:-2] + (vech_size(d), s)
    if freeze_theta or sigma == 0:
        Th = np.zeros(shape)
    else:
        Th = rng.normal(0.0, sigma, size=shape)
    return c, Q, Th, T


def _fit_rows(X, d, s, loss, cfg, freeze_theta, Th0, record):
    B, n, D = X.shape
    k = d + s
    c, Q, _, T = initialize(X, d, s, None, 0.0, freeze_theta=True)
    Th = np.zeros((B, vech_size(d), s)) if freeze_theta else Th0.copy()
    update_theta = s > 0 and not freeze_theta

    eta_Q = np.full(B, cfg.eta_Q)
    eta_Th = np.full(B, cfg.eta_theta)
    eta_c = np.full(B, cfg.eta_c)
    eta_tau = np.full((B, n), cfg.eta_tau)

    L = _sample_losses(loss, c, Q, Th, T, X, d)
    F = L.sum(axis=-1)
    diverged = ~np.isfinite(F)
    converged = np.zeros(B, bool)
    active = ~diverged
    n_iter = np.zeros(B, int)
    hist = {key: [] for key in TRACE_COLUMNS[1:]} if record else None
    if record:
        hist["objective"].append(F.copy())

    for _ in range(cfg.max_iters):
        if not active.any():
            break
        G, gc, gTh, gQ, gtau = _gradients(loss, c, Q, Th, T, X, d)
        GQ = tangent_project(Q, gQ)
        F_start = F.copy()

        # frame
        def trial_Q(idx, eta):
            cand, ok = retract_qr_batch(Q[idx] - eta[:, None, None] * GQ[idx])
            return cand, _sample_losses(loss, c[idx], cand, Th[idx], T[idx], X[idx], d), ok

        acc_Q, eta_acc_Q, wins = _line_search(
            trial_Q, F, eta_Q, (GQ * GQ).sum(axis=(-2, -1)), active, cfg
        )
        for idx, cand, Lw in wins:
            Q[idx], L[idx], F[idx] = cand, Lw, Lw.sum(axis=-1)

        # quadratic coefficients
        if update_theta:

            def trial_Th(idx, eta):
                cand = Th[idx] - eta[:, None, None] * gTh[idx]
                Lt = _sample_losses(loss, c[idx], Q[idx], cand, T[idx], X[idx], d)
                return cand, Lt, np.ones(idx.size, bool)

            acc_Th, eta_acc_Th, wins = _line_search(
                trial_Th, F, eta_Th, (gTh * gTh).sum(axis=(-2, -1)), active, cfg
            )
            for idx, cand, Lw in wins:
                Th[idx], L[idx], F[idx] = cand, Lw, Lw.sum(axis=-1)
        else:
            acc_Th, eta_acc_Th = np.zeros(B, bool), eta_Th

        # shift
        def trial_c(idx, eta):
            cand = c[idx] - eta[:, None] * gc[idx]
            Lt = _sample_losses(loss, cand, Q[idx], Th[idx], T[idx], X[idx], d)
            return cand, Lt, np.ones(idx.size, bool)

        acc_c, eta_acc_c, wins = _line_search(
            trial_c, F, eta_c, (gc * gc).sum(axis=-1), active, cfg
        )
        for idx, cand, Lw in wins:
            c[idx], L[idx], F[idx] = cand, Lw, Lw.sum(axis=-1)

        # latents: gradient at the updated (Q, Theta, c) and the current tau;
        # each sample backtracks on its own
        G = _gradient(loss, _forward(c, Q, Th, T, d) - X)
        direction = _tau_direction(G, Q, Th, T, d)
        dsq = (direction * direction).sum(axis=-1)
        eta = eta_tau.copy()
        todo = np.broadcast_to(active[:, None], (B, n)).copy()
        acc_tau = np.zeros((B, n), bool)
        for _ in range(cfg.max_backtracks + 1):
            todo &= ~_unresolvable(L, eta, dsq)
            if not todo.any():
                break
            cand = T - eta[..., None] * direction
            Lt = _sample_losses(loss, c, Q, Th, cand, X, d)
            ok = todo & armijo_accept(L, Lt, eta, dsq, cfg.armijo_alpha)
            T = np.where(ok[..., None], cand, T)
            L = np.where(ok, Lt, L)
            acc_tau |= ok
            todo &= ~ok
            eta = np.where(todo, eta * cfg.shrink, eta)
        F = np.where(active, L.sum(axis=-1), F)

        if record:
            hist["objective"].append(F.copy())
            hist["eta_Q"].append(np.where(acc_Q, eta_acc_Q, np.nan))
            hist["eta_Theta"].append(np.where(acc_Th, eta_acc_Th, np.nan))
            hist["eta_c"].append(np.where(acc_c, eta_acc_c, np.nan))
            n_acc = acc_tau.sum(axis=-1)
            sum_tau = np.where(acc_tau, eta, 0.0).sum(axis=-1)
            mean_tau = np.where(n_acc > 0, sum_tau / np.maximum(n_acc, 1), np.nan)
            hist["mean_eta_tau"].append(mean_tau)
            hist["res_Q"].append(np.linalg.norm(GQ, axis=(-2, -1)))
            hist["res_Theta"].append(np.linalg.norm(gTh, axis=(-2, -1)))
            hist["res_c"].append(np.linalg.norm(gc, axis=-1))
            hist["res_tau_max"].append(np.linalg.norm(gtau, axis=-1).max(axis=-1))

        eta_Q = _grow(eta_acc_Q, acc_Q, eta_Q, cfg.eta_Q, cfg)
        eta_Th = _grow(eta_acc_Th, acc_Th, eta_Th, cfg.eta_theta, cfg)
        eta_c = _grow(eta_acc_c, acc_c, eta_c, cfg.eta_c, cfg)
        eta_tau = _grow(eta, acc_tau, eta_tau, cfg.eta_tau, cfg)

        n_iter += active
        scale = np.where(F_start > 0, F_start, 1.0)
        done = active & ((F == 0) | ((F_start - F) / scale < cfg.tol))
        converged |= done
        active &= ~done

    history = None
    if record:
        history = {key: np.array(val) for key, val in hist.items()}
    return BatchFit(c, Q, Th, T, d, F, n_iter, converged, diverged, history)


def fit_batch(
    X,
    d: int,
    s: int,
    loss: LossSpec,
    cfg: FitConfig = FitConfig(),
    *,
    freeze_theta: bool = False,
    theta0=None,
    rng=None,
    record: bool = False,
    threads: int = 1,
) -> BatchFit:
    """Fit ``B`` independent problems given as row-stacked data ``(B, n, D)``.

    ``theta0`` fixes the initial coefficients; otherwise they are drawn from
    ``rng`` (default: ``numpy.random.default_rng(cfg.seed)``).  With
    ``threads > 1`` the batch is split into contiguous chunks; results are
    identical for any thread count.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 3:
        raise ValueError("batched data must have shape (B, n, D)")
    B, n, D = X.shape
    if d < 1 or s < 0 or D < d + s:
        raise ValueError(f"need d >= 1, s >= 0 and D >= d+s; got d={d}, s={s}, D={D}")
    if n <= d + s:
        warnings.warn(f"only n={n} samples for d+s={d + s}; the fit is underdetermined")
    shape = (B, vech_size(d), s)
    if theta0 is None:
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        theta0 = (
            np.zeros(shape)
            if freeze_theta or cfg.theta_init_sigma == 0
            else rng.normal(0.0, cfg.theta_init_sigma, size=shape)
        )
    theta0 = np.asarray(theta0, dtype=float).reshape(shape)

    with np.errstate(all="ignore"):
        if threads <= 1 or B == 1:
            return _fit_rows(X, d, s, loss, cfg, freeze_theta, theta0, record)
        bounds = np.linspace(0, B, min(threads, B) + 1).astype(int)
        chunks = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(
                pool.map(
                    lambda sl: _fit_rows(
                        X[sl], d, s, loss, cfg, freeze_theta, theta0[sl], record
                    ),
                    chunks,
                )
            )
    return _concat(parts, d)


def _concat(parts, d):
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
    history = None
    if parts[0].history is not None:
        # chunks may stop after different iteration counts; pad with NaN
        length = max(len(p.history["objective"]) for p in parts)
        history = {}
        for key in parts[0].history:
            cols = []
            for p in parts:
                h = p.history[key]
                pad = length - (1 if key == "objective" else 0) - h.shape[0]
                cols.append(np.vstack([h, np.full((pad, h.shape[1]), np.nan)]) if pad else h)
            history[key] = np.hstack(cols)
    return BatchFit(
        cat("c"), cat("Q"), cat("Theta"), cat("T"), d,
        cat("objective"), cat("n_iter"), cat("converged"), cat("diverged"), history,
    )


# --------------------------------------------------------------------------
# single-problem API (column convention)


def _data_matrix(X) -> np.ndarray:
    X = getattr(X, "X", X)
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("data must be a (D, n) matrix")
    return X


def _state(model: QuadraticModel, taus, X):
    X = _data_matrix(X)
    taus = np.asarray(taus, dtype=float)
    if taus.ndim == 1 and model.d == 1:
        taus = taus[None, :]
    if X.shape[0] != model.D:
        raise ValueError(f"data dimension {X.shape[0]} does not match model D={model.D}")
    if taus.shape != (model.d, X.shape[1]):
        raise ValueError(f"latents must have shape ({model.d}, {X.shape[1]}), got {taus.shape}")
    return (model.c[None], model.Q[None], model.Theta[None], taus.T[None], X.T[None])


def objective(model: QuadraticModel, taus, X, loss: LossSpec) -> float:
    """``sum_i loss(x_i - f(tau_i))``."""
    c, Q, Th, T, Xr = _state(model, taus, X)
    residual = Xr[0] - _forward(c, Q, Th, T, model.d)[0]
    return float(loss_value(loss, residual).sum())


def _grads_public(model, taus, X, loss):
    c, Q, Th, T, Xr = _state(model, taus, X)
    loss_gradient(loss, _forward(c, Q, Th, T, model.d)[0] - Xr[0])  # validates
    return _gradients(loss, c, Q, Th, T, Xr, model.d)


def grad_c(model, taus, X, loss) -> np.ndarray:
    return _grads_public(model, taus, X, loss)[1][0]


def grad_theta(model, taus, X, loss) -> np.ndarray:
    return _grads_public(model, taus, X, loss)[2][0]


def grad_Q(model, taus, X, loss) -> np.ndarray:
    """Euclidean gradient with respect to the full frame ``Q = [U, V]``."""
    return _grads_public(model, taus, X, loss)[3][0]


def grad_tau(model, taus, X, loss, i: Optional[int] = None) -> np.ndarray:
    """Latent gradients as a ``(d, n)`` matrix, or column ``i`` only."""
    g = _grads_public(model, taus, X, loss)[4][0].T
    return g if i is None else g[:, i]


def kkt_residuals(model, taus, X, loss) -> KKTResiduals:
    """Norms of the first-order conditions at a given state."""
    _, gc, gTh, gQ, gtau = (a[0] for a in _grads_public(model, taus, X, loss))
    Q = model.Q
    GQ = tangent_project(Q, gQ)
    Lam = 0.5 * sym(Q.T @ gQ)
    return KKTResiduals(
        res_Q=float(np.linalg.norm(GQ)),
        res_theta=float(np.linalg.norm(gTh)),
        res_c=float(np.linalg.norm(gc)),
        res_tau_max=float(np.linalg.norm(gtau, axis=-1).max(initial=0.0)),
        multiplier=Lam,
        res_lagrange=float(np.linalg.norm(gQ - 2.0 * Q @ Lam)),
    )


def fit(
    X,
    d: int,
    s: int,
    loss: LossSpec,
    cfg: FitConfig = FitConfig(),
    *,
    freeze_theta: bool = False,
) -> FitResult:
    """Fit one quadratic model to the columns of ``X`` (a ``(D, n)`` matrix
    or a :class:`~scqm.datagen.Dataset`).

    With ``freeze_theta`` the coefficients stay at zero and the fit is a
    robust affine-subspace fit.

    Raises
    ------
    DivergenceError
        If the objective is not finite at the initial point.
    """
    X = _data_matrix(X)
    res = fit_batch(X.T[None], d, s, loss, cfg, freeze_theta=freeze_theta, record=True)
    if res.diverged[0]:
        raise DivergenceError("fit: objective is not finite at initialization")
    model = res.model(0)
    taus = res.T[0].T.copy()
    h = {key: val[:, 0] for key, val in res.history.items()}
    trace = FitTrace(
        objective=h["objective"],
        eta_Q=h["eta_Q"],
        eta_theta=h["eta_Theta"],
        eta_c=h["eta_c"],
        mean_eta_tau=h["mean_eta_tau"],
        res_Q=h["res_Q"],
        res_theta=h["res_Theta"],
        res_c=h["res_c"],
        res_tau_max=h["res_tau_max"],
        converged=bool(res.converged[0]),
        kkt=kkt_residuals(model, taus, X, loss),
    )
    return FitResult(model, taus, trace)
