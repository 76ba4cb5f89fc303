"""Quadratic maps ``f(tau) = c + U tau + V Theta^T vech(tau tau^T)``.

Pairs ``(i, j)`` with ``i <= j`` are ordered row-major over the upper
triangle, ``(0,0), (0,1), ..., (0,d-1), (1,1), ..., (d-1,d-1)``.  Indices are
0-based.

Public functions follow the column convention of the data matrices: a batch
of latent vectors is ``(d, n)`` and a batch of outputs is ``(D, n)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

VECH_ORDERING = "rowmajor-upper"
ORTHO_TOL = 1e-8


class ModelError(ValueError):
    """Inconsistent model parameters or shapes."""


def vech_size(d: int) -> int:
    return d * (d + 1) // 2


@lru_cache(maxsize=None)
def vech_pairs(d: int) -> tuple[np.ndarray, np.ndarray]:
    """Row and column index arrays of the vech ordering."""
    iu, ju = np.triu_indices(d)
    iu.setflags(write=False)
    ju.setflags(write=False)
    return iu, ju


def vech(S) -> np.ndarray:
    """Stack the entries ``S[i, j]`` with ``i <= j``."""
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ModelError(f"vech needs a square matrix, got shape {S.shape}")
    iu, ju = vech_pairs(S.shape[0])
    return S[iu, ju].copy()


def vech_index(i: int, j: int, d: int) -> int:
    """Position of pair ``(i, j)`` in the vech ordering (0-based)."""
    if not (0 <= i <= j < d):
        raise ModelError(f"need 0 <= i <= j < d, got i={i}, j={j}, d={d}")
    return i * d - i * (i - 1) // 2 + (j - i)


def vech_outer(T: np.ndarray) -> np.ndarray:
    """``vech(tau tau^T)`` for latent vectors stacked on the last axis."""
    iu, ju = vech_pairs(T.shape[-1])
    return T[..., iu] * T[..., ju]


def build_M(tau) -> np.ndarray:
    """Matrix of ``delta -> vech(tau delta^T)``: row ``(i, j)`` is ``tau_i e_j^T``."""
    tau = np.asarray(tau, dtype=float)
    d = tau.shape[0]
    iu, ju = vech_pairs(d)
    M = np.zeros((vech_size(d), d))
    M[np.arange(len(iu)), ju] = tau[iu]
    return M


def build_N(tau) -> np.ndarray:
    """Matrix of ``delta -> vech(delta tau^T)``: row ``(i, j)`` is ``tau_j e_i^T``."""
    tau = np.asarray(tau, dtype=float)
    d = tau.shape[0]
    iu, ju = vech_pairs(d)
    N = np.zeros((vech_size(d), d))
    N[np.arange(len(iu)), iu] = tau[ju]
    return N


def vech_outer_jacobian(T: np.ndarray) -> np.ndarray:
    """Batched ``M_tau + N_tau``, shape ``(..., m, d)``."""
    d = T.shape[-1]
    iu, ju = vech_pairs(d)
    rows = np.arange(len(iu))
    out = np.zeros(T.shape[:-1] + (len(iu), d))
    out[..., rows, ju] += T[..., iu]
    out[..., rows, iu] += T[..., ju]
    return out


@dataclass(frozen=True, eq=False)
class QuadraticModel:
    """Parameters of one quadratic map.

    ``Q = [U, V]`` has orthonormal columns; ``U`` is the first ``d`` of them.
    ``Theta`` has shape ``(d(d+1)/2, s)``; ``s = 0`` gives an affine model.
    """

    c: np.ndarray
    Q: np.ndarray
    Theta: np.ndarray
    d: int

    def __post_init__(self):
        c = np.array(self.c, dtype=float).reshape(-1)
        Q = np.array(self.Q, dtype=float)
        if Q.ndim != 2 or Q.shape[0] != c.shape[0]:
            raise ModelError(f"Q has shape {Q.shape}, expected ({c.shape[0]}, d+s)")
        d = int(self.d)
        k = Q.shape[1]
        if d < 1 or k < d:
            raise ModelError(f"need 1 <= d <= d+s, got d={d}, d+s={k}")
        if Q.shape[0] < k:
            raise ModelError(f"ambient dimension {Q.shape[0]} smaller than d+s={k}")
        s = k - d
        Theta = np.array(self.Theta, dtype=float).reshape(vech_size(d), s)
        defect = np.linalg.norm(Q.T @ Q - np.eye(k))
        if defect > ORTHO_TOL:
            raise ModelError(f"Q is not orthonormal (defect {defect:.2e})")
        for a in (c, Q, Theta):
            a.setflags(write=False)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "Theta", Theta)
        object.__setattr__(self, "d", d)

    @property
    def D(self) -> int:
        return self.Q.shape[0]

    @property
    def s(self) -> int:
        return self.Q.shape[1] - self.d

    @property
    def m(self) -> int:
        return vech_size(self.d)

    @property
    def U(self) -> np.ndarray:
        return self.Q[:, : self.d]

    @property
    def V(self) -> np.ndarray:
        return self.Q[:, self.d :]

    def replace(self, **kw) -> "QuadraticModel":
        args = dict(c=self.c, Q=self.Q, Theta=self.Theta, d=self.d)
        args.update(kw)
        return QuadraticModel(**args)

    def linear(self) -> "QuadraticModel":
        """The same model with the quadratic term removed."""
        return self.replace(Theta=np.zeros_like(self.Theta))

    def __call__(self, tau):
        return evaluate(self, tau)


def _as_columns(model: QuadraticModel, tau) -> tuple[np.ndarray, bool]:
    tau = np.asarray(tau, dtype=float)
    if tau.ndim == 1:
        tau = tau[:, None]
        single = True
    elif tau.ndim == 2:
        single = False
    else:
        raise ModelError("tau must be (d,) or (d, n)")
    if tau.shape[0] != model.d:
        raise ModelError(f"tau has dimension {tau.shape[0]}, model expects {model.d}")
    return tau, single


def evaluate_rows(model: QuadraticModel, T: np.ndarray) -> np.ndarray:
    """``f`` applied to latent vectors stacked as rows ``(..., d) -> (..., D)``."""
    out = T @ model.U.T + model.c
    if model.s:
        out = out + (vech_outer(T) @ model.Theta) @ model.V.T
    return out


def evaluate(model: QuadraticModel, tau) -> np.ndarray:
    """Evaluate ``f`` at ``tau`` of shape ``(d,)`` or ``(d, n)``."""
    T, single = _as_columns(model, tau)
    out = evaluate_rows(model, T.T).T
    return out[:, 0] if single else out


def jacobian_tau(model: QuadraticModel, tau) -> np.ndarray:
    """Jacobian ``U + V Theta^T (M_tau + N_tau)`` of shape ``(D, d)``."""
    tau = np.asarray(tau, dtype=float)
    if tau.shape != (model.d,):
        raise ModelError(f"tau must have shape ({model.d},), got {tau.shape}")
    return model.U + model.V @ model.Theta.T @ (build_M(tau) + build_N(tau))


def jacobian_rows(model: QuadraticModel, T: np.ndarray) -> np.ndarray:
    """Batched Jacobians for row-stacked latents, shape ``(..., D, d)``."""
    J = np.broadcast_to(model.U, T.shape[:-1] + model.U.shape)
    if model.s:
        J = J + model.V @ (model.Theta.T @ vech_outer_jacobian(T))
    return J


def theta_to_tensor(Theta, d: int) -> np.ndarray:
    """Symmetric tensor ``A`` of shape ``(s, d, d)`` with
    ``sum_uv A[k,u,v] t_u t_v == (Theta^T vech(t t^T))[k]``.

    Off-diagonal coefficients are split evenly between ``(i, j)`` and ``(j, i)``.
    """
    Theta = np.asarray(Theta, dtype=float)
    m = vech_size(d)
    if Theta.ndim != 2 or Theta.shape[0] != m:
        raise ModelError(f"Theta must have {m} rows for d={d}, got shape {Theta.shape}")
    iu, ju = vech_pairs(d)
    scale = np.where(iu == ju, 1.0, 0.5)
    A = np.zeros((Theta.shape[1], d, d))
    A[:, iu, ju] = (Theta * scale[:, None]).T
    A[:, ju, iu] = (Theta * scale[:, None]).T
    return A


def tensor_to_theta(A) -> np.ndarray:
    """Inverse of :func:`theta_to_tensor`."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 3 or A.shape[1] != A.shape[2]:
        raise ModelError(f"tensor must have shape (s, d, d), got {A.shape}")
    iu, ju = vech_pairs(A.shape[1])
    return np.where(iu == ju, 1.0, 2.0)[:, None] * A[:, iu, ju].T


def hessian_f(model: QuadraticModel) -> np.ndarray:
    """Constant second derivative of ``f``: ``H[r,u,v] = 2 sum_t V[r,t] A[t,u,v]``."""
    A = theta_to_tensor(model.Theta, model.d)
    return 2.0 * np.einsum("rt,tuv->ruv", model.V, A)


def conjugation_matrix(R) -> np.ndarray:
    """``S(R)`` with ``vech((R t)(R t)^T) = S(R) vech(t t^T)`` for all ``t``."""
    R = np.asarray(R, dtype=float)
    if R.ndim != 2 or R.shape[0] != R.shape[1]:
        raise ModelError("R must be square")
    d = R.shape[0]
    if np.linalg.norm(R.T @ R - np.eye(d)) > 1e-10:
        raise ModelError("R is not orthogonal")
    iu, ju = vech_pairs(d)
    S = np.empty((len(iu), len(iu)))
    for col, (i, j) in enumerate(zip(iu, ju)):
        # t t^T = sum_{i<=j} phi_ij E_ij with E_ij = e_i e_j^T + e_j e_i^T off the diagonal
        E = np.zeros((d, d))
        E[i, j] = E[j, i] = 1.0
        S[:, col] = (R @ E @ R.T)[iu, ju]
    return S


def reparameterize(model: QuadraticModel, R) -> QuadraticModel:
    """Equivalent model in rotated latent coordinates ``eta = R tau``.

    Returns ``(c, U R^T, V, S(R)^{-T} Theta)`` so that
    ``evaluate(model, t) == evaluate(new, R @ t)``.
    """
    R = np.asarray(R, dtype=float)
    if R.shape != (model.d, model.d):
        raise ModelError(f"R must be ({model.d}, {model.d})")
    S = conjugation_matrix(R)
    try:
        Theta_R = np.linalg.solve(S.T, model.Theta) if model.s else model.Theta
    except np.linalg.LinAlgError as exc:
        raise ModelError("S(R) is singular") from exc
    Q = np.hstack([model.U @ R.T, model.V])
    return model.replace(Q=Q, Theta=Theta_R)
