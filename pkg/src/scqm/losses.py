"""Column-wise loss functions with gradients and Hessians.

Every routine takes residuals ``r`` whose *last* axis is the ambient
dimension, so a single vector ``(D,)`` and a stack ``(..., D)`` are handled
by the same code.  Values reduce over the last axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

KINDS = ("l1", "l2", "l2sq", "lpp", "mahalanobis", "huber")


class LossError(ValueError):
    """Invalid loss parameters or inputs."""


@dataclass(frozen=True)
class LossSpec:
    """An immutable loss selection.

    Parameters
    ----------
    kind : str
        One of ``l1``, ``l2``, ``l2sq``, ``lpp``, ``mahalanobis``, ``huber``.
    p : float, optional
        Exponent of the ``lpp`` loss, ``p >= 1``.
    M : ndarray, optional
        Symmetric positive-definite weight of the ``mahalanobis`` loss.
    delta : float, optional
        Threshold of the ``huber`` loss.
    eps_guard : float
        Floor applied to ``|r_k|`` (lpp) and ``||r||`` (l2) where the
        Hessian formula is singular.
    """

    kind: str
    p: Optional[float] = None
    M: Optional[np.ndarray] = field(default=None, compare=False)
    delta: Optional[float] = None
    eps_guard: float = 1e-12

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise LossError(f"unknown loss kind {self.kind!r}")
        if kind == "lpp":
            if self.p is None or not np.isfinite(self.p) or self.p < 1:
                raise LossError("lpp loss requires p >= 1")
            object.__setattr__(self, "p", float(self.p))
        if kind == "huber":
            if self.delta is None or not self.delta > 0:
                raise LossError("huber loss requires delta > 0")
            object.__setattr__(self, "delta", float(self.delta))
        if kind == "mahalanobis":
            if self.M is None:
                raise LossError("mahalanobis loss requires a matrix M")
            M = np.array(self.M, dtype=float)
            if M.ndim != 2 or M.shape[0] != M.shape[1]:
                raise LossError("M must be square")
            if not np.allclose(M, M.T, rtol=0, atol=1e-12 * max(1.0, np.abs(M).max())):
                raise LossError("M must be symmetric")
            try:
                np.linalg.cholesky(M)
            except np.linalg.LinAlgError:
                raise LossError("M must be positive definite") from None
            M.setflags(write=False)
            object.__setattr__(self, "M", M)
        if not self.eps_guard > 0:
            raise LossError("eps_guard must be positive")

    # Convenience accessors so call sites read ``loss.value(r)``.
    def value(self, r):
        return loss_value(self, r)

    def gradient(self, r):
        return loss_gradient(self, r)

    def hessian(self, r):
        return loss_hessian(self, r)

    @property
    def smooth(self) -> bool:
        """Whether the Hessian exists everywhere (no kinks)."""
        return self.kind in ("l2sq", "mahalanobis") or (
            self.kind == "lpp" and self.p >= 2
        )

    def __str__(self):
        return format_loss(self)


def _check(loss: LossSpec, r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if r.ndim == 0:
        raise LossError("residual must be at least 1-D")
    if not np.all(np.isfinite(r)):
        raise LossError("residual has non-finite entries")
    if loss.kind == "mahalanobis" and r.shape[-1] != loss.M.shape[0]:
        raise LossError(
            f"residual dimension {r.shape[-1]} does not match M of size {loss.M.shape[0]}"
        )
    return r


def _value(loss: LossSpec, r: np.ndarray) -> np.ndarray:
    kind = loss.kind
    if kind == "l1":
        return np.abs(r).sum(axis=-1)
    if kind == "l2":
        return np.sqrt((r * r).sum(axis=-1))
    if kind == "l2sq":
        return (r * r).sum(axis=-1)
    if kind == "lpp":
        return (np.abs(r) ** loss.p).sum(axis=-1)
    if kind == "mahalanobis":
        return np.einsum("...i,ij,...j->...", r, loss.M, r)
    # huber
    nrm = np.sqrt((r * r).sum(axis=-1))
    dl = loss.delta
    return np.where(nrm <= dl, 0.5 * nrm**2, dl * nrm - 0.5 * dl**2)


def _gradient(loss: LossSpec, r: np.ndarray) -> np.ndarray:
    kind = loss.kind
    if kind == "l1":
        return np.sign(r)
    if kind == "l2":
        nrm = np.sqrt((r * r).sum(axis=-1, keepdims=True))
        safe = np.where(nrm > 0, nrm, 1.0)
        return np.where(nrm > 0, r / safe, 0.0)
    if kind == "l2sq":
        return 2.0 * r
    if kind == "lpp":
        return loss.p * np.abs(r) ** (loss.p - 1) * np.sign(r)
    if kind == "mahalanobis":
        return 2.0 * r @ loss.M
    nrm = np.sqrt((r * r).sum(axis=-1, keepdims=True))
    dl = loss.delta
    return np.where(nrm <= dl, r, dl * r / np.where(nrm > 0, nrm, 1.0))


def _l2_hessian(r: np.ndarray, eps: float) -> np.ndarray:
    D = r.shape[-1]
    eye = np.eye(D)
    nrm = np.sqrt((r * r).sum(axis=-1))[..., None, None]
    safe = np.where(nrm >= eps, nrm, 1.0)
    outer = r[..., :, None] * r[..., None, :]
    H = (eye - outer / safe**2) / safe
    return np.where(nrm >= eps, H, eye / eps)


def _hessian(loss: LossSpec, r: np.ndarray) -> np.ndarray:
    D = r.shape[-1]
    lead = r.shape[:-1]
    kind = loss.kind
    if kind == "l1":
        return np.zeros(lead + (D, D))
    if kind == "l2":
        return _l2_hessian(r, loss.eps_guard)
    if kind == "l2sq":
        return np.broadcast_to(2.0 * np.eye(D), lead + (D, D)).copy()
    if kind == "mahalanobis":
        return np.broadcast_to(2.0 * loss.M, lead + (D, D)).copy()
    if kind == "lpp":
        p = loss.p
        a = np.abs(r)
        if p < 2:
            a = np.maximum(a, loss.eps_guard)
        diag = p * (p - 1) * a ** (p - 2)
        H = np.zeros(lead + (D, D))
        idx = np.arange(D)
        H[..., idx, idx] = diag
        return H
    nrm = np.sqrt((r * r).sum(axis=-1))[..., None, None]
    inner = np.broadcast_to(np.eye(D), lead + (D, D))
    outer = loss.delta * _l2_hessian(r, loss.eps_guard)
    return np.where(nrm <= loss.delta, inner, outer)


def loss_value(loss: LossSpec, r) -> np.ndarray:
    """Loss value, reduced over the last axis."""
    return _value(loss, _check(loss, r))


def loss_gradient(loss: LossSpec, r) -> np.ndarray:
    """Gradient; at kinks the minimum-norm subgradient (zero) is returned."""
    return _gradient(loss, _check(loss, r))


def loss_hessian(loss: LossSpec, r) -> np.ndarray:
    """Hessian with trailing shape ``(D, D)``.

    ``l1`` returns zeros (the formula holds almost everywhere).  ``lpp`` with
    ``p < 2`` floors ``|r_k|`` at ``eps_guard``; ``l2`` returns
    ``I / eps_guard`` when ``||r|| < eps_guard``.
    """
    return _hessian(loss, _check(loss, r))


def parse_loss(text: str) -> LossSpec:
    """Parse ``"lpp:p=1.5"``, ``"l2"``, ``"huber:delta=1.0"`` and the like.

    Mahalanobis weights are written row by row, ``"mahalanobis:M=2,0;0,1"``.
    """
    text = text.strip()
    kind, _, rest = text.partition(":")
    kind = kind.strip().lower()
    params = {}
    if rest:
        for item in rest.split(":"):
            key, eq, val = item.partition("=")
            if not eq:
                raise LossError(f"malformed loss parameter {item!r} in {text!r}")
            params[key.strip()] = val.strip()
    try:
        if kind == "lpp":
            return LossSpec("lpp", p=float(params.pop("p")), **_eps(params))
        if kind == "huber":
            return LossSpec("huber", delta=float(params.pop("delta")), **_eps(params))
        if kind == "mahalanobis":
            rows = [[float(v) for v in row.split(",")] for row in params.pop("M").split(";")]
            return LossSpec("mahalanobis", M=np.array(rows), **_eps(params))
    except KeyError as exc:
        raise LossError(f"loss {text!r} is missing parameter {exc.args[0]}") from None
    if kind in ("l1", "l2", "l2sq"):
        return LossSpec(kind, **_eps(params))
    raise LossError(f"unknown loss {text!r}")


def _eps(params: dict) -> dict:
    out = {}
    if "eps" in params:
        out["eps_guard"] = float(params.pop("eps"))
    if params:
        raise LossError(f"unexpected loss parameters {sorted(params)}")
    return out


def format_loss(loss: LossSpec) -> str:
    """Inverse of :func:`parse_loss` (floats written with ``repr``)."""
    suffix = "" if loss.eps_guard == 1e-12 else f":eps={loss.eps_guard!r}"
    if loss.kind == "lpp":
        return f"lpp:p={loss.p!r}{suffix}"
    if loss.kind == "huber":
        return f"huber:delta={loss.delta!r}{suffix}"
    if loss.kind == "mahalanobis":
        rows = ";".join(",".join(repr(float(v)) for v in row) for row in loss.M)
        return f"mahalanobis:M={rows}{suffix}"
    return loss.kind + suffix
