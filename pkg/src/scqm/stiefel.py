"""Geometry of the Stiefel manifold of orthonormal ``D x k`` frames."""

from __future__ import annotations

import numpy as np

RANK_TOL = 1e-12


class RankDeficientError(np.linalg.LinAlgError):
    """The retraction input lost column rank; shrink the step and retry."""


def sym(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def tangent_project(Q: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Project ``G`` onto the tangent space at ``Q``: ``G - Q sym(Q^T G)``.

    Works on stacks ``(..., D, k)``.
    """
    Q = np.asarray(Q, dtype=float)
    G = np.asarray(G, dtype=float)
    if Q.shape != G.shape:
        raise ValueError(f"shape mismatch: Q {Q.shape} vs G {G.shape}")
    return G - Q @ sym(np.swapaxes(Q, -1, -2) @ G)


def retract_qr_batch(Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sign-fixed thin QR of each ``(D, k)`` matrix in a stack.

    Returns the orthonormal factors and a boolean mask that is False where
    some ``|R_ii|`` fell below ``RANK_TOL`` (those factors are unusable).
    """
    Y = np.asarray(Y, dtype=float)
    Qt, R = np.linalg.qr(Y, mode="reduced")
    diag = np.diagonal(R, axis1=-2, axis2=-1)
    ok = np.all(np.abs(diag) > RANK_TOL, axis=-1)
    signs = np.where(diag < 0, -1.0, 1.0)
    return Qt * signs[..., None, :], ok


def retract_qr(Y: np.ndarray) -> np.ndarray:
    """QR retraction with the diagonal of ``R`` made positive.

    Raises
    ------
    RankDeficientError
        If ``Y`` is numerically rank deficient.
    """
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2 or Y.shape[0] < Y.shape[1]:
        raise ValueError(f"retraction needs a tall matrix, got shape {Y.shape}")
    Q, ok = retract_qr_batch(Y)
    if not ok:
        raise RankDeficientError("retraction input is rank deficient")
    return Q


def orthonormality_defect(Q: np.ndarray) -> np.ndarray:
    """``||Q^T Q - I||_F`` (stack-aware)."""
    k = Q.shape[-1]
    return np.linalg.norm(np.swapaxes(Q, -1, -2) @ Q - np.eye(k), axis=(-2, -1))
