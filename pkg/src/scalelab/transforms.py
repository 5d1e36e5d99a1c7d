"""Score-preserving transforms of queries and keys.

Both transforms leave ``Q @ K.T`` unchanged: an orthonormal Hadamard rotation
applied to both sides, and an invertible ``R`` with ``Q' = Q R^-T``,
``K' = K R`` chosen to minimize ``tr(R^-1 X R^-T) * tr(R^T Y R)`` for the
second-moment matrices ``X`` of queries and ``Y`` of keys.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "TransformError",
    "Reparameterization",
    "QKTransform",
    "hadamard",
    "sym_eig",
    "sym_power",
    "build_reparameterization",
    "estimate_moments",
    "joint_objective",
    "build_qk_transform",
]

EIG_FLOOR = 1e-6


class TransformError(ValueError):
    pass


def hadamard(d: int) -> np.ndarray:
    """Sylvester Hadamard matrix scaled to be orthonormal."""
    if d < 1 or d & (d - 1):
        raise TransformError(f"Hadamard size must be a power of two, got {d}")
    H = np.ones((1, 1))
    while H.shape[0] < d:
        H = np.block([[H, H], [H, -H]])
    return H / np.sqrt(d)


def _check_symmetric(A: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise TransformError(f"expected a square matrix, got shape {A.shape}")
    scale = max(np.max(np.abs(A)), 1e-300)
    if np.max(np.abs(A - A.T)) > 1e-12 * scale:
        raise TransformError("matrix is not symmetric")
    return (A + A.T) / 2


def sym_eig(A) -> tuple[np.ndarray, np.ndarray]:
    """Ascending eigenvalues and orthonormal eigenvectors of a symmetric matrix."""
    A = _check_symmetric(A)
    try:
        lam, E = np.linalg.eigh(A)
    except np.linalg.LinAlgError as exc:
        raise TransformError(f"eigendecomposition did not converge: {exc}") from exc
    norm = np.linalg.norm(A)
    resid = np.linalg.norm(E @ np.diag(lam) @ E.T - A)
    if resid > 1e-9 * max(norm, 1e-300):
        raise TransformError(f"eigendecomposition residual {resid:.3e} exceeds tolerance")
    return lam, E


def _floored_eig(A):
    lam, E = sym_eig(A)
    d = A.shape[0]
    tr = float(np.trace(A))
    if lam[0] < -1e-10 * max(tr, 0.0) / d:
        raise TransformError(f"matrix is not positive semi-definite (min eigenvalue {lam[0]:.3e})")
    eps = EIG_FLOOR * tr / d
    if eps <= 0:
        raise TransformError("matrix has zero trace")
    return np.maximum(lam, eps), E


def sym_power(A, p: float) -> np.ndarray:
    """``A**p`` for p in {1/2, -1/2}, with eigenvalues floored at 1e-6 * trace / d."""
    if p not in (0.5, -0.5):
        raise TransformError("only powers 1/2 and -1/2 are supported")
    lam, E = _floored_eig(A)
    return (E * lam**p) @ E.T


@dataclass(frozen=True)
class Reparameterization:
    R: np.ndarray
    R_inv: np.ndarray
    tr_S: float
    singular_values: np.ndarray


def build_reparameterization(X, Y) -> Reparameterization:
    """Optimal ``R`` from the SVD of ``X^1/2 Y^1/2``.

    Only the right singular vectors are needed; they are the eigenvectors of
    ``M^T M = Y^1/2 X Y^1/2``, whose eigenvalues are the squared singular values.
    """
    X = _check_symmetric(X)
    Y = _check_symmetric(Y)
    if X.shape != Y.shape:
        raise TransformError(f"dimension mismatch: {X.shape} vs {Y.shape}")
    lam_y, E_y = _floored_eig(Y)
    Y_half = (E_y * np.sqrt(lam_y)) @ E_y.T
    Y_inv_half = (E_y / np.sqrt(lam_y)) @ E_y.T
    X_half = sym_power(X, 0.5)
    M = X_half @ Y_half
    G = M.T @ M
    lam, V = sym_eig((G + G.T) / 2)
    lam, V = lam[::-1], V[:, ::-1]
    s = np.sqrt(np.maximum(lam, 0.0))
    floor = 1e-12 * max(s[0], 1e-300)
    if s[0] <= 0:
        raise TransformError("X^1/2 Y^1/2 is zero")
    s_safe = np.maximum(s, floor)
    R = Y_inv_half @ V * np.sqrt(s_safe)
    R_inv = (V.T / np.sqrt(s_safe)[:, None]) @ Y_half
    return Reparameterization(R, R_inv, float(np.sum(s)), s)


def estimate_moments(samples) -> np.ndarray:
    """Second-moment matrix ``(1/n) sum v v^T`` of the rows of ``samples``."""
    S = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if S.shape[0] == 0:
        raise TransformError("no samples")
    M = S.T @ S / S.shape[0]
    return (M + M.T) / 2


def joint_objective(M, X, Y) -> float:
    Mi = np.linalg.inv(M)
    return float(np.trace(Mi @ X @ Mi.T) * np.trace(M.T @ Y @ M))


@dataclass(frozen=True)
class QKTransform:
    """Matrices applied on the right: ``Q' = Q @ q_matrix``, ``K' = K @ k_matrix``."""

    q_matrix: np.ndarray
    k_matrix: np.ndarray

    def apply_q(self, Q):
        return np.asarray(Q) @ self.q_matrix

    def apply_k(self, K):
        return np.asarray(K) @ self.k_matrix

    @classmethod
    def identity(cls, d: int) -> QKTransform:
        return cls(np.eye(d), np.eye(d))


def build_qk_transform(d: int, use_ip: bool, use_reparam: bool,
                       q_samples=None, k_samples=None) -> QKTransform:
    """Hadamard rotation first, then the reparameterization fitted on rotated samples."""
    q_mat = np.eye(d)
    k_mat = np.eye(d)
    if use_ip:
        H = hadamard(d)
        q_mat, k_mat = H, H.copy()
    if use_reparam:
        if q_samples is None or k_samples is None:
            raise TransformError("the reparameterization needs calibration samples of Q and K")
        X = estimate_moments(np.asarray(q_samples) @ q_mat)
        Y = estimate_moments(np.asarray(k_samples) @ k_mat)
        rep = build_reparameterization(X, Y)
        q_mat = q_mat @ rep.R_inv.T
        k_mat = k_mat @ rep.R
    return QKTransform(q_mat, k_mat)
