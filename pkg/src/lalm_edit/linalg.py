"""Closed-form solvers used by the editors.

Everything here is a pure numpy function on float64 arrays.  Matrices follow
the ``h = W k`` convention: ``W`` has shape ``(d_out, d_in)`` and keys are
stored column-wise, so a batch of ``n`` keys is a ``(d_in, n)`` matrix.
"""
from __future__ import annotations

import warnings

import numpy as np


class DegenerateKeyError(ValueError):
    pass


class EmptyNullSpaceWarning(UserWarning):
    pass


def _as_matrix(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def _as_vector(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def default_ridge(k) -> float:
    """Key-norm-relative ridge weight, ``1e-4 * ||k||^2``."""
    k = _as_vector(k, "k")
    return 1e-4 * float(k @ k)


def ridge_rank_one_update(R, k, lam: float | None = None, exact: bool = True) -> np.ndarray:
    """Minimal-norm rank-one update ``R k^T (k k^T + lam I)^-1``.

    Uses ``(k k^T + lam I)^-1 k = k / (lam + ||k||^2)`` so no ``d x d``
    inverse is formed.  With ``exact=True`` the residual is rescaled by
    ``(lam + ||k||^2) / ||k||^2`` so that ``delta @ k == R`` up to rounding.
    """
    R = _as_vector(R, "R")
    k = _as_vector(k, "k")
    kk = float(k @ k)
    if kk == 0.0:
        raise DegenerateKeyError("degenerate key")
    if lam is None:
        lam = 1e-4 * kk
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    denom = lam + kk
    if exact:
        R = R * (denom / kk)
    return np.outer(R, k / denom)


def null_space_projector(K0, tol: float = 1e-8) -> tuple[np.ndarray, bool]:
    """Projector onto the approximate null space of ``K0 K0^T``.

    Keeps eigenvectors whose eigenvalue is below ``tol`` times the largest
    one.  Returns ``(P, empty)``; ``empty`` is True (with a warning) when no
    direction survives, in which case ``P`` is the zero matrix.
    """
    K0 = _as_matrix(K0, "K0")
    d, n0 = K0.shape
    if n0 < 1:
        raise ValueError("K0 needs at least one column")
    evals, evecs = np.linalg.eigh(K0 @ K0.T)
    top = evals[-1]
    if top <= 0.0:
        return np.eye(d), False
    keep = evals < tol * top
    if not keep.any():
        warnings.warn("empty null space", EmptyNullSpaceWarning, stacklevel=2)
        return np.zeros((d, d)), True
    U = evecs[:, keep]
    P = U @ U.T
    # symmetrize away eigh round-off
    return 0.5 * (P + P.T), False


def multi_edit_objective(delta, W, K1, V1, Kp, Vp, P=None) -> float:
    """Preservation-constrained editing objective for an update of the form ``delta @ P``.

    ``||(W + dP) K1 - V1||^2 + ||(W + dP) Kp - Vp||^2 + ||dP||^2``
    """
    dP = delta if P is None else delta @ P
    val = np.sum(((W + dP) @ K1 - V1) ** 2) + np.sum(dP**2)
    if Kp is not None and Kp.shape[1]:
        val += np.sum(((W + dP) @ Kp - Vp) ** 2)
    return float(val)


def multi_edit_solve(W, K1, V1, Kp=None, Vp=None, P=None) -> np.ndarray:
    """Closed-form minimizer of :func:`multi_edit_objective` restricted to ``delta = X P``.

    Solves ``X (P A P + I) = B P`` with ``A = K1 K1^T + Kp Kp^T`` and
    ``B = (V1 - W K1) K1^T + (Vp - W Kp) Kp^T``, then returns ``X P``.
    ``Kp``/``Vp`` can be None or have zero columns.
    """
    W = _as_matrix(W, "W")
    K1 = _as_matrix(K1, "K1")
    V1 = _as_matrix(V1, "V1")
    d_out, d_in = W.shape
    if K1.shape[0] != d_in or V1.shape[0] != d_out or K1.shape[1] != V1.shape[1]:
        raise ValueError(f"dimension mismatch: W {W.shape}, K1 {K1.shape}, V1 {V1.shape}")
    if Kp is None or Vp is None:
        Kp = np.zeros((d_in, 0))
        Vp = np.zeros((d_out, 0))
    Kp = np.asarray(Kp, dtype=np.float64).reshape(d_in, -1)
    Vp = np.asarray(Vp, dtype=np.float64).reshape(d_out, -1)
    if Kp.shape[1] != Vp.shape[1]:
        raise ValueError(f"dimension mismatch: Kp {Kp.shape}, Vp {Vp.shape}")
    P = np.eye(d_in) if P is None else _as_matrix(P, "P")
    if P.shape != (d_in, d_in):
        raise ValueError(f"P must be {(d_in, d_in)}, got {P.shape}")

    A = K1 @ K1.T + Kp @ Kp.T
    B = (V1 - W @ K1) @ K1.T + (Vp - W @ Kp) @ Kp.T
    M = P @ A @ P + np.eye(d_in)
    # M is symmetric with eigenvalues >= 1
    assert np.linalg.cond(M) < 1e12, "ill-conditioned normal matrix"
    X = np.linalg.solve(M, (B @ P).T).T
    return X @ P
