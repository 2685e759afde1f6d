"""Dense symmetric-matrix kernels used by every solver.

All functions are pure: inputs are never modified and results are fresh
arrays. Factorizations go through LAPACK (via :mod:`scipy.linalg`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .exceptions import (
    DimensionMismatch,
    FullRowRank,
    IndefiniteInput,
    NotPositiveDefinite,
)

# eigenvalues in [-PSD_CLAMP * |A|, 0) are treated as exact zeros
PSD_CLAMP = 1e-10
PSD_REJECT = 1e-8


def _square(A, name="A"):
    A = np.asarray(A, dtype=float)
    if A.ndim == 0:
        A = A.reshape(1, 1)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {A.shape}")
    return A


def is_symmetric(A, rtol=1e-10) -> bool:
    A = np.asarray(A, dtype=float)
    scale = max(np.abs(A).max(initial=0.0), 1.0)
    return bool(np.all(np.abs(A - A.T) <= rtol * scale))


def cholesky(A) -> np.ndarray:
    """Lower Cholesky factor ``L`` with ``L @ L.T == A``.

    Raises
    ------
    NotPositiveDefinite
        If ``A`` is singular or indefinite.
    """
    A = _square(A)
    try:
        L = sla.cholesky(A, lower=True, check_finite=True)
    except (sla.LinAlgError, ValueError) as exc:
        raise NotPositiveDefinite(str(exc)) from None
    diag = np.diag(L)
    scale = np.sqrt(np.abs(np.diag(A)).max(initial=0.0))
    if not np.all(diag > np.finfo(float).eps * max(scale, 1e-300)):
        raise NotPositiveDefinite("non-positive pivot in Cholesky factorization")
    return L


def _clamped_eigh(A, name="A"):
    A = _square(A, name)
    w, Q = np.linalg.eigh((A + A.T) / 2)
    norm = np.abs(w).max(initial=0.0)
    if w.size and w[0] < -PSD_REJECT * norm:
        raise IndefiniteInput(
            f"{name} has eigenvalue {w[0]:.3e} below -{PSD_REJECT:g}*|{name}|"
        )
    return np.clip(w, 0.0, None), Q


def sym_sqrt(A) -> np.ndarray:
    """Symmetric positive semidefinite square root of a PSD matrix."""
    w, Q = _clamped_eigh(A)
    S = (Q * np.sqrt(w)) @ Q.T
    return (S + S.T) / 2


def psd_rank(A, rtol=PSD_CLAMP) -> int:
    """Numerical rank of a PSD matrix by eigenvalue thresholding."""
    w = np.linalg.eigvalsh(_square(A))
    if w.size == 0:
        return 0
    top = np.abs(w).max()
    if top == 0:
        return 0
    return int(np.count_nonzero(w > rtol * top))


def is_psd(A) -> bool:
    try:
        _clamped_eigh(A)
    except IndefiniteInput:
        return False
    return True


@dataclass(frozen=True)
class CongruencePair:
    """Result of a simultaneous congruence decomposition.

    ``U.T @ V1 @ U == diag(d)`` and ``U.T @ V2 @ U == I``; ``d`` ascending.
    Columns of ``U`` are unique only up to sign when the ``d`` are distinct.
    """

    d: np.ndarray
    U: np.ndarray


def congruence_decomp(V1, V2) -> CongruencePair:
    """Generalized eigendecomposition of the pair ``(V1, V2)`` with ``V2`` PD.

    ``V2`` is Cholesky-reduced, ``V2 = K K^T``; the standard symmetric
    problem ``K^{-1} V1 K^{-T} = Q diag(d) Q^T`` is solved and
    ``U = K^{-T} Q``.
    """
    V1 = _square(V1, "V1")
    V2 = _square(V2, "V2")
    if V1.shape != V2.shape:
        raise DimensionMismatch(f"V1 {V1.shape} and V2 {V2.shape} differ")
    K = cholesky(V2)
    C = sla.solve_triangular(K, V1, lower=True)
    C = sla.solve_triangular(K, C.T, lower=True)
    d, Q = np.linalg.eigh((C + C.T) / 2)
    U = sla.solve_triangular(K.T, Q, lower=False)
    return CongruencePair(d=d, U=U)


def riccati_solve(A, B, factor="cholesky") -> np.ndarray:
    """Unique positive definite ``X`` with ``X^{-1} A X^{-1} = B``.

    Equivalently ``X B X = A``. The default route is
    ``X = L^{-T} (L^T A L)^{1/2} L^{-1}`` with ``L`` the Cholesky factor of
    ``B``; ``factor="sqrt"`` substitutes the symmetric square root of ``B``
    for ``L`` (same solution, more work).
    """
    A = _square(A, "A")
    B = _square(B, "B")
    if A.shape != B.shape:
        raise DimensionMismatch(f"A {A.shape} and B {B.shape} differ")
    if factor == "cholesky":
        L = cholesky(B)
        inner = L.T @ A @ L
    elif factor == "sqrt":
        cholesky(B)  # positive definiteness check
        L = sym_sqrt(B)
        inner = L @ A @ L
    else:
        raise ValueError(f"unknown factor {factor!r}")
    w, Q = np.linalg.eigh((inner + inner.T) / 2)
    if w[-1] <= 0 or w[0] <= len(w) * np.finfo(float).eps * w[-1]:
        raise NotPositiveDefinite("Riccati right-hand side A is not positive definite")
    S = (Q * np.sqrt(w)) @ Q.T
    if factor == "cholesky":
        X = sla.solve_triangular(L, S, lower=True, trans="T")
        X = sla.solve_triangular(L, X.T, lower=True, trans="T")
    else:
        Linv = np.linalg.inv(L)
        X = Linv @ S @ Linv
    return (X + X.T) / 2


def riccati_solve_factored(N, B) -> np.ndarray:
    """Positive semidefinite ``X`` with ``X B X = N^T N`` for PD ``B``.

    Same solution as ``riccati_solve(N.T @ N, B)`` but taken from the
    singular values of ``N L`` (``L`` the Cholesky factor of ``B``) rather
    than the eigenvalues of ``L^T N^T N L``, so eigenvalues of ``X`` far
    below ``sqrt(eps)`` times its largest stay resolved. Rank-deficient
    ``N`` gives a singular ``X`` instead of an error.
    """
    N = np.atleast_2d(np.asarray(N, dtype=float))
    B = _square(B, "B")
    if N.shape[1] != B.shape[0]:
        raise DimensionMismatch(f"N has {N.shape[1]} columns, B has order {B.shape[0]}")
    L = cholesky(B)
    _, s, Qt = np.linalg.svd(N @ L, full_matrices=False)
    T = sla.solve_triangular(L, Qt.T, lower=True, trans="T") * np.sqrt(s)
    return T @ T.T


def hadamard_trace(A, B) -> float:
    """``tr(A B)`` for symmetric operands, computed as ``1^T (A * B) 1``."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape:
        raise DimensionMismatch(f"A {A.shape} and B {B.shape} differ")
    return float(np.sum(A * B))


def nullspace_basis(X, rtol=None) -> np.ndarray:
    """Orthonormal basis of ``null(X^T)``, shape ``(n, n - rank(X))``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    if p == 0:
        return np.eye(n)
    U, s, _ = np.linalg.svd(X, full_matrices=True)
    if rtol is None:
        rtol = max(n, p) * np.finfo(float).eps
    r = int(np.count_nonzero(s > rtol * s.max())) if s.size and s.max() > 0 else 0
    if r >= n:
        raise FullRowRank(f"design of shape {X.shape} has rank {r} = n")
    return U[:, r:].copy()
