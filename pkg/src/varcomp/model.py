"""Univariate variance components model: data, likelihood and diagnostics.

The model is ``y ~ N(X beta, Omega)`` with ``Omega = sum_i sigma2[i] * V[i]``.
Log-likelihoods omit the ``-(n/2) ln(2 pi)`` constant throughout, so values
differ from most mixed-model packages by exactly that amount.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import linalg as sla

from . import linalg
from .exceptions import (
    DimensionMismatch,
    IndefiniteInput,
    NotPositiveDefinite,
    RankDeficientDesign,
    SingularOmega,
)


def check_design(X, n):
    """Validated ``(n, p)`` float design, or ``None`` when absent or empty."""
    if X is None:
        return None
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != n:
        raise DimensionMismatch(f"X has {X.shape[0]} rows, response has {n}")
    if X.shape[1] == 0:
        return None
    if not np.all(np.isfinite(X)):
        raise ValueError("X has non-finite entries")
    if X.shape[1] >= n or np.linalg.matrix_rank(X) < X.shape[1]:
        raise RankDeficientDesign(f"X of shape {X.shape} is not full column rank < n")
    return X


def check_bases(V, n) -> tuple:
    """Validated tuple of symmetric PSD ``(n, n)`` covariance bases."""
    V = tuple(np.asarray(Vi, dtype=float) for Vi in V)
    if len(V) == 0:
        raise DimensionMismatch("at least one covariance basis is required")
    for i, Vi in enumerate(V):
        if Vi.shape != (n, n):
            raise DimensionMismatch(f"V[{i}] has shape {Vi.shape}, expected {(n, n)}")
        if not np.all(np.isfinite(Vi)):
            raise ValueError(f"V[{i}] has non-finite entries")
        if not linalg.is_symmetric(Vi):
            raise ValueError(f"V[{i}] is not symmetric")
        if not linalg.is_psd(Vi):
            raise IndefiniteInput(f"V[{i}] is not positive semidefinite")
    return V


@dataclass(frozen=True, eq=False)
class VarCompProblem:
    """Response ``y``, optional design ``X`` and covariance bases ``V``.

    ``X=None`` (or a design with zero columns) gives the mean-free model
    used by REML after projection.
    """

    y: np.ndarray
    X: np.ndarray | None
    V: tuple

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if not np.all(np.isfinite(y)):
            raise ValueError("y has non-finite entries")
        n = y.shape[0]
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", check_design(self.X, n))
        object.__setattr__(self, "V", check_bases(self.V, n))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def m(self) -> int:
        return len(self.V)

    @property
    def p(self) -> int:
        return 0 if self.X is None else self.X.shape[1]

    @cached_property
    def V_stack(self) -> np.ndarray:
        return np.stack(self.V)

    @cached_property
    def ranks(self) -> np.ndarray:
        return np.array([linalg.psd_rank(Vi) for Vi in self.V])

    def residual(self, beta) -> np.ndarray:
        if self.X is None:
            return self.y.copy()
        return self.y - self.X @ np.asarray(beta, dtype=float)


@dataclass
class Parameters:
    beta: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float).reshape(-1)
        self.sigma2 = np.asarray(self.sigma2, dtype=float).reshape(-1)
        if np.any(self.sigma2 < 0):
            raise ValueError("variance components must be nonnegative")


@dataclass(frozen=True, eq=False)
class OmegaFactor:
    omega: np.ndarray
    chol: np.ndarray
    log_det: float

    def solve(self, b) -> np.ndarray:
        return sla.cho_solve((self.chol, True), b, check_finite=False)

    @cached_property
    def inverse(self) -> np.ndarray:
        inv = self.solve(np.eye(self.omega.shape[0]))
        return (inv + inv.T) / 2


def factor_omega(omega) -> OmegaFactor:
    try:
        L = linalg.cholesky(omega)
    except NotPositiveDefinite as exc:
        raise SingularOmega(f"covariance is not positive definite ({exc})") from None
    return OmegaFactor(omega=omega, chol=L, log_det=2.0 * float(np.sum(np.log(np.diag(L)))))


def assemble_omega(problem: VarCompProblem, sigma2) -> OmegaFactor:
    """Form ``sum_i sigma2[i] V[i]`` and factor it."""
    sigma2 = np.asarray(sigma2, dtype=float).reshape(-1)
    if sigma2.shape[0] != problem.m:
        raise DimensionMismatch(f"expected {problem.m} variance components, got {sigma2.shape[0]}")
    if np.any(sigma2 < 0):
        raise ValueError("variance components must be nonnegative")
    omega = np.tensordot(sigma2, problem.V_stack, axes=1)
    return factor_omega(omega)


def _omega_for(problem, params, omega):
    return assemble_omega(problem, params.sigma2) if omega is None else omega


def log_likelihood(problem: VarCompProblem, params: Parameters, omega=None) -> float:
    """``-1/2 ln det Omega - 1/2 r^T Omega^{-1} r`` with ``r = y - X beta``."""
    omega = _omega_for(problem, params, omega)
    r = problem.residual(params.beta)
    return -0.5 * omega.log_det - 0.5 * float(r @ omega.solve(r))


def hadamard_trace_all(W, V_stack) -> np.ndarray:
    """``tr(W V_i)`` for every basis, as elementwise sums of ``W * V_i``."""
    return np.einsum("ij,kij->k", W, V_stack)


def quad_and_trace(problem: VarCompProblem, omega: OmegaFactor, r):
    """Quadratic forms ``r^T W V_i W r`` and traces ``tr(W V_i)``, ``W = inv(Omega)``."""
    u = omega.solve(r)
    q = np.einsum("i,kij,j->k", u, problem.V_stack, u)
    tr = hadamard_trace_all(omega.inverse, problem.V_stack)
    return q, tr


def score_sigma2(problem: VarCompProblem, params: Parameters, omega=None) -> np.ndarray:
    """Gradient of the log-likelihood with respect to the variance components."""
    omega = _omega_for(problem, params, omega)
    q, tr = quad_and_trace(problem, omega, problem.residual(params.beta))
    return 0.5 * (q - tr)


def gls_beta(problem: VarCompProblem, omega: OmegaFactor) -> np.ndarray:
    """Generalized least squares coefficients for the current covariance."""
    if problem.X is None:
        return np.zeros(0)
    L = omega.chol
    Xw = sla.solve_triangular(L, problem.X, lower=True, check_finite=False)
    yw = sla.solve_triangular(L, problem.y, lower=True, check_finite=False)
    Q, R = np.linalg.qr(Xw)
    diag = np.abs(np.diag(R))
    if diag.min() <= max(Xw.shape) * np.finfo(float).eps * diag.max():
        raise RankDeficientDesign("whitened design is rank deficient")
    return sla.solve_triangular(R, Q.T @ yw, lower=False, check_finite=False)


def kkt_residual(problem: VarCompProblem, params: Parameters, omega=None) -> float:
    """Largest violation of the first-order conditions for a maximum.

    Interior components contribute ``|score_i|``; components at (or below
    ``1e-10 * max(sigma2)``) the boundary contribute ``max(score_i, 0)``.
    """
    score = score_sigma2(problem, params, omega)
    return kkt_from_score(params.sigma2, score)


def kkt_from_score(sigma2, score) -> float:
    sigma2 = np.asarray(sigma2, dtype=float)
    tol = 1e-10 * sigma2.max(initial=0.0)
    active = sigma2 <= tol
    viol = np.where(active, np.maximum(score, 0.0), np.abs(score))
    return float(viol.max(initial=0.0))


@dataclass
class FitTrace:
    """Per-iteration record of a fit; ``objective[0]`` is the starting value."""

    objective: list = field(default_factory=list)
    iterations: int = 0
    wall_time: float = 0.0
    kkt_residual: float = float("nan")
    converged: bool = False


@dataclass
class ProfileState:
    """Everything a variance-component step needs at one ``sigma2``.

    ``beta`` is the GLS solution at ``sigma2``; ``q`` and ``tr`` are the
    quadratic forms and traces that every update rule is built from.
    """

    sigma2: np.ndarray
    beta: np.ndarray
    loglik: float
    q: np.ndarray
    tr: np.ndarray
    omega: OmegaFactor | None = None
    _fisher: object = None

    @property
    def score(self) -> np.ndarray:
        return 0.5 * (self.q - self.tr)

    def fisher(self) -> np.ndarray:
        return self._fisher()


class DenseEvaluator:
    """Evaluates :class:`ProfileState` with one dense Cholesky per call."""

    def __init__(self, problem: VarCompProblem):
        self.problem = problem
        self.n_factorizations = 0

    def __call__(self, sigma2) -> ProfileState:
        problem = self.problem
        sigma2 = np.asarray(sigma2, dtype=float)
        omega = assemble_omega(problem, sigma2)
        self.n_factorizations += 1
        beta = gls_beta(problem, omega)
        r = problem.residual(beta)
        u = omega.solve(r)
        loglik = -0.5 * omega.log_det - 0.5 * float(r @ u)
        q = np.einsum("i,kij,j->k", u, problem.V_stack, u)
        tr = hadamard_trace_all(omega.inverse, problem.V_stack)
        return ProfileState(sigma2, beta, loglik, q, tr, omega,
                            _fisher=lambda: fisher_from_omega(problem, omega))


def fisher_from_omega(problem: VarCompProblem, omega: OmegaFactor) -> np.ndarray:
    P = np.einsum("ij,kjl->kil", omega.inverse, problem.V_stack)
    F = 0.5 * np.einsum("aij,bji->ab", P, P)
    return (F + F.T) / 2
