"""Multivariate-response variance components with Kronecker covariance.

``vec(Y) ~ N(vec(X B), Omega)`` with ``Omega = sum_i kron(Gamma[i], V[i])``.
``vec`` stacks columns, so block ``(j, k)`` of ``Omega`` (size ``n x n``)
is ``sum_i Gamma[i][j, k] * V[i]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import linalg as sla

from . import linalg
from .exceptions import DimensionMismatch, NotPositiveDefinite, SingularOmega
from .model import OmegaFactor, check_bases, check_design, factor_omega


@dataclass(frozen=True, eq=False)
class MultiVarCompProblem:
    """Response matrix ``Y`` (n x d), optional design ``X`` and bases ``V``."""

    Y: np.ndarray
    X: np.ndarray | None
    V: tuple

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        if Y.ndim != 2 or Y.shape[1] < 1:
            raise DimensionMismatch(f"Y must be an n x d matrix, got shape {Y.shape}")
        if not np.all(np.isfinite(Y)):
            raise ValueError("Y has non-finite entries")
        n = Y.shape[0]
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "X", check_design(self.X, n))
        object.__setattr__(self, "V", check_bases(self.V, n))

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def d(self) -> int:
        return self.Y.shape[1]

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
    def basis_factors(self) -> list:
        return [_basis_factor(Vi) for Vi in self.V]

    def residual(self, B) -> np.ndarray:
        if self.X is None:
            return self.Y.copy()
        return self.Y - self.X @ B


@dataclass
class MvtParameters:
    B: np.ndarray
    Gamma: list

    def __post_init__(self):
        self.B = np.asarray(self.B, dtype=float)
        self.Gamma = [np.atleast_2d(np.asarray(G, dtype=float)) for G in self.Gamma]


def _check_gammas(problem, gammas):
    gammas = [np.atleast_2d(np.asarray(G, dtype=float)) for G in gammas]
    if len(gammas) != problem.m:
        raise DimensionMismatch(f"expected {problem.m} Gamma matrices, got {len(gammas)}")
    for i, G in enumerate(gammas):
        if G.shape != (problem.d, problem.d):
            raise DimensionMismatch(f"Gamma[{i}] has shape {G.shape}, expected {(problem.d,) * 2}")
    return gammas


def assemble_mvt_omega(problem: MultiVarCompProblem, gammas) -> OmegaFactor:
    gammas = _check_gammas(problem, gammas)
    omega = sum(np.kron(G, Vi) for G, Vi in zip(gammas, problem.V))
    return factor_omega(omega)


def gamma_coefficient_matrix(V_i, omega_inverse, d: int) -> np.ndarray:
    """``M[j, k] = tr(W_jk V_i)`` where ``W_jk`` are the n x n blocks of ``inv(Omega)``."""
    n = V_i.shape[0]
    blocks = np.asarray(omega_inverse).reshape(d, n, d, n)
    M = np.einsum("ajbk,jk->ab", blocks, V_i)
    return (M + M.T) / 2


def mvt_gls(problem: MultiVarCompProblem, omega: OmegaFactor) -> np.ndarray:
    """GLS coefficients for the design ``kron(I_d, X)``; shape ``(p, d)``."""
    n, d, p = problem.n, problem.d, problem.p
    if p == 0:
        return np.zeros((0, d))
    Z = np.kron(np.eye(d), problem.X)
    L = omega.chol
    Zw = sla.solve_triangular(L, Z, lower=True, check_finite=False)
    yw = sla.solve_triangular(L, problem.Y.reshape(-1, order="F"), lower=True, check_finite=False)
    Q, R = np.linalg.qr(Zw)
    b = sla.solve_triangular(R, Q.T @ yw, lower=False, check_finite=False)
    return b.reshape(p, d, order="F")


def _logdet_pd(A) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(linalg.cholesky(A)))))


@dataclass
class MvtState:
    """Quantities at one ``Gamma``: GLS ``B``, log-likelihood and, per
    component, the pieces of the MM stationarity equation
    ``Gamma' M Gamma' = A`` with ``A = N^T N``.

    ``S[i]`` equals ``inv(Gamma_i) A_i inv(Gamma_i)``, the quadratic part of
    the likelihood gradient, formed without inverting ``Gamma_i``.
    """

    gammas: list
    B: np.ndarray
    loglik: float
    M: list
    N: list
    S: list

    @property
    def A(self) -> list:
        return [Ni.T @ Ni for Ni in self.N]

    def gradient(self) -> list:
        """Gradients of the log-likelihood with respect to each ``Gamma``."""
        return [0.5 * (Si - Mi) for Si, Mi in zip(self.S, self.M)]

    def mm_update(self) -> list:
        return [linalg.riccati_solve_factored(Ni, Mi) for Ni, Mi in zip(self.N, self.M)]


def _basis_factor(V_i) -> np.ndarray:
    """``F`` with ``F^T F = V_i`` and one row per positive eigenvalue."""
    w, Q = np.linalg.eigh(V_i)
    keep = w > linalg.PSD_CLAMP * max(w[-1], 0.0)
    return (Q[:, keep] * np.sqrt(w[keep])).T


def mvt_state(problem: MultiVarCompProblem, gammas, B=None) -> MvtState:
    """Dense evaluation; ``B`` defaults to the GLS solution at ``gammas``."""
    gammas = _check_gammas(problem, gammas)
    omega = assemble_mvt_omega(problem, gammas)
    if B is None:
        B = mvt_gls(problem, omega)
    n, d = problem.n, problem.d
    e = problem.residual(B).reshape(-1, order="F")
    u = omega.solve(e)
    R = u.reshape(n, d, order="F")
    loglik = -0.5 * omega.log_det - 0.5 * float(e @ u)
    Winv = omega.inverse
    M = [gamma_coefficient_matrix(Vi, Winv, d) for Vi in problem.V]
    N, S = [], []
    for G, F in zip(gammas, problem.basis_factors):
        FR = F @ R
        N.append(FR @ G)
        S.append(FR.T @ FR)
    return MvtState(gammas, np.asarray(B, dtype=float), loglik, M, N, S)


def mvt_log_likelihood(problem: MultiVarCompProblem, params: MvtParameters) -> float:
    omega = assemble_mvt_omega(problem, params.Gamma)
    e = problem.residual(params.B).reshape(-1, order="F")
    return -0.5 * omega.log_det - 0.5 * float(e @ omega.solve(e))


def mvt_mm_step(problem: MultiVarCompProblem, params: MvtParameters) -> list:
    """Solve ``Gamma' M_i Gamma' = A_i`` for every component."""
    return mvt_state(problem, params.Gamma, params.B).mm_update()


class MvtTwoVCEvaluator:
    """Two-component evaluation using an n x n and a d x d generalized
    eigendecomposition.

    With ``U^T V_a U = diag(dv)``, ``U^T V_b U = I`` and ``Phi`` congruent
    to both ``Gamma``s (``Phi^T Gamma_a Phi = diag(ca)``,
    ``Phi^T Gamma_b Phi = diag(cb)``), the covariance in coordinates
    ``kron(Phi, U)`` is diagonal with entries ``ca[k] * dv[i] + cb[k]``.
    ``Phi`` normalizes whichever ``Gamma`` is better conditioned to ``I``,
    so iterates approaching a singular ``Gamma`` stay evaluable.
    """

    def __init__(self, problem: MultiVarCompProblem):
        from .mm import two_vc_order

        if problem.m != 2:
            raise ValueError("the two-component path needs exactly two bases")
        self.problem = problem
        self.order = two_vc_order(*problem.V)
        a, b = self.order
        pair = linalg.congruence_decomp(problem.V[a], problem.V[b])
        self.dv = np.clip(pair.d, 0.0, None)
        self.va_definite = bool(self.dv.size and self.dv[0] > 1e-12 * self.dv[-1])
        self.Yt = pair.U.T @ problem.Y
        self.Xt = None if problem.X is None else pair.U.T @ problem.X
        self.logdet_b = _logdet_pd(problem.V[b])

    def _reference(self, gammas) -> int:
        a, b = self.order
        if not self.va_definite:
            return b

        def conditioning(G):
            w = np.linalg.eigvalsh(G)
            return w[0] / w[-1] if w[-1] > 0 else -np.inf

        return a if conditioning(gammas[a]) > conditioning(gammas[b]) else b

    def __call__(self, gammas) -> MvtState:
        problem = self.problem
        a, b = self.order
        gammas = _check_gammas(problem, gammas)
        n, d, p = problem.n, problem.d, problem.p
        ref = self._reference(gammas)
        other = a if ref == b else b
        try:
            pair = linalg.congruence_decomp(gammas[other], gammas[ref])
        except NotPositiveDefinite:
            raise SingularOmega("both covariance components are singular") from None
        Phi = pair.U
        c = {ref: np.ones(d), other: np.clip(pair.d, 0.0, None)}
        diag = np.outer(self.dv, c[a]) + c[b]
        if not np.all(diag > 0):
            raise SingularOmega("covariance is singular")
        W = 1.0 / diag
        YP = self.Yt @ Phi
        if p == 0:
            B = np.zeros((0, d))
            E = YP
        else:
            Z = np.kron(Phi.T, self.Xt)
            sw = np.sqrt(W.reshape(-1, order="F"))
            Q, R = np.linalg.qr(Z * sw[:, None])
            bvec = sla.solve_triangular(R, Q.T @ (YP.reshape(-1, order="F") * sw), lower=False)
            B = bvec.reshape(p, d, order="F")
            E = YP - self.Xt @ B @ Phi
        logdet = (float(np.sum(np.log(diag)))
                  + n * _logdet_pd(gammas[ref]) + d * self.logdet_b)
        loglik = -0.5 * logdet - 0.5 * float(np.sum(E * E * W))
        Qm = E * W
        QD = np.sqrt(self.dv)[:, None] * Qm
        Phi_inv = np.linalg.inv(Phi)
        M = [None, None]
        N = [None, None]
        S = [None, None]
        M[a] = (Phi * (self.dv @ W)) @ Phi.T
        M[b] = (Phi * W.sum(axis=0)) @ Phi.T
        N[a] = (QD * c[a]) @ Phi_inv
        N[b] = (Qm * c[b]) @ Phi_inv
        S[a] = Phi @ (QD.T @ QD) @ Phi.T
        S[b] = Phi @ (Qm.T @ Qm) @ Phi.T
        M = [(Mi + Mi.T) / 2 for Mi in M]
        S = [(Si + Si.T) / 2 for Si in S]
        return MvtState(gammas, B, loglik, M, N, S)


def gamma_kkt_residual(gamma, grad) -> float:
    """First-order violation for maximizing over ``Gamma >= 0``.

    In the eigenbasis of ``gamma``, directions with eigenvalue at most
    ``1e-10`` times the largest are on the boundary: their gradient block
    must be negative semidefinite. Every other gradient entry must vanish.
    Reduces to the scalar rule when ``d = 1``.
    """
    w, Q = np.linalg.eigh(gamma)
    G = Q.T @ grad @ Q
    G = (G + G.T) / 2
    active = w <= 1e-10 * max(w[-1], 0.0)
    free = ~active
    viol = 0.0
    if free.any():
        viol = max(np.abs(G[free]).max(), np.abs(G[:, free]).max())
    if active.any():
        viol = max(viol, float(np.linalg.eigvalsh(G[np.ix_(active, active)])[-1]))
    return float(viol)


def _pack(gammas) -> np.ndarray:
    return np.concatenate([G.ravel() for G in gammas])


def _unpacker(m, d):
    def unpack(x):
        return [Gi.copy() for Gi in np.asarray(x).reshape(m, d, d)]

    return unpack


def _gamma_start(problem, config, gamma_init):
    d, m = problem.d, problem.m
    if gamma_init is not None:
        return _check_gammas(problem, gamma_init)
    s = config.start(m)
    return [si * np.eye(d) for si in s]


def _fit_mvt(problem, evaluator, config, gamma_init):
    from .mm import FitResult, SolverConfig, run_iterations
    from .penalized import iw_log_prior, iw_update

    config = config or SolverConfig()
    if config.strategy != "MM":
        raise ValueError("multivariate fits support only the MM strategy")
    if config.accelerate:
        raise ValueError("multivariate fits are not accelerated")
    penalty = config.penalty
    if penalty.active and penalty.kind != "map_iw":
        raise ValueError("multivariate fits accept only inverse Wishart priors")
    if penalty.active:
        penalty.check_size(problem.m)
        for P in penalty.psi:
            if P.shape != (problem.d, problem.d):
                raise DimensionMismatch(f"prior scale has shape {P.shape}, expected {(problem.d,) * 2}")
    unpack = _unpacker(problem.m, problem.d)
    start = _gamma_start(problem, config, gamma_init)
    for G in start:
        linalg.cholesky(G)

    def evaluate(x):
        return evaluator(unpack(x))

    if penalty.active:
        def step(st, cache):
            return _pack([iw_update(M, N, G, v, P) for M, N, G, v, P
                          in zip(st.M, st.N, st.gammas, penalty.nu, penalty.psi)])

        def objective(st):
            return st.loglik + iw_log_prior(st.gammas, penalty.nu, penalty.psi)
    else:
        def step(st, cache):
            return _pack(st.mm_update())

        def objective(st):
            return st.loglik

    st, trace, iterates, info = run_iterations(
        evaluate, step, objective, _pack(start), config, snapshot=unpack
    )
    grads = st.gradient()
    if penalty.active:
        for g, G, v, P in zip(grads, st.gammas, penalty.nu, penalty.psi):
            Gi = np.linalg.inv(G)
            g += -0.5 * (v + problem.d + 1) * Gi + 0.5 * Gi @ P @ Gi
    trace.kkt_residual = max(gamma_kkt_residual(G, g) for G, g in zip(st.gammas, grads))
    return FitResult(
        params=MvtParameters(st.B, st.gammas),
        trace=trace,
        strategy="MM",
        loglik=st.loglik,
        objective=trace.objective[-1],
        iterates=iterates,
        info=info,
    )


def fit_mvt(problem: MultiVarCompProblem, config=None, gamma_init=None):
    """MM fit alternating a GLS solve for ``B`` with Riccati updates of every
    ``Gamma``. ``gamma_init`` defaults to ``sigma2_init[i] * I_d``."""
    return _fit_mvt(problem, lambda g: mvt_state(problem, g), config, gamma_init)


def fit_mvt_two_vc(problem: MultiVarCompProblem, config=None, gamma_init=None):
    """Two-component multivariate fit that never forms the nd x nd covariance."""
    res = _fit_mvt(problem, MvtTwoVCEvaluator(problem), config, gamma_init)
    res.info["fast_path"] = True
    return res
