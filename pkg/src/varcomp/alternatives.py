"""Baseline solvers (EM, Fisher scoring) and EM/MM rate diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import BoundaryPoint, LineSearchFailed, VarCompError, ZeroRank
from .model import (
    Parameters,
    VarCompProblem,
    assemble_omega,
    fisher_from_omega,
    hadamard_trace_all,
    log_likelihood,
    quad_and_trace,
    score_sigma2,
)

MAX_HALVINGS = 50


def em_update(sigma2, q, tr, ranks) -> np.ndarray:
    """Maximizer of the EM surrogate; zero components stay at zero."""
    sigma2 = np.asarray(sigma2, dtype=float)
    ranks = np.asarray(ranks, dtype=float)
    live = sigma2 > 0
    if np.any(live & (ranks <= 0)):
        raise ZeroRank("EM update needs rank(V_i) > 0 for every positive component")
    out = np.zeros_like(sigma2)
    s = sigma2[live]
    out[live] = s + s**2 * (q[live] - tr[live]) / ranks[live]
    return np.maximum(out, 0.0)


def em_step_sigma2(problem: VarCompProblem, params: Parameters, omega=None) -> np.ndarray:
    if omega is None:
        omega = assemble_omega(problem, params.sigma2)
    q, tr = quad_and_trace(problem, omega, problem.residual(params.beta))
    return em_update(params.sigma2, q, tr, problem.ranks)


def fisher_information_sigma2(problem: VarCompProblem, params: Parameters, omega=None) -> np.ndarray:
    """Expected information, entries ``tr(W V_i W V_j) / 2`` with ``W = inv(Omega)``."""
    if omega is None:
        omega = assemble_omega(problem, params.sigma2)
    return fisher_from_omega(problem, omega)


def scoring_search(sigma2, score, fisher, objective, obj0=None):
    """Step-halving Fisher scoring from ``sigma2``.

    ``objective`` maps a candidate ``sigma2`` to the value being maximized and
    may raise :class:`VarCompError` for candidates outside the domain.
    Components pinned at zero whose direction points outward are held fixed;
    trial points are clipped at zero before the ascent test.
    """
    sigma2 = np.asarray(sigma2, dtype=float)
    m = sigma2.shape[0]
    free = np.ones(m, dtype=bool)
    delta = np.zeros(m)
    for _ in range(m + 1):
        idx = np.flatnonzero(free)
        if idx.size == 0:
            break
        F = fisher[np.ix_(idx, idx)]
        try:
            step = np.linalg.solve(F, score[idx])
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(F, score[idx], rcond=None)[0]
        delta = np.zeros(m)
        delta[idx] = step
        pinned = free & (sigma2 <= 0) & (delta < 0)
        if not pinned.any():
            break
        free &= ~pinned
    if obj0 is None:
        obj0 = objective(sigma2)
    if not np.any(delta):
        return sigma2.copy()
    slack = 1e-13 * (1.0 + abs(obj0))
    t = 1.0
    for _ in range(MAX_HALVINGS + 1):
        cand = np.maximum(sigma2 + t * delta, 0.0)
        try:
            val = objective(cand)
        except VarCompError:
            val = -np.inf
        if val >= obj0 - slack:
            return cand
        t *= 0.5
    if np.max(np.abs(delta)) <= 1e-12 * (1.0 + np.max(sigma2)):
        return sigma2.copy()
    raise LineSearchFailed(f"no ascent after {MAX_HALVINGS} step halvings")


def fs_step_sigma2(problem: VarCompProblem, params: Parameters) -> np.ndarray:
    """One safeguarded Fisher scoring step with ``beta`` held fixed."""
    omega = assemble_omega(problem, params.sigma2)
    score = score_sigma2(problem, params, omega)
    fisher = fisher_from_omega(problem, omega)

    def objective(s):
        return log_likelihood(problem, Parameters(params.beta, s))

    obj0 = log_likelihood(problem, params, omega)
    return scoring_search(params.sigma2, score, fisher, objective, obj0)


@dataclass
class RateDiagnostics:
    em_diag: np.ndarray
    mm_diag: np.ndarray
    avg_ratio: float


def rate_diagnostics(problem: VarCompProblem, params: Parameters) -> RateDiagnostics:
    """Surrogate curvature diagonals of EM and MM at an interior point.

    Uses ``-rank(V_i) / (2 sigma_i^4)`` for EM and the trace form
    ``-tr(W V_i) / sigma_i^2`` for MM. At a common fixed point these are
    the exact second differentials; elsewhere they are the limiting forms.
    """
    sigma2 = params.sigma2
    if np.any(sigma2 <= 0):
        raise BoundaryPoint("rate diagnostics need every variance component > 0")
    omega = assemble_omega(problem, sigma2)
    tr = hadamard_trace_all(omega.inverse, problem.V_stack)
    em = -problem.ranks / (2.0 * sigma2**2)
    mm = -tr / sigma2
    return RateDiagnostics(em_diag=em, mm_diag=mm, avg_ratio=float(np.mean(mm / em)))


_NORMS = {"l1": 1, "l2": 2, "linf": np.inf}


def surrogate_curvatures(sigma2, q, tr, ranks):
    """Diagonals of the MM and EM surrogate Hessians at the current iterate."""
    live = sigma2 > 0
    s = np.where(live, sigma2, 1.0)
    mm = np.where(live, -q / s, 0.0)
    em = np.where(live, -ranks / (2.0 * s**2) + (tr - q) / s, 0.0)
    return mm, em


def hybrid_update(sigma2, q, tr, ranks, norm="l2"):
    """Take whichever of the EM or MM steps has the flatter surrogate.

    Ties go to MM. Returns ``(new_sigma2, "MM" | "EM")``.
    """
    try:
        order = _NORMS[norm]
    except KeyError:
        raise ValueError(f"norm must be one of {sorted(_NORMS)}") from None
    mm_c, em_c = surrogate_curvatures(sigma2, q, tr, ranks)
    if np.linalg.norm(em_c, order) < np.linalg.norm(mm_c, order):
        return em_update(sigma2, q, tr, ranks), "EM"
    from .mm import mm_update

    return mm_update(sigma2, q, tr), "MM"


def hybrid_step_sigma2(problem: VarCompProblem, params: Parameters, norm="l2"):
    omega = assemble_omega(problem, params.sigma2)
    q, tr = quad_and_trace(problem, omega, problem.residual(params.beta))
    return hybrid_update(params.sigma2, q, tr, problem.ranks, norm)
