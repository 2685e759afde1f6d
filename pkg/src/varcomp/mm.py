"""MM estimation of variance components and the shared iteration driver."""

from __future__ import annotations

import time
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla

from . import linalg
from .acceleration import SecantState, accelerate
from .alternatives import em_update, hybrid_update, scoring_search
from .exceptions import NotPositiveDefinite, SingularOmega, ZeroDenominator
from .model import (
    DenseEvaluator,
    FitTrace,
    Parameters,
    ProfileState,
    VarCompProblem,
    assemble_omega,
    gls_beta,
    hadamard_trace_all,
    kkt_from_score,
)
from .penalized import PenaltySpec

STRATEGIES = ("MM", "EM", "FS", "HYBRID")
FLUSH = 1e-300


@dataclass
class SolverConfig:
    """Options shared by every fitting routine.

    Parameters
    ----------
    strategy : {"MM", "EM", "FS", "HYBRID"}
    accelerate : bool
        Wrap the update in one-secant quasi-Newton acceleration.
    rel_tol : float
        Stop when ``|L_new - L_old| / (|L_old| + 1) < rel_tol``.
    max_iter : int
    sigma2_init : array_like, optional
        Starting variance components; all ones by default.
    penalty : PenaltySpec, optional
        Prior or penalty; only the MM strategy supports one.
    hybrid_norm : {"l1", "l2", "linf"}
    record_iterates : bool
        Keep a copy of every iterate in :attr:`FitResult.iterates`.
    """

    strategy: str = "MM"
    accelerate: bool = False
    rel_tol: float = 1e-6
    max_iter: int = 5000
    sigma2_init: np.ndarray | None = None
    penalty: PenaltySpec | None = None
    hybrid_norm: str = "l2"
    record_iterates: bool = False

    def __post_init__(self):
        self.strategy = str(self.strategy).upper()
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be > 0")
        if int(self.max_iter) < 1:
            raise ValueError("max_iter must be >= 1")
        self.max_iter = int(self.max_iter)
        if self.sigma2_init is not None:
            self.sigma2_init = np.atleast_1d(np.asarray(self.sigma2_init, dtype=float))
            if np.any(~(self.sigma2_init > 0)):
                raise ValueError("sigma2_init must be > 0 componentwise")
        if self.penalty is None:
            self.penalty = PenaltySpec.none()
        if self.penalty.active and self.strategy != "MM":
            raise ValueError("priors and penalties are only supported with strategy MM")
        if self.hybrid_norm not in ("l1", "l2", "linf"):
            raise ValueError("hybrid_norm must be l1, l2 or linf")

    def start(self, m: int) -> np.ndarray:
        if self.sigma2_init is None:
            return np.ones(m)
        if self.sigma2_init.shape[0] == 1:
            return np.full(m, self.sigma2_init[0])
        if self.sigma2_init.shape[0] != m:
            raise ValueError(f"sigma2_init has {self.sigma2_init.shape[0]} entries, expected {m}")
        return self.sigma2_init.copy()


@dataclass
class FitResult:
    params: object
    trace: FitTrace
    strategy: str
    loglik: float
    objective: float
    iterates: list | None = None
    info: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.trace.converged

    @property
    def iterations(self) -> int:
        return self.trace.iterations


def mm_update(sigma2, q, tr) -> np.ndarray:
    """Multiplicative MM update ``sigma2 * sqrt(q / tr)``."""
    sigma2 = np.asarray(sigma2, dtype=float)
    live = sigma2 > 0
    if np.any(live & (tr <= 0)):
        raise ZeroDenominator("tr(inv(Omega) V_i) must be positive")
    out = np.zeros_like(sigma2)
    out[live] = sigma2[live] * np.sqrt(q[live] / tr[live])
    return out


def mm_step_sigma2(problem: VarCompProblem, params: Parameters, omega=None) -> np.ndarray:
    if omega is None:
        omega = assemble_omega(problem, params.sigma2)
    r = problem.residual(params.beta)
    u = omega.solve(r)
    q = np.einsum("i,kij,j->k", u, problem.V_stack, u)
    tr = hadamard_trace_all(omega.inverse, problem.V_stack)
    return mm_update(params.sigma2, q, tr)


class _Cache:
    """Remembers the last few evaluations so no point is factored twice."""

    def __init__(self, evaluate, size=4):
        self.evaluate = evaluate
        self.size = size
        self._store = OrderedDict()

    def __call__(self, x):
        key = np.asarray(x, dtype=float).tobytes()
        hit = self._store.get(key)
        if hit is None:
            hit = self.evaluate(np.array(x, dtype=float))
            self._store[key] = hit
            if len(self._store) > self.size:
                self._store.popitem(last=False)
        else:
            self._store.move_to_end(key)
        return hit


def run_iterations(evaluate, step, objective, x0, config: SolverConfig, snapshot=None):
    """Generic ascent loop.

    Parameters
    ----------
    evaluate : callable
        Parameter vector -> state object (factorization, GLS fit, ...).
    step : callable
        ``(state, cache) -> new parameter vector``.
    objective : callable
        State -> value being maximized.
    x0 : ndarray
    snapshot : callable, optional
        Vector -> stored iterate when ``config.record_iterates`` is set.

    Returns
    -------
    state, trace, iterates, info
    """
    t0 = time.perf_counter()
    cache = _Cache(evaluate)
    x = np.asarray(x0, dtype=float)
    st = cache(x)
    obj = objective(st)
    trace = FitTrace(objective=[obj])
    snap = snapshot or (lambda v: v.copy())
    iterates = [snap(x)] if config.record_iterates else None
    secant = SecantState()
    info = {"accelerated": 0}

    def plain(z):
        return _flush(step(cache(z), cache))

    def value(z):
        return objective(cache(z))

    for it in range(1, config.max_iter + 1):
        if config.accelerate:
            x_new, secant = accelerate(plain, secant, x, value)
            info["accelerated"] += int(secant.accepted)
        else:
            x_new = _flush(step(st, cache))
        st_new = cache(x_new)
        obj_new = objective(st_new)
        trace.objective.append(obj_new)
        trace.iterations = it
        if iterates is not None:
            iterates.append(snap(x_new))
        done = np.isfinite(obj_new) and np.isfinite(obj) and (
            abs(obj_new - obj) / (abs(obj) + 1.0) < config.rel_tol
        )
        x, st, obj = x_new, st_new, obj_new
        if done:
            trace.converged = True
            break
    trace.wall_time = time.perf_counter() - t0
    return st, trace, iterates, info


def _flush(x):
    x = np.asarray(x, dtype=float)
    return np.where(np.abs(x) < FLUSH, 0.0, x)


def _sigma2_step(config: SolverConfig, ranks, info):
    penalty = config.penalty
    strategy = config.strategy
    info.setdefault("chosen", [])

    def step(st: ProfileState, cache):
        if penalty.active:
            return penalty.update(st.sigma2, st.q, st.tr)
        if strategy == "MM":
            return mm_update(st.sigma2, st.q, st.tr)
        if strategy == "EM":
            return em_update(st.sigma2, st.q, st.tr, ranks)
        if strategy == "HYBRID":
            new, chosen = hybrid_update(st.sigma2, st.q, st.tr, ranks, config.hybrid_norm)
            info["chosen"].append(chosen)
            return new
        return scoring_search(st.sigma2, st.score, st.fisher(),
                              lambda s: cache(s).loglik, st.loglik)

    return step


def _objective(config: SolverConfig):
    penalty = config.penalty
    if not penalty.active:
        return lambda st: st.loglik
    return lambda st: st.loglik + penalty.log_prior(st.sigma2)


def penalized_kkt(penalty: PenaltySpec, sigma2, score) -> float:
    """KKT residual of the (possibly penalized) objective in ``sigma2``."""
    sigma2 = np.asarray(sigma2, dtype=float)
    if not penalty.active:
        return kkt_from_score(sigma2, score)
    if penalty.kind == "lasso":
        # stationarity in sigma: 2 sigma score - lam = 0, or <= 0 at sigma = 0
        sigma = np.sqrt(sigma2)
        g = 2.0 * sigma * score - penalty.weights(sigma.shape[0])
        return kkt_from_score(sigma, g)
    return kkt_from_score(sigma2, score + penalty.gradient(sigma2))


def _drive(problem, evaluator, config: SolverConfig) -> FitResult:
    config.penalty.check_size(problem.m)
    info = {}
    step = _sigma2_step(config, problem.ranks, info)
    st, trace, iterates, run_info = run_iterations(
        evaluator, step, _objective(config), config.start(problem.m), config
    )
    info.update(run_info)
    trace.kkt_residual = penalized_kkt(config.penalty, st.sigma2, st.score)
    obj = trace.objective[-1]
    return FitResult(
        params=Parameters(st.beta, st.sigma2),
        trace=trace,
        strategy=config.strategy + ("+accel" if config.accelerate else ""),
        loglik=st.loglik,
        objective=obj,
        iterates=iterates,
        info=info,
    )


def fit(problem: VarCompProblem, config: SolverConfig | None = None) -> FitResult:
    """Maximum likelihood (or MAP / penalized) fit by alternating GLS and a
    variance-component step chosen by ``config.strategy``."""
    config = config or SolverConfig()
    return _drive(problem, DenseEvaluator(problem), config)


def reml_problem(problem: VarCompProblem):
    """Project onto ``null(X^T)``; returns ``(projected problem, basis)``."""
    B = linalg.nullspace_basis(problem.X)
    V = [(B.T @ Vi @ B + (B.T @ Vi @ B).T) / 2 for Vi in problem.V]
    return VarCompProblem(B.T @ problem.y, None, tuple(V)), B


def fit_reml(problem: VarCompProblem, config: SolverConfig | None = None) -> FitResult:
    """Restricted maximum likelihood fit.

    Variance components are estimated from the projected responses; the
    mean coefficients are the GLS solution at those estimates on the
    original data. ``loglik`` is the restricted log-likelihood.
    """
    config = config or SolverConfig()
    if problem.X is None:
        return fit(problem, config)
    projected, _ = reml_problem(problem)
    res = fit(projected, config)
    beta = gls_beta(problem, assemble_omega(problem, res.params.sigma2))
    res.params = Parameters(beta, res.params.sigma2)
    res.info["reml"] = True
    return res


def _is_pd(A) -> bool:
    try:
        linalg.cholesky(A)
    except NotPositiveDefinite:
        return False
    return True


def two_vc_order(Va, Vb):
    """Index order placing a positive definite basis second."""
    if _is_pd(Vb):
        return (0, 1)
    if _is_pd(Va):
        return (1, 0)
    raise NotPositiveDefinite("two-component fast path needs one positive definite basis")


def _weighted_lstsq(X, y, w):
    sw = np.sqrt(w)
    Q, R = np.linalg.qr(X * sw[:, None])
    return sla.solve_triangular(R, Q.T @ (y * sw), lower=False, check_finite=False)


class TwoVCEvaluator:
    """O(n) profile evaluation for two components after one n x n
    generalized eigendecomposition.

    With ``U^T V_a U = diag(d)`` and ``U^T V_b U = I`` (``V_b`` the positive
    definite basis) the covariance is diagonal in rotated coordinates with
    entries ``s_a d + s_b``.
    """

    def __init__(self, problem: VarCompProblem):
        if problem.m != 2:
            raise ValueError("the two-component path needs exactly two bases")
        self.problem = problem
        self.order = two_vc_order(*problem.V)
        a, b = self.order
        pair = linalg.congruence_decomp(problem.V[a], problem.V[b])
        self.d = np.clip(pair.d, 0.0, None)
        self.yt = pair.U.T @ problem.y
        self.Xt = None if problem.X is None else pair.U.T @ problem.X
        Lb = linalg.cholesky(problem.V[b])
        self.logdet_b = 2.0 * float(np.sum(np.log(np.diag(Lb))))

    def __call__(self, sigma2) -> ProfileState:
        a, b = self.order
        sigma2 = np.asarray(sigma2, dtype=float)
        denom = sigma2[a] * self.d + sigma2[b]
        if np.any(denom <= 0):
            raise SingularOmega("covariance is singular at this point")
        w = 1.0 / denom
        if self.Xt is None:
            beta = np.zeros(0)
            r = self.yt
        else:
            beta = _weighted_lstsq(self.Xt, self.yt, w)
            r = self.yt - self.Xt @ beta
        wr = w * r
        loglik = -0.5 * (float(np.sum(np.log(denom))) + self.logdet_b) - 0.5 * float(r @ wr)
        q = np.empty(2)
        tr = np.empty(2)
        q[a], q[b] = self.d @ wr**2, wr @ wr
        tr[a], tr[b] = w @ self.d, w.sum()
        w2 = w * w
        F = np.empty((2, 2))
        F[a, a] = 0.5 * w2 @ self.d**2
        F[b, b] = 0.5 * w2.sum()
        F[a, b] = F[b, a] = 0.5 * w2 @ self.d
        return ProfileState(sigma2, beta, loglik, q, tr, None, _fisher=lambda: F)


def fit_two_vc(problem: VarCompProblem, config: SolverConfig | None = None) -> FitResult:
    """Fit a two-component model without forming or factoring ``Omega``."""
    config = config or SolverConfig()
    res = _drive(problem, TwoVCEvaluator(problem), config)
    res.info["fast_path"] = True
    return res


__all__ = [
    "SolverConfig",
    "FitResult",
    "mm_update",
    "mm_step_sigma2",
    "fit",
    "fit_reml",
    "fit_two_vc",
    "TwoVCEvaluator",
    "run_iterations",
    "reml_problem",
]
