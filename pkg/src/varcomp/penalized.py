"""MAP and penalized variance-component updates.

Univariate priors are independent inverse gamma on each ``sigma2[i]``;
multivariate priors are inverse Wishart on each ``Gamma[i]``. The ridge
penalty is ``lam * sum(sigma2)`` and the lasso penalty ``lam * sum(sigma)``,
both subtracted from the log-likelihood.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from . import linalg
from .exceptions import NoPositiveRoot, QuarticSolverFailed
from .model import Parameters, VarCompProblem, assemble_omega, quad_and_trace

KINDS = ("none", "map_ig", "map_iw", "ridge", "lasso")


@dataclass
class PenaltySpec:
    """Prior or penalty attached to a fit.

    Use the constructors :meth:`none`, :meth:`map_ig`, :meth:`map_iw`,
    :meth:`ridge` and :meth:`lasso`. ``mask`` selects the penalized
    components for ridge and lasso (``None`` penalizes all of them).
    """

    kind: str = "none"
    alpha: np.ndarray | None = None
    gamma: np.ndarray | None = None
    nu: np.ndarray | None = None
    psi: list | None = None
    lam: float = 0.0
    mask: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"penalty kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind in ("ridge", "lasso"):
            if not np.isfinite(self.lam) or self.lam < 0:
                raise ValueError("penalty weight must be finite and >= 0")
            if self.mask is not None:
                self.mask = np.asarray(self.mask, dtype=bool)
        if self.kind == "map_ig":
            self.alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
            self.gamma = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        if self.kind == "map_iw":
            self.nu = np.atleast_1d(np.asarray(self.nu, dtype=float))
            self.psi = [np.atleast_2d(np.asarray(P, dtype=float)) for P in self.psi]
            if len(self.psi) != self.nu.shape[0]:
                raise ValueError("need one scale matrix per degrees-of-freedom entry")

    @classmethod
    def none(cls):
        return cls("none")

    @classmethod
    def map_ig(cls, alpha, gamma):
        """Inverse gamma priors with shapes ``alpha`` and scales ``gamma``."""
        spec = cls("map_ig", alpha=alpha, gamma=gamma)
        if np.any(spec.alpha <= 0) or np.any(spec.gamma <= 0):
            raise ValueError("inverse gamma shapes and scales must be > 0")
        return spec

    @classmethod
    def map_iw(cls, nu, psi):
        """Inverse Wishart priors with degrees of freedom ``nu`` and scales ``psi``."""
        spec = cls("map_iw", nu=nu, psi=psi)
        for v, P in zip(spec.nu, spec.psi):
            if v <= P.shape[0] - 1:
                raise ValueError("inverse Wishart degrees of freedom must exceed d - 1")
            linalg.cholesky(P)
        return spec

    @classmethod
    def ridge(cls, lam, mask=None):
        return cls("ridge", lam=float(lam), mask=mask)

    @classmethod
    def lasso(cls, lam, mask=None):
        return cls("lasso", lam=float(lam), mask=mask)

    @property
    def active(self) -> bool:
        return self.kind != "none"

    def weights(self, m: int) -> np.ndarray:
        """Per-component penalty weight (``lam`` or 0) for ridge and lasso."""
        if self.mask is None:
            return np.full(m, self.lam)
        if self.mask.shape != (m,):
            raise ValueError(f"penalty mask has shape {self.mask.shape}, expected ({m},)")
        return np.where(self.mask, self.lam, 0.0)

    def check_size(self, m: int):
        if self.kind == "map_ig":
            self.alpha = np.broadcast_to(self.alpha, (m,)).copy()
            self.gamma = np.broadcast_to(self.gamma, (m,)).copy()
        elif self.kind == "map_iw" and self.nu.shape[0] != m:
            raise ValueError(f"expected {m} inverse Wishart priors, got {self.nu.shape[0]}")
        elif self.kind in ("ridge", "lasso"):
            self.weights(m)

    def log_prior(self, sigma2) -> float:
        """Value added to the log-likelihood for univariate penalties."""
        sigma2 = np.asarray(sigma2, dtype=float)
        if self.kind == "none":
            return 0.0
        if self.kind == "map_ig":
            if np.any(sigma2 <= 0):
                return -np.inf
            return float(-np.sum((self.alpha + 1) * np.log(sigma2)) - np.sum(self.gamma / sigma2))
        lam = self.weights(sigma2.shape[0])
        if self.kind == "ridge":
            return float(-np.sum(lam * sigma2))
        if self.kind == "lasso":
            return float(-np.sum(lam * np.sqrt(sigma2)))
        raise ValueError("inverse Wishart priors apply to multivariate fits only")

    def gradient(self, sigma2) -> np.ndarray:
        """Gradient of :meth:`log_prior` with respect to ``sigma2``."""
        sigma2 = np.asarray(sigma2, dtype=float)
        if self.kind == "none":
            return np.zeros_like(sigma2)
        if self.kind == "map_ig":
            return -(self.alpha + 1) / sigma2 + self.gamma / sigma2**2
        lam = self.weights(sigma2.shape[0])
        if self.kind == "ridge":
            return -lam
        with np.errstate(divide="ignore"):
            return np.where(sigma2 > 0, -lam / (2 * np.sqrt(sigma2)), -np.inf)

    def update(self, sigma2, q, tr):
        """Surrogate maximizer for ``sigma2`` given the current ``q`` and ``tr``."""
        if self.kind == "map_ig":
            return map_ig_update(sigma2, q, tr, self.alpha, self.gamma)
        lam = self.weights(np.asarray(sigma2).shape[0])
        if self.kind == "ridge":
            return ridge_update(sigma2, q, tr, lam)
        if self.kind == "lasso":
            return lasso_update(sigma2, q, tr, lam) ** 2
        raise ValueError(f"no univariate update for penalty {self.kind!r}")


def map_ig_update(sigma2, q, tr, alpha, gamma) -> np.ndarray:
    """Positive root of ``(tr/2) s^2 + (alpha+1) s - (sigma2^2 q/2 + gamma) = 0``."""
    sigma2 = np.asarray(sigma2, dtype=float)
    a = 0.5 * np.asarray(tr, dtype=float)
    b = np.asarray(alpha, dtype=float) + 1.0
    c = -(0.5 * sigma2**2 * q + gamma)
    if np.any(a <= 0):
        raise NoPositiveRoot("quadratic leading coefficient must be positive")
    if np.any(c > 0):
        raise NoPositiveRoot("quadratic constant term must be nonpositive")
    # stable form of (-b + sqrt(b^2 - 4ac)) / 2a
    return -2.0 * c / (b + np.sqrt(b * b - 4.0 * a * c))


def ridge_update(sigma2, q, tr, lam) -> np.ndarray:
    sigma2 = np.asarray(sigma2, dtype=float)
    return sigma2 * np.sqrt(q / (tr + 2.0 * np.asarray(lam, dtype=float)))


def _quartic_root(t, lam, c):
    # unique positive root of t s^4 + lam s^3 - c (one sign change). With
    # s = base * u and base = min((c/t)^(1/4), (c/lam)^(1/3)) this becomes
    # a u^4 + b u^3 = 1 with max(a, b) = 1, so the root lies in [1/2, 1];
    # coefficients are formed in log space to survive tiny c
    log_c = np.log(c)
    log_base = min((log_c - np.log(t)) / 4.0, (log_c - np.log(lam)) / 3.0)
    a = np.exp(np.log(t) + 4.0 * log_base - log_c)
    b = np.exp(np.log(lam) + 3.0 * log_base - log_c)
    g = lambda u: (a * u + b) * u**3 - 1.0  # noqa: E731
    lo, hi = 0.5, 1.001
    if not (g(lo) < 0 < g(hi)):
        raise QuarticSolverFailed("stationary equation not bracketed")
    try:
        u = brentq(g, lo, hi, xtol=1e-16, rtol=4 * np.finfo(float).eps)
    except (ValueError, RuntimeError) as exc:
        raise QuarticSolverFailed(str(exc)) from None
    return float(np.exp(log_base) * u)


def lasso_update(sigma2, q, tr, lam) -> np.ndarray:
    """Minimizer over ``s >= 0`` of ``tr s^2/2 + sigma2^2 q/(2 s^2) + lam s``.

    Returns standard deviations, not variances.
    """
    sigma2 = np.asarray(sigma2, dtype=float)
    lam = np.broadcast_to(np.asarray(lam, dtype=float), sigma2.shape)
    c = sigma2**2 * np.asarray(q, dtype=float)
    out = np.zeros_like(sigma2)
    for i in range(sigma2.shape[0]):
        if c[i] <= 0 or sigma2[i] <= 0:
            continue
        if lam[i] == 0:
            out[i] = (c[i] / tr[i]) ** 0.25
        else:
            out[i] = _quartic_root(tr[i], lam[i], c[i])
    return out


def _q_tr(problem, params, omega):
    if omega is None:
        omega = assemble_omega(problem, params.sigma2)
    return quad_and_trace(problem, omega, problem.residual(params.beta))


def map_step_sigma2(problem: VarCompProblem, params: Parameters, alpha, gamma, omega=None):
    """MAP update of ``sigma2`` under independent inverse gamma priors."""
    q, tr = _q_tr(problem, params, omega)
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), (problem.m,))
    gamma = np.broadcast_to(np.asarray(gamma, dtype=float), (problem.m,))
    return map_ig_update(params.sigma2, q, tr, alpha, gamma)


def ridge_step_sigma2(problem: VarCompProblem, params: Parameters, lam, omega=None):
    q, tr = _q_tr(problem, params, omega)
    return ridge_update(params.sigma2, q, tr, lam)


def lasso_step_sigma(problem: VarCompProblem, params: Parameters, lam, omega=None):
    """Lasso update; returns standard deviations ``sigma`` (not variances)."""
    q, tr = _q_tr(problem, params, omega)
    return lasso_update(params.sigma2, q, tr, lam)


def iw_update(M, N, gamma_t, nu, psi):
    """Solve ``(M + (nu+d+1) inv(Gamma_t)) = inv(G) (A + Psi) inv(G)`` for ``G``.

    ``N`` is any factor of the data term, ``A = N^T N``.
    """
    d = gamma_t.shape[0]
    lhs = M + (nu + d + 1) * np.linalg.inv(gamma_t)
    stacked = np.vstack([np.atleast_2d(N), linalg.cholesky(psi).T])
    return linalg.riccati_solve_factored(stacked, (lhs + lhs.T) / 2)


def iw_log_prior(gammas, nu, psi) -> float:
    total = 0.0
    for G, v, P in zip(gammas, nu, psi):
        d = G.shape[0]
        L = linalg.cholesky(G)
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        total += -0.5 * (v + d + 1) * logdet - 0.5 * np.trace(np.linalg.solve(G, P))
    return float(total)


def map_step_gamma_iw(problem, params, nu, psi):
    """MAP update of every ``Gamma[i]`` under inverse Wishart priors."""
    from .multivariate import mvt_state

    st = mvt_state(problem, params.Gamma, params.B)
    nu = np.broadcast_to(np.asarray(nu, dtype=float), (problem.m,))
    return [iw_update(M, N, G, v, P) for M, N, G, v, P in zip(st.M, st.N, params.Gamma, nu, psi)]
