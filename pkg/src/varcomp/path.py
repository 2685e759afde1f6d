"""Lasso solution paths over variance components and entry-order ranking."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import VarCompError
from .mm import SolverConfig, fit
from .model import VarCompProblem
from .penalized import PenaltySpec

ACTIVITY_RTOL = 1e-8


@dataclass
class PathRecord:
    """Fit at one penalty level.

    ``entry_order`` maps each penalized component that has become active at
    or before this point to the grid index where it first did so.
    """

    lam: float
    sigma2: np.ndarray
    entry_order: dict = field(default_factory=dict)
    iterations: int = 0
    converged: bool = False
    objective: float = float("nan")
    error: str = ""


def identity_components(problem: VarCompProblem) -> np.ndarray:
    """Mask of bases equal to the identity (noise terms)."""
    eye = np.eye(problem.n)
    return np.array([np.array_equal(Vi, eye) for Vi in problem.V])


def default_penalized(problem: VarCompProblem) -> np.ndarray:
    """Penalize everything except identity bases."""
    return ~identity_components(problem)


def _lasso_config(config, lam, mask, start):
    return replace(config, strategy="MM", accelerate=False,
                   penalty=PenaltySpec.lasso(lam, mask=mask), sigma2_init=start)


def _inactive(sigma2, mask) -> bool:
    sigma = np.sqrt(sigma2)
    return bool(np.all(sigma[mask] <= ACTIVITY_RTOL * sigma.max()))


def lambda_max(problem: VarCompProblem, config: SolverConfig | None = None,
               penalized=None, rtol: float = 1e-2, lam0: float = 1.0) -> float:
    """Smallest penalty at which a cold-start fit leaves every penalized
    component inactive, located by doubling then bisection on ``log(lam)``.

    ``rtol`` is the relative width of the final bracket; the upper end is
    returned.
    """
    config = config or SolverConfig()
    mask = default_penalized(problem) if penalized is None else np.asarray(penalized, bool)
    start = config.start(problem.m)

    def inactive(lam):
        res = fit(problem, _lasso_config(config, lam, mask, start))
        return _inactive(res.params.sigma2, mask)

    lo, hi = lam0, lam0
    if inactive(hi):
        while inactive(lo):
            lo /= 2
            if lo < 1e-300:
                return 0.0
    else:
        while not inactive(hi):
            hi *= 2
            if hi > 1e300:
                raise VarCompError("no penalty level deactivates every penalized component")
    lo, hi = (lo, hi) if lo < hi else (hi / 2, hi)
    while hi / lo > 1 + rtol:
        mid = np.sqrt(lo * hi)
        if inactive(mid):
            hi = mid
        else:
            lo = mid
    return float(hi)


def default_grid(lam_max: float, n_lambda: int = 50, ratio: float = 1e-3) -> np.ndarray:
    return np.geomspace(lam_max, lam_max * ratio, n_lambda)


def _check_grid(grid):
    grid = np.asarray(grid, dtype=float).reshape(-1)
    if grid.shape[0] < 2:
        raise ValueError("a solution path needs at least two penalty levels")
    if np.any(~np.isfinite(grid)) or np.any(grid < 0):
        raise ValueError("penalty levels must be finite and >= 0")
    if np.any(np.diff(grid) >= 0):
        raise ValueError("penalty levels must be strictly decreasing")
    return grid


def solution_path(problem: VarCompProblem, lambda_grid, config: SolverConfig | None = None,
                  penalized=None) -> list:
    """Lasso fits along a decreasing grid with warm starts.

    Each fit starts from the previous solution, except that components at
    or near zero are reset to their initial values so they can re-enter.
    A failed grid point is recorded with its error and the path continues.
    """
    grid = _check_grid(lambda_grid)
    config = config or SolverConfig()
    mask = default_penalized(problem) if penalized is None else np.asarray(penalized, bool)
    start = config.start(problem.m)
    warm = start.copy()
    records = []
    for lam in grid:
        try:
            res = fit(problem, _lasso_config(config, lam, mask, warm))
        except VarCompError as exc:
            records.append(PathRecord(float(lam), np.full(problem.m, np.nan),
                                      error=f"{type(exc).__name__}: {exc}"))
            continue
        s2 = res.params.sigma2
        records.append(PathRecord(float(lam), s2.copy(), iterations=res.iterations,
                                  converged=res.converged, objective=res.objective))
        sigma = np.sqrt(s2)
        warm = np.where(sigma > ACTIVITY_RTOL * sigma.max(), s2, start)
    _mark_entries(records, mask)
    return records


def activity_threshold(records) -> float:
    top = max((np.nanmax(np.sqrt(r.sigma2)) for r in records if not r.error), default=0.0)
    return ACTIVITY_RTOL * top


def _mark_entries(records, mask):
    thr = activity_threshold(records)
    entered = {}
    for k, r in enumerate(records):
        if not r.error:
            for i in np.flatnonzero(mask):
                if i not in entered and np.sqrt(r.sigma2[i]) > thr:
                    entered[int(i)] = k
        r.entry_order = dict(entered)


def marginal_loglik(problem: VarCompProblem, component: int, penalized, config=None) -> float:
    """Log-likelihood of the model with one penalized basis plus all unpenalized ones."""
    keep = [i for i in range(problem.m) if i == component or not penalized[i]]
    sub = VarCompProblem(problem.y, problem.X, tuple(problem.V[i] for i in keep))
    base = config or SolverConfig()
    return fit(sub, replace(base, penalty=None, sigma2_init=None, accelerate=True)).loglik


def entry_ranking(records, problem: VarCompProblem, penalized=None, config=None) -> list:
    """Penalized components ordered by path entry.

    Ties (same grid index) and components that never enter are ordered by
    their marginal log-likelihood, higher first.
    """
    mask = default_penalized(problem) if penalized is None else np.asarray(penalized, bool)
    entry = records[-1].entry_order if records else {}
    rows = []
    for i in np.flatnonzero(mask):
        k = entry.get(int(i))
        rows.append({
            "component": int(i),
            "entry_index": k,
            "entry_lambda": None if k is None else records[k].lam,
            "marginal_loglik": marginal_loglik(problem, int(i), mask, config),
        })
    rows.sort(key=lambda r: (r["entry_index"] is None,
                             r["entry_index"] if r["entry_index"] is not None else 0,
                             -r["marginal_loglik"]))
    for rank, r in enumerate(rows, 1):
        r["rank"] = rank
    return rows


def path_csv(records) -> str:
    """One row per (penalty level, component)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lambda", "component", "sigma2", "active"])
    thr = activity_threshold(records)
    for r in records:
        for i, s in enumerate(r.sigma2):
            w.writerow([repr(r.lam), i, repr(float(s)), int(bool(np.sqrt(s) > thr))])
    return buf.getvalue()


def ranking_markdown(ranking, names=None) -> str:
    lines = ["| Rank | Component | Entry lambda | Marginal loglik |", "|---|---|---|---|"]
    for r in ranking:
        name = names[r["component"]] if names else str(r["component"])
        lam = "never" if r["entry_lambda"] is None else f"{r['entry_lambda']:.6g}"
        lines.append(f"| {r['rank']} | {name} | {lam} | {r['marginal_loglik']:.6f} |")
    return "\n".join(lines) + "\n"
