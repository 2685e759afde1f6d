"""One-secant quasi-Newton acceleration of a fixed-point map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import VarCompError


@dataclass(frozen=True)
class SecantState:
    """Last iterate and its map image; empty before the first step.

    ``accepted`` records whether the previous call kept the extrapolated
    point.
    """

    prev_x: np.ndarray | None = None
    prev_fx: np.ndarray | None = None
    accepted: bool = False


def _safe(objective, x):
    try:
        val = objective(x)
    except VarCompError:
        return -np.inf
    return val if np.isfinite(val) else -np.inf


def secant_extrapolate(x, fx, prev_x, prev_fx):
    """Quasi-Newton root of ``x - F(x)`` with ``dF ~ w s^T / (s^T s)``.

    Here ``s = x - prev_x`` and ``w = F(x) - F(prev_x)``. Returns ``None``
    when the secant pair is degenerate.
    """
    g = fx - x
    s = x - prev_x
    w = fx - prev_fx
    ss = s @ s
    denom = ss - s @ w
    if ss == 0 or not np.any(g) or abs(denom) <= 1e-12 * ss:
        return None
    return fx + w * ((s @ g) / denom)


def accelerate(map_step, state: SecantState, current, objective, log_fallback=True):
    """Extrapolate the map ``F`` using the most recent secant pair.

    The proposal is ``F(x) + w (s^T g) / (s^T s - s^T w)`` with
    ``g = F(x) - x``. If it has a negative entry and ``log_fallback`` is
    set, the same extrapolation is redone on ``log(x)`` over the entries that
    are positive throughout the history (others take their ``F(x)`` value).
    A proposal is kept only when it is nonnegative and its objective is at
    least that of ``F(x)``; otherwise ``F(x)`` is returned.

    Parameters
    ----------
    map_step : callable
        The plain update ``x -> F(x)``.
    state : SecantState
        History from the previous call.
    current : ndarray
        Current iterate ``x``.
    objective : callable
        Function being maximized; may raise :class:`VarCompError`.
    log_fallback : bool

    Returns
    -------
    x_new : ndarray
    state : SecantState
    """
    x = np.asarray(current, dtype=float)
    fx = np.asarray(map_step(x), dtype=float)
    new_state = SecantState(prev_x=x, prev_fx=fx, accepted=False)
    if state.prev_x is None:
        return fx, new_state
    x_acc = secant_extrapolate(x, fx, state.prev_x, state.prev_fx)
    if x_acc is not None and np.any(x_acc < 0) and log_fallback:
        x_acc = _log_extrapolate(x, fx, state.prev_x, state.prev_fx)
    if x_acc is None or not np.all(np.isfinite(x_acc)) or np.any(x_acc < 0):
        return fx, new_state
    if _safe(objective, x_acc) >= _safe(objective, fx):
        return x_acc, SecantState(prev_x=x, prev_fx=fx, accepted=True)
    return fx, new_state


def _log_extrapolate(x, fx, prev_x, prev_fx):
    live = (x > 0) & (fx > 0) & (prev_x > 0) & (prev_fx > 0)
    if not live.any():
        return None
    logs = [np.log(v[live]) for v in (x, fx, prev_x, prev_fx)]
    step = secant_extrapolate(*logs)
    if step is None:
        return None
    out = fx.copy()
    with np.errstate(over="ignore"):
        out[live] = np.exp(step)
    return out
