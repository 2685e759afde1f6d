import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from varcomp.simulation import gen_random_problem

settings.register_profile(
    "default", max_examples=40, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("default")

_CRITERIA = []


def random_suite(count, seed=2024):
    """Seeded random problems with n <= 30, m <= 5 and mixed PD / low-rank bases."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        n = int(rng.integers(4, 31))
        m = int(rng.integers(1, 6))
        p = int(rng.integers(0, 3))
        out.append(gen_random_problem(rng, n, m, p))
    return out


def random_spd(rng, d, jitter=1.0):
    M = rng.standard_normal((d, d))
    return M @ M.T + jitter * np.eye(d)


def random_psd(rng, n, k):
    Z = rng.standard_normal((n, k))
    return Z @ Z.T


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(label, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] {label}" + (f": {detail}" if detail else "")
        _CRITERIA.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)


def random_mvt_problem(rng, n, d, m, p=1, full_rank=False):
    """Response drawn from ``sum_i Gamma_i (x) V_i`` with random PD ``Gamma_i``.

    The last basis is ``I``. Each other basis is either full rank or leaves at
    least ``d`` residual dimensions outside its range (rank at most
    ``n - d - p``). Bases in between make the likelihood unbounded as the
    noise component collapses.
    """
    from varcomp import MultiVarCompProblem

    low_ranks = [] if full_rank else list(range(d, n - d - p + 1))

    def rank():
        return int(rng.choice(low_ranks)) if low_ranks and rng.random() < 0.5 else n

    V = [random_psd(rng, n, rank()) / n for _ in range(m - 1)] + [np.eye(n)]
    gammas = [random_spd(rng, d, 0.2) / d for _ in range(m)]
    omega = sum(np.kron(G, Vi) for G, Vi in zip(gammas, V))
    Y = (np.linalg.cholesky(omega) @ rng.standard_normal(n * d)).reshape(d, n).T
    X = np.ones((n, 1)) if p else None
    if X is not None:
        Y = Y + X @ rng.standard_normal((1, d))
    return MultiVarCompProblem(Y, X, tuple(V))
