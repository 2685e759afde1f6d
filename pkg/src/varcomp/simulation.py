"""Data generators and a replicate runner for solver comparisons."""

from __future__ import annotations

import csv
import io
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import linalg
from .exceptions import VarCompError
from .mm import SolverConfig, TwoVCEvaluator, _drive
from .model import DenseEvaluator, VarCompProblem

METHODS = {
    "MM": dict(strategy="MM", accelerate=False),
    "aMM": dict(strategy="MM", accelerate=True),
    "EM": dict(strategy="EM", accelerate=False),
    "FS": dict(strategy="FS", accelerate=False),
}


def _indicators(labels, k):
    Z = np.zeros((labels.shape[0], k))
    Z[np.arange(labels.shape[0]), labels] = 1.0
    return Z


def _draw(rng, mean, V, sigma2):
    omega = np.tensordot(sigma2, np.stack(V), axes=1)
    L = linalg.cholesky(omega)
    return mean + L @ rng.standard_normal(L.shape[0])


@dataclass(frozen=True)
class AnovaDesign:
    """Balanced two-way random effects layout.

    ``ratio`` is the main-effect A variance over the error variance; the B
    and interaction variances equal the error variance.
    """

    a: int
    b: int
    c: int
    ratio: float = 0.0
    seed: int = 0
    sigma_e2: float = 1.0
    mu: float = 0.0

    def __post_init__(self):
        if min(self.a, self.b, self.c) < 1:
            raise ValueError("a, b and c must be >= 1")
        if self.ratio < 0 or self.sigma_e2 <= 0:
            raise ValueError("ratio must be >= 0 and sigma_e2 > 0")

    @property
    def id(self) -> str:
        return f"anova:{self.a},{self.b},{self.c},{self.ratio:g}"

    def make(self, replicate: int = 0):
        return gen_two_way_anova(replace(self, seed=self.seed + replicate))


def anova_bases(a, b, c):
    """Indicator-product bases for factors A, B, their interaction, and error."""
    i, j, _ = np.meshgrid(np.arange(a), np.arange(b), np.arange(c), indexing="ij")
    i, j = i.ravel(), j.ravel()
    Za = _indicators(i, a)
    Zb = _indicators(j, b)
    Zab = _indicators(i * b + j, a * b)
    n = a * b * c
    return [Za @ Za.T, Zb @ Zb.T, Zab @ Zab.T, np.eye(n)]


def gen_two_way_anova(design: AnovaDesign):
    """Simulate one response from the two-way layout.

    Returns
    -------
    problem : VarCompProblem
        ``n = a b c``, intercept-only design, four bases.
    sigma2 : ndarray
        True variance components ``(ratio * s, s, s, s)``, ``s = sigma_e2``.
    """
    rng = np.random.default_rng(design.seed)
    V = anova_bases(design.a, design.b, design.c)
    n = V[0].shape[0]
    e = design.sigma_e2
    sigma2 = np.array([design.ratio * e, e, e, e])
    X = np.ones((n, 1))
    y = _draw(rng, np.full(n, design.mu), V, sigma2)
    return VarCompProblem(y, X, tuple(V)), sigma2


def synthetic_kinship(n: int, seed: int = 0, n_markers: int | None = None,
                      n_pops: int = 4, fst: float = 0.1) -> np.ndarray:
    """Genomic relationship matrix from simulated 0/1/2 genotypes.

    Individuals are spread over ``n_pops`` subpopulations whose allele
    frequencies drift from a common ancestor (Balding-Nichols), which gives
    the matrix some relatedness structure. A ``1e-3`` ridge keeps it positive
    definite; it is then scaled to unit diagonal.
    """
    rng = np.random.default_rng(seed)
    k = n_markers or max(1000, 5 * n)
    anc = rng.uniform(0.1, 0.9, size=k)
    shape = (1 - fst) / fst
    freqs = rng.beta(anc * shape, (1 - anc) * shape, size=(n_pops, k))
    freqs = np.clip(freqs, 0.01, 0.99)
    pop = rng.integers(0, n_pops, size=n)
    G = rng.binomial(2, freqs[pop]).astype(float)
    G -= G.mean(axis=0)
    K = G @ G.T / k + 1e-3 * np.eye(n)
    s = 1.0 / np.sqrt(np.diag(K))
    K = K * s[:, None] * s[None, :]
    K = (K + K.T) / 2
    np.fill_diagonal(K, 1.0)
    return K


@dataclass(frozen=True, eq=False)
class GeneticDesign:
    """Additive genetic model ``Omega = ratio * s K + s I`` with ``s = sigma_e2``.

    The kinship ``K`` is fixed across replicates; only the response is
    redrawn.
    """

    n: int
    ratio: float = 1.0
    seed: int = 0
    kinship: np.ndarray | None = None
    sigma_e2: float = 1.0
    mu: float = 0.0

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("n must be >= 2")
        if self.ratio < 0 or self.sigma_e2 <= 0:
            raise ValueError("ratio must be >= 0 and sigma_e2 > 0")
        K = self.kinship
        if K is None:
            K = synthetic_kinship(self.n, seed=self.seed)
        else:
            K = np.asarray(K, dtype=float)
            if K.shape != (self.n, self.n):
                raise ValueError(f"kinship has shape {K.shape}, expected {(self.n, self.n)}")
            linalg.cholesky(K)
        object.__setattr__(self, "kinship", K)

    @property
    def id(self) -> str:
        return f"genetic:{self.n},{self.ratio:g}"

    def make(self, replicate: int = 0):
        return gen_genetic(self.n, self.kinship, self.ratio, self.seed + replicate,
                           self.sigma_e2, self.mu)


def gen_genetic(n: int, kinship=None, ratio: float = 1.0, seed: int = 0,
                sigma_e2: float = 1.0, mu: float = 0.0):
    """Simulate a two-component genetic model.

    ``kinship=None`` builds :func:`synthetic_kinship` from ``seed``.

    Returns
    -------
    problem : VarCompProblem
        Bases ``(K, I)`` and an intercept-only design.
    sigma2 : ndarray
        ``(ratio * sigma_e2, sigma_e2)``.
    """
    if kinship is None:
        K = synthetic_kinship(n, seed=seed)
    else:
        K = np.asarray(kinship, dtype=float)
        linalg.cholesky(K)
    rng = np.random.default_rng(seed)
    V = [K, np.eye(n)]
    sigma2 = np.array([ratio * sigma_e2, sigma_e2])
    X = np.ones((n, 1))
    y = _draw(rng, np.full(n, mu), V, sigma2)
    return VarCompProblem(y, X, tuple(V)), sigma2


def gen_random_problem(rng, n: int, m: int, p: int = 1, pd_fraction: float = 0.5):
    """Random instance with ``m - 1`` PSD bases (some low rank) plus ``I``.

    The response is drawn from the model at random variance components.
    Low-rank bases together with ``X`` span fewer than ``n`` dimensions, so
    the likelihood stays bounded as the noise variance shrinks.
    """
    V = []
    budget = max(1, (n - p - 1) // max(1, m - 1))
    for _ in range(m - 1):
        if rng.random() < pd_fraction:
            k = n + int(rng.integers(0, 3))
        else:
            k = int(rng.integers(1, budget + 1))
        Z = rng.standard_normal((n, k))
        V.append(Z @ Z.T / k)
    V.append(np.eye(n))
    X = None
    if p > 0:
        X = np.column_stack([np.ones(n)] + [rng.standard_normal(n) for _ in range(p - 1)])
    sigma2 = rng.uniform(0.0, 2.0, size=m)
    sigma2[-1] = rng.uniform(0.3, 2.0)
    mean = np.zeros(n) if X is None else X @ rng.standard_normal(p)
    y = _draw(rng, mean, V, sigma2)
    return VarCompProblem(y, X, tuple(V))


def gen_planted(seed: int, n: int = 100, n_candidates: int = 3, n_variants: int = 20,
                signal: float = 1.0, sigma_e2: float = 1.0):
    """Candidate kernels ``Z_i Z_i^T / k`` with one carrying signal.

    The planted index is drawn from the seed so position carries no
    information. The noise basis ``I`` is appended last.

    Returns
    -------
    problem : VarCompProblem
    planted : int
    """
    rng = np.random.default_rng(seed)
    V = []
    for _ in range(n_candidates):
        Z = rng.binomial(2, rng.uniform(0.05, 0.5, size=n_variants), size=(n, n_variants)).astype(float)
        Z -= Z.mean(axis=0)
        Z /= np.where(Z.std(axis=0) > 0, Z.std(axis=0), 1.0)
        V.append(Z @ Z.T / n_variants)
    V.append(np.eye(n))
    planted = int(rng.integers(n_candidates))
    sigma2 = np.zeros(n_candidates + 1)
    sigma2[planted] = signal
    sigma2[-1] = sigma_e2
    X = np.ones((n, 1))
    y = _draw(rng, np.zeros(n), V, sigma2)
    return VarCompProblem(y, X, tuple(V)), planted


@dataclass
class ExperimentRecord:
    scenario: str
    method: str
    replicate: int
    iterations: int
    runtime: float
    objective: float
    converged: bool
    failed: bool = False
    error: str = ""


def _one_run(scenario, replicate, method, base: SolverConfig, fast_two_vc: bool):
    problem, _ = scenario.make(replicate)
    config = replace(base, **METHODS[method])
    t0 = time.perf_counter()
    try:
        if fast_two_vc and problem.m == 2:
            res = _drive(problem, TwoVCEvaluator(problem), config)
        else:
            res = _drive(problem, DenseEvaluator(problem), config)
    except VarCompError as exc:
        return ExperimentRecord(scenario.id, method, replicate, 0, time.perf_counter() - t0,
                                float("nan"), False, True, f"{type(exc).__name__}: {exc}")
    return ExperimentRecord(scenario.id, method, replicate, res.iterations,
                            time.perf_counter() - t0, res.objective, res.converged)


@dataclass
class Aggregate:
    scenario: str
    method: str
    iterations_mean: float
    iterations_sd: float
    runtime_mean: float
    runtime_sd: float
    n_ok: int
    n_failed: int


def _mean_sd(x):
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return float("nan"), float("nan")
    return float(x.mean()), float(x.std(ddof=1)) if x.size > 1 else 0.0


def aggregate(records) -> list:
    """Mean and SD per (scenario, method), excluding failed runs."""
    groups = {}
    for r in sorted(records, key=lambda r: (r.scenario, r.method, r.replicate)):
        groups.setdefault((r.scenario, r.method), []).append(r)
    out = []
    for (scenario, method), rs in groups.items():
        ok = [r for r in rs if not r.failed]
        im, isd = _mean_sd([r.iterations for r in ok])
        tm, tsd = _mean_sd([r.runtime for r in ok])
        out.append(Aggregate(scenario, method, im, isd, tm, tsd, len(ok), len(rs) - len(ok)))
    return out


def run_experiment(scenarios, replicates: int, methods=("MM", "aMM", "EM", "FS"),
                   config: SolverConfig | None = None, fast_two_vc: bool = True,
                   threads: int | None = None):
    """Fit every (scenario, replicate, method) combination.

    Replicates run on a thread pool of ``threads`` workers (default from the
    ``VARCOMP_THREADS`` environment variable, else 1). Runtime is wall time
    around the fit only.

    Returns
    -------
    records : list of ExperimentRecord
        Sorted by scenario, method and replicate.
    aggregates : list of Aggregate
    """
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValueError(f"unknown methods {unknown}; choose from {sorted(METHODS)}")
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    config = config or SolverConfig()
    if threads is None:
        threads = int(os.environ.get("VARCOMP_THREADS", "1"))
    jobs = [(s, r, m) for s in scenarios for r in range(replicates) for m in methods]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        records = list(pool.map(lambda job: _one_run(*job, config, fast_two_vc), jobs))
    records.sort(key=lambda r: (r.scenario, r.method, r.replicate))
    return records, aggregate(records)


def records_csv(records) -> str:
    buf = io.StringIO()
    fields = list(ExperimentRecord.__dataclass_fields__)
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for r in records:
        row = asdict(r)
        row["runtime"] = repr(r.runtime)
        row["objective"] = repr(r.objective)
        writer.writerow(row)
    return buf.getvalue()


def aggregates_markdown(aggs, methods=None) -> str:
    """Two tables (iterations, runtime) with ``mean(sd)`` cells."""
    methods = list(methods or dict.fromkeys(a.method for a in aggs))
    scenarios = list(dict.fromkeys(a.scenario for a in aggs))
    cell = {(a.scenario, a.method): a for a in aggs}
    lines = []
    for title, key, fmt in (("Iterations", "iterations", "{:.2f}({:.2f})"),
                            ("Runtime (s)", "runtime", "{:.4f}({:.4f})")):
        lines.append(f"### {title}\n")
        lines.append("| scenario | " + " | ".join(methods) + " |")
        lines.append("|---" * (len(methods) + 1) + "|")
        for s in scenarios:
            row = []
            for m in methods:
                a = cell.get((s, m))
                if a is None or a.n_ok == 0:
                    row.append("n/a")
                    continue
                txt = fmt.format(getattr(a, f"{key}_mean"), getattr(a, f"{key}_sd"))
                if a.n_failed:
                    txt += f" [{a.n_failed} failed]"
                row.append(txt)
            lines.append(f"| {s} | " + " | ".join(row) + " |")
        lines.append("")
    return "\n".join(lines)
