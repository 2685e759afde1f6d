import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from varcomp import (
    MultiVarCompProblem,
    MvtParameters,
    Parameters,
    SolverConfig,
    VarCompProblem,
    assemble_omega,
    fit,
    fit_mvt,
    fit_mvt_two_vc,
    fit_two_vc,
    gamma_coefficient_matrix,
    log_likelihood,
    mm_step_sigma2,
    mvt_log_likelihood,
    mvt_mm_step,
)
from varcomp.exceptions import DimensionMismatch, SingularOmega
from varcomp.multivariate import MvtTwoVCEvaluator, assemble_mvt_omega, gamma_kkt_residual, mvt_state
from varcomp.penalized import PenaltySpec
from varcomp.simulation import gen_random_problem

from .conftest import random_mvt_problem, random_spd

seeds = st.integers(0, 2**32 - 1)


def dense_mvt_loglik(problem, B, gammas):
    omega = sum(np.kron(G, V) for G, V in zip(gammas, problem.V))
    e = problem.residual(B).reshape(-1, order="F")
    return -0.5 * np.linalg.slogdet(omega)[1] - 0.5 * e @ np.linalg.solve(omega, e)


def as_mvt(problem: VarCompProblem) -> MultiVarCompProblem:
    return MultiVarCompProblem(problem.y[:, None], problem.X, problem.V)


def min_eig(gammas):
    return min(np.linalg.eigvalsh(G).min() for G in gammas)


def test_kronecker_mixed_product():
    rng = np.random.default_rng(0)
    A, C = rng.standard_normal((2, 2, 2))
    B, D = rng.standard_normal((2, 3, 3))
    np.testing.assert_allclose(np.kron(A, B) @ np.kron(C, D), np.kron(A @ C, B @ D), atol=1e-13)


class TestProblem:
    def test_vector_response_becomes_column(self):
        p = MultiVarCompProblem(np.arange(3.0), None, (np.eye(3),))
        assert (p.n, p.d, p.m, p.p) == (3, 1, 1, 0)

    def test_bad_gamma_shape(self):
        p = MultiVarCompProblem(np.zeros((3, 2)), None, (np.eye(3),))
        with pytest.raises(DimensionMismatch):
            mvt_log_likelihood(p, MvtParameters(np.zeros((0, 2)), [np.eye(3)]))

    def test_bad_gamma_count(self):
        p = MultiVarCompProblem(np.zeros((3, 2)), None, (np.eye(3),))
        with pytest.raises(DimensionMismatch):
            assemble_mvt_omega(p, [np.eye(2), np.eye(2)])


class TestLogLikelihood:
    @given(seeds)
    def test_single_response_matches_univariate(self, seed):
        rng = np.random.default_rng(seed)
        p = gen_random_problem(rng, int(rng.integers(3, 12)), int(rng.integers(1, 4)))
        s = rng.uniform(0.2, 2.0, p.m)
        beta = rng.standard_normal(p.p)
        uni = log_likelihood(p, Parameters(beta, s))
        mvt = mvt_log_likelihood(as_mvt(p), MvtParameters(beta[:, None], [[[si]] for si in s]))
        assert mvt == pytest.approx(uni, rel=1e-10, abs=1e-12)

    def test_zero_response(self):
        p = MultiVarCompProblem(np.zeros((1, 3)), None, (np.eye(1),))
        assert mvt_log_likelihood(p, MvtParameters(np.zeros((0, 3)), [np.eye(3)])) == 0.0

    def test_dense_oracle(self):
        rng = np.random.default_rng(1)
        p = random_mvt_problem(rng, 3, 2, 2)
        B = rng.standard_normal((1, 2))
        gammas = [random_spd(rng, 2) for _ in range(2)]
        expected = dense_mvt_loglik(p, B, gammas)
        assert mvt_log_likelihood(p, MvtParameters(B, gammas)) == pytest.approx(expected, rel=1e-9)


class TestCoefficientMatrix:
    def test_single_response_is_trace(self):
        rng = np.random.default_rng(2)
        p = gen_random_problem(rng, 6, 2)
        om = assemble_omega(p, [0.7, 1.3])
        M = gamma_coefficient_matrix(p.V[0], om.inverse, 1)
        assert M[0, 0] == pytest.approx(np.trace(om.inverse @ p.V[0]), rel=1e-12)

    def test_identity(self):
        n, d = 4, 3
        np.testing.assert_allclose(gamma_coefficient_matrix(np.eye(n), np.eye(n * d), d), n * np.eye(d))

    def test_block_trace_oracle(self):
        rng = np.random.default_rng(3)
        p = random_mvt_problem(rng, 5, 3, 2)
        W = np.linalg.inv(assemble_mvt_omega(p, [random_spd(rng, 3) for _ in range(2)]).omega)
        n, d = p.n, p.d
        for V in p.V:
            M = gamma_coefficient_matrix(V, W, d)
            oracle = np.array([[np.trace(W[j * n:(j + 1) * n, k * n:(k + 1) * n] @ V)
                                for k in range(d)] for j in range(d)])
            np.testing.assert_allclose(M, oracle, rtol=1e-11, atol=1e-11 * np.abs(oracle).max())
            assert np.linalg.eigvalsh(M).min() > 0


class TestMMStep:
    @given(seeds)
    def test_single_response_matches_univariate(self, seed):
        rng = np.random.default_rng(seed)
        p = gen_random_problem(rng, int(rng.integers(3, 12)), int(rng.integers(1, 4)))
        s = rng.uniform(0.2, 2.0, p.m)
        beta = rng.standard_normal(p.p)
        uni = mm_step_sigma2(p, Parameters(beta, s))
        mvt = mvt_mm_step(as_mvt(p), MvtParameters(beta[:, None], [[[si]] for si in s]))
        np.testing.assert_allclose([G[0, 0] for G in mvt], uni, rtol=1e-10)

    def test_fixed_point(self):
        Y = np.random.default_rng(4).standard_normal((6, 2))
        p = MultiVarCompProblem(Y, None, (np.eye(6),))
        G = Y.T @ Y / 6
        (G_new,) = mvt_mm_step(p, MvtParameters(np.zeros((0, 2)), [G]))
        np.testing.assert_allclose(G_new, G, atol=1e-9)

    def test_riccati_residual(self):
        rng = np.random.default_rng(5)
        p = random_mvt_problem(rng, 3, 2, 2)
        gammas = [random_spd(rng, 2) for _ in range(2)]
        st_ = mvt_state(p, gammas, rng.standard_normal((1, 2)))
        for G, M, A in zip(st_.mm_update(), st_.M, st_.A):
            assert np.linalg.norm(G @ M @ G - A) <= 1e-8 * max(np.linalg.norm(A), 1.0)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        p = random_mvt_problem(rng, 7, 2, 2)
        gammas = [random_spd(rng, 2) for _ in range(2)]
        grads = mvt_state(p, gammas).gradient()
        h = 1e-6
        for i in range(2):
            for j, k in [(0, 0), (0, 1), (1, 1)]:
                E = np.zeros((2, 2))
                E[j, k] = E[k, j] = 1.0
                up = [G + h * E if t == i else G for t, G in enumerate(gammas)]
                down = [G - h * E if t == i else G for t, G in enumerate(gammas)]
                fd = (mvt_state(p, up).loglik - mvt_state(p, down).loglik) / (2 * h)
                assert np.sum(grads[i] * E) == pytest.approx(fd, rel=1e-5, abs=1e-7)


class TestFit:
    def test_single_response_matches_univariate(self):
        p = gen_random_problem(np.random.default_rng(7), 12, 3)
        uni = fit(p, SolverConfig())
        mvt = fit_mvt(as_mvt(p), SolverConfig())
        assert mvt.objective == pytest.approx(uni.objective, rel=1e-8)

    def test_matrix_normal_closed_form(self):
        Y = np.random.default_rng(8).standard_normal((10, 3))
        p = MultiVarCompProblem(Y, None, (np.eye(10),))
        res = fit_mvt(p, SolverConfig(rel_tol=1e-14, max_iter=10000))
        np.testing.assert_allclose(res.params.Gamma[0], Y.T @ Y / 10, rtol=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_ascent(self, seed):
        p = random_mvt_problem(np.random.default_rng(50 + seed), 8, 2, 2)
        obj = np.array(fit_mvt(p, SolverConfig()).trace.objective)
        assert np.all(np.diff(obj) >= -1e-9 * (1 + np.abs(obj[:-1])))

    def test_result_fields(self):
        p = random_mvt_problem(np.random.default_rng(9), 20, 2, 2)
        res = fit_mvt(p, SolverConfig(record_iterates=True))
        assert res.converged
        assert res.params.B.shape == (1, 2)
        assert len(res.iterates) == res.iterations + 1
        assert np.isfinite(res.trace.kkt_residual)

    def test_gamma_init(self):
        p = random_mvt_problem(np.random.default_rng(10), 20, 2, 2)
        start = [np.diag([2.0, 1.0]), 0.5 * np.eye(2)]
        res = fit_mvt(p, SolverConfig(record_iterates=True, max_iter=1), gamma_init=start)
        np.testing.assert_array_equal(res.iterates[0][0], start[0])

    def test_rejects_indefinite_start(self):
        p = random_mvt_problem(np.random.default_rng(10), 10, 2, 1)
        with pytest.raises(Exception):
            fit_mvt(p, SolverConfig(), gamma_init=[np.diag([1.0, -1.0])])

    @pytest.mark.parametrize("config", [SolverConfig(strategy="EM"), SolverConfig(accelerate=True),
                                        SolverConfig(penalty=PenaltySpec.ridge(1.0))])
    def test_unsupported_configurations(self, config):
        p = random_mvt_problem(np.random.default_rng(11), 10, 2, 2)
        with pytest.raises(ValueError):
            fit_mvt(p, config)

    def test_unbounded_likelihood_raises(self):
        # a rank n-1 basis with an intercept leaves no residual room for the
        # noise component, so its determinant can be driven to zero
        rng = np.random.default_rng(12)
        n, d = 7, 2
        Z = rng.standard_normal((n, n - 1))
        p = MultiVarCompProblem(rng.standard_normal((n, d)), np.ones((n, 1)), (Z @ Z.T / n, np.eye(n)))
        with pytest.raises(SingularOmega):
            fit_mvt(p, SolverConfig(max_iter=5000))


class TestKkt:
    def test_scalar_rule(self):
        assert gamma_kkt_residual(np.array([[0.0]]), np.array([[-0.5]])) == 0.0
        assert gamma_kkt_residual(np.array([[0.0]]), np.array([[0.5]])) == 0.5
        assert gamma_kkt_residual(np.array([[1.0]]), np.array([[-0.3]])) == pytest.approx(0.3)

    def test_boundary_direction(self):
        G = np.diag([2.0, 0.0])
        assert gamma_kkt_residual(G, np.diag([0.0, -1.0])) == 0.0
        assert gamma_kkt_residual(G, np.diag([0.0, 1.0])) == 1.0
        assert gamma_kkt_residual(G, np.array([[0.0, 0.2], [0.2, -1.0]])) == pytest.approx(0.2)

    def test_rotation_invariant(self):
        rng = np.random.default_rng(20)
        Q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        G = np.diag([1.0, 0.5, 0.0])
        g = np.diag([0.0, 0.0, -2.0])
        assert gamma_kkt_residual(Q @ G @ Q.T, Q @ g @ Q.T) == pytest.approx(0.0, abs=1e-12)

    def test_interior_fit_converges_to_stationary_point(self):
        p = random_mvt_problem(np.random.default_rng(25), 60, 2, 2, full_rank=True)
        res = fit_mvt(p, SolverConfig(rel_tol=1e-12, max_iter=20000))
        assert min_eig(res.params.Gamma) > 1e-3
        assert res.trace.kkt_residual <= 1e-4 * p.n


class TestPositiveDefiniteness:
    def test_interior_iterates_positive_definite(self):
        rng = np.random.default_rng(13)
        for _ in range(5):
            p = random_mvt_problem(rng, 50, 2, 2, full_rank=True)
            res = fit_mvt(p, SolverConfig(record_iterates=True))
            assert min(min_eig(g) for g in res.iterates) > 0

    def test_boundary_iterates_stay_semidefinite(self):
        # small samples often put the optimum on a singular Gamma; iterates
        # then approach it from inside, down to rounding level
        rng = np.random.default_rng(14)
        for _ in range(10):
            p = random_mvt_problem(rng, int(rng.integers(6, 12)), 2, 2)
            res = fit_mvt(p, SolverConfig(record_iterates=True))
            for gammas in res.iterates:
                for G in gammas:
                    assert np.linalg.eigvalsh(G).min() >= -1e-14 * np.abs(G).max()


class TestTwoComponentPath:
    @given(seeds)
    def test_iterates_match_dense(self, seed):
        rng = np.random.default_rng(seed)
        p = random_mvt_problem(rng, 6, 2, 2)
        cfg = SolverConfig(record_iterates=True, max_iter=25)
        a, b = fit_mvt(p, cfg), fit_mvt_two_vc(p, cfg)
        assert b.info["fast_path"]
        for ga, gb in zip(a.iterates, b.iterates):
            for Ga, Gb in zip(ga, gb):
                np.testing.assert_allclose(Gb, Ga, rtol=1e-8, atol=1e-8 * np.abs(Ga).max())

    def test_single_response_matches_univariate_fast_path(self):
        p = gen_random_problem(np.random.default_rng(15), 10, 2)
        cfg = SolverConfig(record_iterates=True)
        uni = fit_two_vc(p, cfg)
        mvt = fit_mvt_two_vc(as_mvt(p), cfg)
        assert mvt.iterations == uni.iterations
        for s, g in zip(uni.iterates, mvt.iterates):
            np.testing.assert_allclose([G[0, 0] for G in g], s, rtol=1e-9, atol=1e-14)

    def test_objective_matches_dense(self):
        rng = np.random.default_rng(16)
        for _ in range(5):
            p = random_mvt_problem(rng, int(rng.integers(10, 30)), int(rng.integers(1, 4)), 2)
            a, b = fit_mvt(p, SolverConfig()), fit_mvt_two_vc(p, SolverConfig())
            assert b.objective == pytest.approx(a.objective, rel=1e-7)

    def test_state_matches_dense_state(self):
        rng = np.random.default_rng(17)
        p = random_mvt_problem(rng, 9, 3, 2)
        gammas = [random_spd(rng, 3) for _ in range(2)]
        dense, fast = mvt_state(p, gammas), MvtTwoVCEvaluator(p)(gammas)
        assert fast.loglik == pytest.approx(dense.loglik, rel=1e-10)
        np.testing.assert_allclose(fast.B, dense.B, rtol=1e-9, atol=1e-12)
        for name in ("M", "A", "S"):
            for x, y in zip(getattr(fast, name), getattr(dense, name)):
                np.testing.assert_allclose(x, y, rtol=1e-8, atol=1e-10 * np.abs(y).max())

    def test_near_singular_noise_component(self):
        # the fast path pivots on the better conditioned Gamma
        rng = np.random.default_rng(18)
        p = random_mvt_problem(rng, 9, 2, 2, full_rank=True)
        gammas = [random_spd(rng, 2), np.diag([1.0, 1e-14])]
        dense, fast = mvt_state(p, gammas), MvtTwoVCEvaluator(p)(gammas)
        assert fast.loglik == pytest.approx(dense.loglik, rel=1e-8)

    def test_proportional_components_ascend(self):
        rng = np.random.default_rng(19)
        n = 12
        Y = rng.standard_normal((n, 2))
        p = MultiVarCompProblem(Y, np.ones((n, 1)), (3.0 * np.eye(n), np.eye(n)))
        G = random_spd(rng, 2)
        res = fit_mvt_two_vc(p, SolverConfig(), gamma_init=[2.0 * G, G])
        obj = np.array(res.trace.objective)
        assert np.all(np.diff(obj) >= -1e-9 * (1 + np.abs(obj[:-1])))

    def test_needs_two_bases(self):
        p = MultiVarCompProblem(np.zeros((3, 2)), None, (np.eye(3),))
        with pytest.raises(ValueError):
            fit_mvt_two_vc(p)
