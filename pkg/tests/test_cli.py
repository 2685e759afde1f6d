import json
import subprocess
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from varcomp import SolverConfig, VarCompProblem, fit
from varcomp.bundle import load_bundle, write_bundle
from varcomp.cli import main
from varcomp.simulation import AnovaDesign, gen_genetic, gen_random_problem

SCHEMAS = Path(__file__).resolve().parents[1] / "docs" / "schemas"


def schema(name):
    return json.loads((SCHEMAS / f"{name}.schema.json").read_text())


def run(argv, capsys):
    try:
        code = main([str(a) for a in argv])
    except SystemExit as exc:
        code = exc.code
    out, err = capsys.readouterr()
    return code, out, err


def run_json(argv, capsys):
    code, out, err = run(argv, capsys)
    return code, json.loads(out) if out else None, err


@pytest.fixture
def toy2(tmp_path):
    p = gen_random_problem(np.random.default_rng(1), 12, 2)
    write_bundle(tmp_path / "toy2", p.y, p.X, p.V, ["kernel", "noise"])
    return tmp_path / "toy2", p


@pytest.fixture
def toy4(tmp_path):
    # interior optimum; boundary optima leave EM crawling sublinearly
    p, _ = AnovaDesign(4, 4, 3, ratio=1.0, seed=1).make(0)
    write_bundle(tmp_path / "toy4", p.y, p.X, p.V)
    return tmp_path / "toy4", p


class TestFit:
    def test_smoke(self, toy2, capsys):
        code, res, _ = run_json(["fit", toy2[0]], capsys)
        assert code == 0
        assert len(res["sigma2"]) == 2 and res["converged"] is True
        assert res["components"] == ["kernel", "noise"]
        jsonschema.validate(res, schema("fit_result"))

    def test_reml_sample_variance(self, tmp_path, capsys):
        y = np.array([0.4, 1.9, -0.6, 2.2, 0.8, 1.1])
        write_bundle(tmp_path, y, np.ones((6, 1)), [np.eye(6)])
        code, res, _ = run_json(["fit", tmp_path, "--reml", "--tol", "1e-15", "--max-iter",
                                 "100000"], capsys)
        assert code == 0
        assert res["sigma2"][0] == pytest.approx(np.var(y, ddof=1), rel=1e-6)
        assert res["reml"] is True

    def test_em_against_mm(self, toy4, capsys):
        base = ["fit", toy4[0], "--tol", "1e-10", "--max-iter", "100000"]
        _, mm, _ = run_json(base, capsys)
        _, em, _ = run_json(base + ["--method", "em"], capsys)
        assert em["loglik"] == pytest.approx(mm["loglik"], abs=1e-5)
        assert em["iterations"] >= mm["iterations"]

    def test_trace_and_out_file(self, toy2, tmp_path, capsys):
        out = tmp_path / "res.json"
        code, stdout, _ = run(["fit", toy2[0], "--trace", "--out", out], capsys)
        assert code == 0 and stdout == ""
        res = json.loads(out.read_text())
        assert len(res["trace"]) == res["iterations"] + 1
        jsonschema.validate(res, schema("fit_result"))

    @pytest.mark.parametrize("extra", [["--accelerate"], ["--method", "fs"], ["--method", "hybrid"],
                                       ["--fast-2vc"], ["--penalty", "ridge:0.5"],
                                       ["--penalty", "lasso:0.5"]])
    def test_variants(self, toy2, capsys, extra):
        code, res, _ = run_json(["fit", toy2[0], *extra], capsys)
        assert code == 0
        jsonschema.validate(res, schema("fit_result"))

    def test_map_prior_file(self, toy2, tmp_path, capsys):
        prior = tmp_path / "prior.json"
        prior.write_text(json.dumps({"alpha": [1.0, 1.0], "gamma": [0.5, 0.5]}))
        code, res, _ = run_json(["fit", toy2[0], "--penalty", f"map:{prior}"], capsys)
        assert code == 0 and min(res["sigma2"]) > 0

    def test_not_converged_still_emits(self, toy2, capsys):
        code, res, _ = run_json(["fit", toy2[0], "--max-iter", "1"], capsys)
        assert code == 3
        assert res["converged"] is False and res["iterations"] == 1

    def test_solver_failure(self, tmp_path, capsys):
        write_bundle(tmp_path, np.ones(2), None, [np.diag([1.0, 0.0])])
        code, out, err = run(["fit", tmp_path], capsys)
        assert code == 2 and out == ""
        assert "SingularOmega" in err

    @pytest.mark.parametrize("extra", [["--penalty", "elastic:1"], ["--penalty", "ridge:x"],
                                       ["--method", "newton"], ["--tol", "0"],
                                       ["--fast-2vc", "--reml"]])
    def test_bad_flags(self, toy2, capsys, extra):
        code, out, err = run(["fit", toy2[0], *extra], capsys)
        assert code == 1 and out == "" and err

    def test_fast_path_needs_two_bases(self, toy4, capsys):
        code, _, err = run(["fit", toy4[0], "--fast-2vc"], capsys)
        assert code == 1 and "two" in err

    def test_missing_files(self, tmp_path, capsys):
        code, _, err = run(["fit", tmp_path / "nowhere"], capsys)
        assert code == 1 and "cannot read" in err

    def test_multivariate_response_rejected(self, tmp_path, capsys):
        write_bundle(tmp_path, np.ones((4, 2)), None, [np.eye(4)])
        code, _, err = run(["fit", tmp_path], capsys)
        assert code == 1 and "fit-mvt" in err

    def test_round_trip_bitwise(self, tmp_path, capsys):
        code, _, _ = run(["simulate", "--design", "genetic:30,1", "--seed", "4",
                          "--out-dir", tmp_path], capsys)
        assert code == 0
        truth = json.loads((tmp_path / "truth.json").read_text())
        jsonschema.validate(truth, schema("simulation_truth"))
        p, s = gen_genetic(30, ratio=1.0, seed=4)
        data = load_bundle(tmp_path)
        assert data.y[:, 0].tobytes() == p.y.tobytes()
        assert all(a.tobytes() == b.tobytes() for a, b in zip(data.V, p.V))
        assert truth["sigma2"] == list(s)
        _, res, _ = run_json(["fit", tmp_path], capsys)
        direct = fit(p, SolverConfig())
        assert res["sigma2"] == direct.params.sigma2.tolist()
        assert res["loglik"] == direct.loglik


class TestFitMvt:
    def test_single_response_matches_fit(self, toy2, capsys):
        _, uni, _ = run_json(["fit", toy2[0], "--tol", "1e-12"], capsys)
        code, mvt, _ = run_json(["fit-mvt", toy2[0], "--tol", "1e-12"], capsys)
        assert code == 0
        jsonschema.validate(mvt, schema("mvt_result"))
        got = [G[0][0] for G in mvt["Gamma"]]
        np.testing.assert_allclose(got, uni["sigma2"], rtol=1e-8)
        assert mvt["loglik"] == pytest.approx(uni["loglik"], rel=1e-8)
        np.testing.assert_allclose(np.ravel(mvt["B"]), uni["beta"], rtol=1e-8)

    def test_fast_path_matches_dense(self, tmp_path, capsys):
        rng = np.random.default_rng(5)
        n = 8
        Z = rng.standard_normal((n, n))
        V = [Z @ Z.T / n, np.eye(n)]
        Y = rng.standard_normal((n, 2)) @ np.array([[1.0, 0.3], [0.0, 0.8]])
        write_bundle(tmp_path, Y, np.ones((n, 1)), V)
        _, dense, _ = run_json(["fit-mvt", tmp_path, "--tol", "1e-10"], capsys)
        code, fast, _ = run_json(["fit-mvt", tmp_path, "--tol", "1e-10", "--fast-2vc"], capsys)
        assert code == 0
        assert fast["loglik"] == pytest.approx(dense["loglik"], rel=1e-7)
        assert np.shape(fast["B"]) == (1, 2)
        assert all(np.shape(G) == (2, 2) for G in fast["Gamma"])

    def test_gamma_init_and_prior(self, tmp_path, capsys):
        rng = np.random.default_rng(6)
        n = 15
        Y = rng.standard_normal((n, 2))
        write_bundle(tmp_path, Y, np.ones((n, 1)), [np.diag(rng.uniform(0, 1, n)), np.eye(n)])
        init = tmp_path / "init.json"
        init.write_text(json.dumps([np.eye(2).tolist(), (2 * np.eye(2)).tolist()]))
        prior = tmp_path / "prior.json"
        prior.write_text(json.dumps({"nu": [4, 4], "psi": [np.eye(2).tolist()] * 2}))
        code, res, _ = run_json(["fit-mvt", tmp_path, "--gamma-init", init,
                                 "--penalty", f"map:{prior}", "--trace"], capsys)
        assert code == 0
        assert all(np.linalg.eigvalsh(G).min() > 0 for G in res["Gamma"])
        jsonschema.validate(res, schema("mvt_result"))

    def test_malformed_dimensions(self, tmp_path, capsys):
        write_bundle(tmp_path, np.ones((4, 2)), None, [np.eye(4), np.eye(3)])
        code, out, err = run(["fit-mvt", tmp_path], capsys)
        assert code == 1 and out == "" and err

    @pytest.mark.parametrize("content", [
        [[[1.0, 0.0], [0.0, 1.0]]],
        [[[1.0, 0.0], [0.0, 1.0]], [[1.0]]],
        "not a list",
    ])
    def test_bad_gamma_init(self, tmp_path, capsys, content):
        write_bundle(tmp_path, np.ones((4, 2)), None, [np.diag([1.0, 0, 0, 0]), np.eye(4)])
        init = tmp_path / "init.json"
        init.write_text(json.dumps(content))
        code, _, _ = run(["fit-mvt", tmp_path, "--gamma-init", init], capsys)
        assert code == 1

    def test_ridge_rejected(self, toy2, capsys):
        code, _, _ = run(["fit-mvt", toy2[0], "--penalty", "ridge:1"], capsys)
        assert code == 1


class TestPath:
    @pytest.mark.slow
    def test_planted_component_ranked_first(self, tmp_path, capsys):
        hits = 0
        seeds = range(5)
        for seed in seeds:
            d = tmp_path / f"s{seed}"
            truth_code, _, _ = run(["simulate", "--design", "planted:60", "--seed", seed,
                                    "--out-dir", d], capsys)
            assert truth_code == 0
            planted = json.loads((d / "truth.json").read_text())["planted"]
            code, out, _ = run(["path", d, "--n-lambda", "15", "--out-dir", d / "out"], capsys)
            assert code in (0, 3)
            ranking = json.loads((d / "out" / "ranking.json").read_text())
            jsonschema.validate(ranking, schema("path_ranking"))
            hits += ranking["ranking"][0]["component"] == planted
            assert out.startswith("| Rank |")
        assert hits >= 0.9 * len(seeds)

    def test_auto_grid_endpoints(self, tmp_path, capsys):
        run(["simulate", "--design", "planted:40", "--seed", "1", "--out-dir", tmp_path], capsys)
        code, _, _ = run(["path", tmp_path, "--n-lambda", "5", "--lambda-ratio", "0.01",
                          "--out-dir", tmp_path / "out"], capsys)
        assert code in (0, 3)
        res = json.loads((tmp_path / "out" / "ranking.json").read_text())
        grid = res["lambda_grid"]
        assert grid[0] == res["lambda_max"]
        assert grid[-1] == pytest.approx(0.01 * grid[0])
        first = np.array(res["points"][0]["sigma2"])
        sd = np.sqrt(first)
        assert np.all(sd[:3] <= 1e-8 * sd.max())
        csv_lines = (tmp_path / "out" / "path.csv").read_text().strip().splitlines()
        assert len(csv_lines) == 1 + 5 * 4
        assert (tmp_path / "out" / "ranking.md").read_text().startswith("| Rank |")

    def test_explicit_grid(self, tmp_path, capsys):
        run(["simulate", "--design", "planted:30", "--out-dir", tmp_path], capsys)
        code, _, _ = run(["path", tmp_path, "--lambda-grid", "5,1,0.2", "--penalize", "0,1,2",
                          "--out-dir", tmp_path / "out"], capsys)
        assert code in (0, 3)
        res = json.loads((tmp_path / "out" / "ranking.json").read_text())
        assert res["lambda_grid"] == [5.0, 1.0, 0.2] and res["lambda_max"] is None

    @pytest.mark.parametrize("extra", [["--lambda-grid", "1.0"], ["--lambda-grid", "1,2"],
                                       ["--lambda-grid", "a,b"], ["--penalize", "7"],
                                       ["--n-lambda", "1"]])
    def test_bad_grid(self, toy2, tmp_path, capsys, extra):
        code, _, err = run(["path", toy2[0], *extra, "--out-dir", tmp_path / "out"], capsys)
        assert code == 1 and err


class TestBench:
    def test_record_count(self, tmp_path, capsys):
        code, out, _ = run(["bench", "--design", "anova:5,5,2,0", "--replicates", "3",
                            "--methods", "mm,em", "--out-dir", tmp_path], capsys)
        assert code == 0
        lines = (tmp_path / "records.csv").read_text().strip().splitlines()
        assert len(lines) == 1 + 6
        assert "| anova:5,5,2,0 |" in out
        assert (tmp_path / "summary.md").read_text() == out

    @pytest.mark.slow
    def test_genetic_smoke_timing(self, capsys):
        t0 = time.perf_counter()
        code, out, _ = run(["bench", "--design", "genetic:50,1", "--replicates", "2"], capsys)
        assert code == 0 and "genetic:50,1" in out
        assert time.perf_counter() - t0 < 60

    @pytest.mark.parametrize("argv", [
        ["--design", "anova:5,5,2,0", "--methods", "mm,newton"],
        ["--design", "anova:5,5,2"],
        ["--design", "anova:5,5.5,2,0"],
        ["--design", "cubic:1,2"],
        ["--design", "anova:5,5,2,0", "--replicates", "0"],
    ])
    def test_bad_input(self, capsys, argv):
        code, _, err = run(["bench", *argv], capsys)
        assert code == 1 and err


class TestSimulate:
    def test_anova_bundle(self, tmp_path, capsys):
        code, _, _ = run(["simulate", "--design", "anova:2,3,2,0.5", "--out-dir", tmp_path], capsys)
        assert code == 0
        data = load_bundle(tmp_path)
        assert data.names == ["factorA", "factorB", "interaction", "noise"]
        assert data.y.shape == (12, 1)
        truth = json.loads((tmp_path / "truth.json").read_text())
        assert truth["sigma2"] == [0.5, 1.0, 1.0, 1.0]

    def test_bad_design(self, tmp_path, capsys):
        code, _, _ = run(["simulate", "--design", "planted:x", "--out-dir", tmp_path], capsys)
        assert code == 1


def test_missing_subcommand(capsys):
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1


def test_module_entry_point(tmp_path):
    p = VarCompProblem(np.array([1.0, 2.0, 4.0]), np.ones((3, 1)), (np.eye(3),))
    write_bundle(tmp_path, p.y, p.X, p.V)
    proc = subprocess.run([sys.executable, "-m", "varcomp.cli", "fit", str(tmp_path), "--tol", "1e-14"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["sigma2"][0] == pytest.approx(np.var(p.y), rel=1e-6)
