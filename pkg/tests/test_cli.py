import json

import numpy as np
import pytest

from mfvr.cli import (
    ExperimentConfig,
    allocate_equal_cost,
    main,
    prepare_problem,
    run_alpha_sweep,
    run_experiment,
    run_theory_validation,
)
from mfvr.cross_entropy import EMConfig
from mfvr.densities import RngStream
from mfvr.estimators import BatchPlan


class TestAllocation:
    def test_first_example_table(self):
        assert allocate_equal_cost(500_000, 30.0, "CV") == (483_870, 483_870)
        assert allocate_equal_cost(500_000, 30.0, "ACV-IS", 4.5) == \
            (434_782, 1_956_519)

    def test_beam_table(self):
        assert allocate_equal_cost(400_000, 11.0, "CV") == (366_666, 366_666)
        assert allocate_equal_cost(400_000, 11.0, "ACV-IS", 4.0) == \
            (293_333, 1_173_332)

    def test_plate_table(self):
        assert allocate_equal_cost(400_000, 37.0, "CV") == (389_473, 389_473)
        assert allocate_equal_cost(400_000, 37.0, "ACV-IS", 4.5) == \
            (356_626, 1_604_817)

    def test_mfis_baseline(self):
        assert allocate_equal_cost(1000, 30.0, "MFIS") == (1000, 0)

    def test_equal_cost_invariant(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            budget = int(rng.integers(100, 10**6))
            w = float(rng.uniform(1.5, 60.0))
            rho = float(rng.uniform(1.0, 10.0))
            for scheme, rho_used in (("CV", 1.0), ("ACV-IS", rho),
                                     ("ACV-MF", rho)):
                n_hf, n_lf = allocate_equal_cost(budget, w, scheme, rho_used)
                total = n_hf * w + n_lf
                assert total <= budget * w + 1e-9
                # two flooring steps: n_hf and n_lf each round down
                assert total >= budget * w - (w + rho_used + 1.0)

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            allocate_equal_cost(1000, 0.5, "CV")
        with pytest.raises(ValueError):
            allocate_equal_cost(1000, 30.0, "ACV-IS", 0.5)
        with pytest.raises(ValueError):
            allocate_equal_cost(1000, 30.0, "CV", 2.0)


class TestConfig:
    def test_round_trip_from_json(self, tmp_path):
        doc = {
            "problem": "analytic",
            "em": {"n_s": 2000, "tau": 0.2, "k_init": 2},
            "plan": {"K": 25, "n": 10, "scheme": "CV"},
            "budget": 1500,
            "replications": 50,
            "seed": 3,
        }
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(doc))
        cfg = ExperimentConfig.from_json_file(path)
        assert cfg.em.n_s == 2000
        assert cfg.plan.K == 25
        assert cfg.cost_ratio == 30.0  # analytic default
        assert cfg.lf_hf_ratio == 4.5

    def test_problem_defaults(self):
        assert ExperimentConfig(problem="beam").cost_ratio == 11.0
        assert ExperimentConfig(problem="beam").lf_hf_ratio == 4.0
        assert ExperimentConfig(problem="plate").cost_ratio == 37.0

    def test_unknown_problem(self):
        with pytest.raises(ValueError):
            ExperimentConfig(problem="bridge")


class TestTheoremValidation:
    def test_zero_r2_pure_inflation(self):
        # (1 - R^2)(1 + M/(K - M - 2)) at R^2 = 0, K = 10: 8/7 ~ 1.1429
        report = run_theory_validation(1, [10], 1e-12, "CV",
                                       replications=4000, n=20, seed=12)
        row = report.rows[0]
        assert row["predicted_ratio"] == pytest.approx(8.0 / 7.0, abs=1e-6)
        assert abs(row["empirical_ratio"] / row["predicted_ratio"] - 1) < 0.10

    def test_minimum_valid_k(self):
        # K = M + 3 is the smallest K with a finite prediction
        report = run_theory_validation(1, [4], 0.5, "CV", replications=4000,
                                       n=20, seed=3)
        row = report.rows[0]
        assert np.isfinite(row["predicted_ratio"])
        assert abs(row["empirical_ratio"] / row["predicted_ratio"] - 1) < 0.15

    def test_crossing_flag(self):
        report = run_theory_validation(1, [5, 8], 0.25, "CV",
                                       replications=400, n=10, seed=4)
        assert report.theory["k_min"] == 7
        assert not report.rows[0]["reduction_guaranteed"]
        assert report.rows[1]["reduction_guaranteed"]


@pytest.fixture(scope="module")
def analytic_report():
    cfg = ExperimentConfig(problem="analytic", budget=1500, replications=150,
                           seed=0, plan=BatchPlan(K=25, n=10))
    return run_experiment(cfg)


class TestRunExperiment:
    def test_rows_and_schema(self, analytic_report):
        names = [row["name"] for row in analytic_report.rows]
        assert names == ["MFIS", "MF-CV", "MF-ACV"]
        for row in analytic_report.rows:
            assert row["status"] == "ok"
            assert row["variance_ratio_vs_mfis"] >= 0.0

    def test_estimates_near_exact(self, analytic_report):
        mu0 = analytic_report.theory["exact_mean"]
        for row in analytic_report.rows:
            assert abs(row["estimate"] - mu0) < 5 * row["stderr_of_mean"]

    def test_equal_cost_online(self, analytic_report):
        budget_cost = analytic_report.meta["budget"] * 30.0
        for row in analytic_report.rows:
            assert row["cost"] <= budget_cost + 1e-9
            # flooring plus batch-splitting slack only
            assert row["cost"] >= budget_cost * 0.9

    def test_raw_estimates_exposed(self, analytic_report):
        assert set(analytic_report.estimates) == {"MFIS", "MF-CV", "MF-ACV"}
        assert len(analytic_report.estimates["MFIS"]) == 150


@pytest.fixture(scope="module")
def sweep():
    cfg = ExperimentConfig(problem="analytic", budget=1200,
                           replications=150, seed=5,
                           problem_options={"proposal_threshold": 1.6})
    return run_alpha_sweep(cfg)


class TestAlphaSweep:
    def test_alpha_zero_recovers_mfis(self, sweep):
        # at alpha = 0 the hybrid is plain IS with the CV allocation, so the
        # ratio equals the sample-count adjustment n0 / n_cv
        rows = sweep.rows
        idx = int(np.argmin([abs(r["alpha"]) for r in rows]))
        near_zero = rows[idx]
        adj = sweep.meta["budget"] / sweep.meta["n_cv"]
        drift = abs(near_zero["alpha"]) * 2.0  # parabola slope allowance
        assert abs(near_zero["v_cv_ratio"] - adj) < \
            4 * near_zero["v_cv_stderr"] + drift

    def test_minimum_near_theory_optimum(self, sweep):
        rows = sweep.rows
        alphas = np.array([r["alpha"] for r in rows])
        ratios = np.array([r["v_cv_ratio"] for r in rows])
        best = alphas[np.argmin(ratios)]
        step = alphas[1] - alphas[0]
        assert abs(best - sweep.theory["alpha_star"]) <= 1.5 * step

    def test_below_one_set_matches_weight_range(self, sweep):
        rows = sweep.rows
        alphas = np.array([r["alpha"] for r in rows])
        step = alphas[1] - alphas[0]
        ratios = np.array([r["v_cv_ratio"] for r in rows])
        errs = np.array([r["v_cv_stderr"] for r in rows])
        lo, hi = sweep.theory["weight_range"]
        flagged = alphas[ratios < 1.0 - 2.0 * errs]
        assert np.all((flagged >= lo - step) & (flagged <= hi + step))

    def test_schema(self, sweep):
        assert list(sweep.rows[0]) == sweep.columns


class TestCLICommands:
    def test_allocate_command(self, capsys):
        assert main(["allocate", "--budget", "500000", "--cost-ratio", "30",
                     "--scheme", "ACV-IS", "--rho-alloc", "4.5"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert (out["n_hf"], out["n_lf"]) == (434_782, 1_956_519)

    def test_theory_command(self, capsys):
        assert main(["theory", "--scheme", "ACV-MF", "--correlations", "0.9",
                     "--r", "8", "--k", "10"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["r_squared"] == pytest.approx(0.70875)
        assert out["variance_ratio"] == pytest.approx(
            (1 - 0.70875) * (1 + (7 / 8) / 7))

    def test_fit_biasing_writes_mixture(self, tmp_path, capsys):
        cfg = {"problem": "analytic", "em": {"n_s": 1000, "k_init": 2},
               "budget": 500, "replications": 10, "seed": 0}
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        assert main(["--out", str(tmp_path), "fit-biasing",
                     "--config", str(cfg_path)]) == 0
        from mfvr.densities import GaussianMixture
        gm = GaussianMixture.from_json((tmp_path / "biasing.json").read_text())
        assert gm.dimension == 1

    def test_estimate_csv_deterministic(self, tmp_path):
        cfg = {"problem": "analytic", "em": {"n_s": 1000, "k_init": 2},
               "plan": {"K": 10, "n": 5}, "budget": 300,
               "replications": 40, "seed": 7}
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        out1 = tmp_path / "a"
        out2 = tmp_path / "b"
        main(["--out", str(out1), "estimate", "--config", str(cfg_path)])
        main(["--out", str(out2), "estimate", "--config", str(cfg_path)])
        assert (out1 / "report.csv").read_bytes() == \
            (out2 / "report.csv").read_bytes()
        assert (out1 / "report.json").read_bytes() == \
            (out2 / "report.json").read_bytes()

    def test_csv_is_rfc4180(self, tmp_path):
        cfg = {"problem": "analytic", "em": {"n_s": 1000, "k_init": 2},
               "plan": {"K": 10, "n": 5}, "budget": 300,
               "replications": 20, "seed": 7}
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        main(["--out", str(tmp_path), "estimate", "--config", str(cfg_path)])
        raw = (tmp_path / "report.csv").read_bytes()
        assert b"\r\n" in raw
        header = raw.split(b"\r\n")[0].decode()
        assert header.split(",")[0] == "name"

    def test_validate_theorem2_command(self, tmp_path, capsys):
        assert main(["--out", str(tmp_path), "validate-theorem2",
                     "--m", "1", "--r2", "0.25", "--scheme", "CV",
                     "--k-grid", "5,8", "--replications", "100",
                     "--n", "5"]) == 0
        doc = json.loads((tmp_path / "theorem2.json").read_text())
        assert [row["K"] for row in doc["rows"]] == [5, 8]
        assert (tmp_path / "theorem2.csv").exists()

    def test_sweep_command_writes_csv(self, tmp_path):
        cfg = {"problem": "analytic", "em": {"n_s": 1000, "k_init": 2},
               "plan": {"K": 10, "n": 5}, "budget": 300,
               "replications": 30, "seed": 7,
               "problem_options": {"proposal_threshold": 1.8}}
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        assert main(["--out", str(tmp_path), "sweep-alpha",
                     "--config", str(cfg_path)]) == 0
        lines = (tmp_path / "sweep.csv").read_text().strip().splitlines()
        assert len(lines) == 22  # header + 21 grid points
        assert lines[0].startswith("alpha,v_cv_ratio")


class TestThreadDeterminism:
    def test_experiment_independent_of_thread_count(self):
        base = dict(problem="analytic", budget=400, replications=30, seed=9,
                    plan=BatchPlan(K=10, n=5),
                    em=EMConfig(n_s=1000, k_init=2))
        rep1 = run_experiment(ExperimentConfig(threads=1, **base))
        rep2 = run_experiment(ExperimentConfig(threads=2, **base))
        for a, b in zip(rep1.rows, rep2.rows):
            assert a == b

    def test_prepare_problem_offline_records(self):
        cfg = ExperimentConfig(problem="analytic", budget=300,
                               replications=10, seed=0,
                               em=EMConfig(n_s=1000, k_init=2))
        pair, q_hat, mu1, offline = prepare_problem(cfg, RngStream(0))
        assert mu1 == pytest.approx(pair.lf.mean)
        assert q_hat is not None
