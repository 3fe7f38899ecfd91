import json

import numpy as np
import pytest

from pavi import ConfigError, ConvergenceReport, SweepResult, UsageError, rate_fit
from pavi.harness import (
    build_reference,
    cmd_check,
    cmd_compare,
    cmd_oracle,
    cmd_run,
    cmd_sweep,
    load_config,
)
from pavi.reports import fit_loglog_slope


BASE_POTENTIAL = {
    "family": "quadratic",
    "precision": [[2.0, 1.0], [1.0, 2.0]],
    "mean": [1.0, -1.0],
}


def run_doc(**overrides):
    doc = {
        "potential": dict(BASE_POTENTIAL),
        "schedule": "corollary",
        "algorithm": "pavi",
        "N": 64,
        "T": 100,
        "seed": 0,
        "reference": "analytic",
    }
    doc.update(overrides)
    return doc


class TestRateFit:
    def test_exact_synthetic_series(self):
        n = np.arange(400)
        fit = rate_fit(n, 0.9**n + 0.01)
        assert fit.contraction_rate == pytest.approx(0.9, abs=1e-6)
        assert fit.steady_state_level == pytest.approx(0.01, abs=1e-6)

    def test_constant_series(self):
        fit = rate_fit(np.arange(30), np.full(30, 0.42))
        assert fit.contraction_rate is None
        assert fit.steady_state_level == pytest.approx(0.42)

    def test_noise_dominated_series(self):
        rng = np.random.default_rng(0)
        fit = rate_fit(np.arange(60), 0.3 + 0.001 * rng.standard_normal(60))
        assert fit.contraction_rate is None

    def test_too_few_points(self):
        with pytest.raises(UsageError, match="10"):
            rate_fit(np.arange(9), np.ones(9))


class TestLogLogSlope:
    def test_exact_power_law(self):
        Ns = np.array([64, 256, 1024, 4096])
        slope, stderr = fit_loglog_slope(Ns, Ns**-0.25)
        assert slope == pytest.approx(-0.25, abs=1e-12)
        assert stderr == pytest.approx(0.0, abs=1e-12)

    def test_duplicate_N_rejected(self):
        with pytest.raises(UsageError, match="increasing"):
            fit_loglog_slope([64, 64, 256], [1.0, 1.0, 0.5])

    def test_too_few_points(self):
        with pytest.raises(UsageError):
            fit_loglog_slope([64, 256], [1.0, 0.5])


class TestCmdRun:
    def test_minimal_run_row_count(self, tmp_path):
        doc = run_doc(
            potential={"family": "quadratic", "precision": [[1.0]], "mean": [0.0]},
            N=64,
            T=100,
        )
        report = cmd_run(doc, out_dir=tmp_path / "out")
        # metrics_every defaults to max(1, T // 200) = 1 for T=100
        assert len(report.rows) == 101
        assert (tmp_path / "out" / "metrics.jsonl").exists()
        assert (tmp_path / "out" / "summary.json").exists()
        assert (tmp_path / "out" / "checkpoint.json").exists()

    def test_rerun_byte_identical(self, tmp_path):
        cmd_run(run_doc(), out_dir=tmp_path / "a")
        cmd_run(run_doc(), out_dir=tmp_path / "b")
        a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
        b = (tmp_path / "b" / "metrics.jsonl").read_bytes()
        assert a == b

    def test_guard_violation_raises_config_error(self, tmp_path):
        doc = run_doc(schedule="explicit", h=0.05, B=1)
        with pytest.raises(ConfigError) as err:
            cmd_run(doc, out_dir=tmp_path / "out")
        assert "0.5" in str(err.value) and "0.0277778" in str(err.value)

    def test_report_round_trip_lossless(self, tmp_path):
        out = tmp_path / "out"
        report = cmd_run(run_doc(T=40, metrics_every=10), out_dir=out)
        loaded = ConvergenceReport.load(out)
        assert loaded.metrics_lines() == report.metrics_lines()
        assert loaded.summary == json.loads(json.dumps(report.summary))
        assert loaded.seed == report.seed
        assert loaded.wall_times == pytest.approx(report.wall_times)

    def test_analytic_reference_requires_quadratic(self, tmp_path):
        doc = run_doc()
        doc["potential"] = {
            "family": "perturbed_quadratic",
            "precision": [[2.0, 0.5], [0.5, 2.0]],
            "mean": [0.0, 0.0],
            "weights": [1.0, 1.0],
        }
        with pytest.raises(ConfigError, match="quadratic"):
            cmd_run(doc, out_dir=tmp_path / "out")

    def test_point_init(self, tmp_path):
        doc = run_doc(T=0, init={"point": [1.0, -1.0]})
        report = cmd_run(doc, out_dir=tmp_path / "out")
        assert len(report.rows) == 1


class TestCmdSweep:
    def test_too_few_N(self, tmp_path):
        doc = run_doc(N_list=[64, 256], replications=2, T=50)
        with pytest.raises(UsageError, match="3"):
            cmd_sweep(doc, out_dir=tmp_path)

    def test_duplicate_N(self, tmp_path):
        doc = run_doc(N_list=[64, 64, 256], replications=2, T=50)
        with pytest.raises(UsageError, match="increasing"):
            cmd_sweep(doc, out_dir=tmp_path)

    def test_reference_required(self, tmp_path):
        doc = run_doc(N_list=[16, 32, 64], replications=2, T=50, reference="none")
        with pytest.raises(UsageError, match="reference"):
            cmd_sweep(doc, out_dir=tmp_path)

    def test_small_sweep_deterministic(self, tmp_path):
        doc = run_doc(N_list=[16, 32, 64], replications=3, T=120, metrics_every=10)
        a = cmd_sweep(doc, out_dir=tmp_path / "a")
        b = cmd_sweep(doc, out_dir=tmp_path / "b")
        assert [e.per_seed for e in a.entries] == [e.per_seed for e in b.entries]
        assert a.slope == b.slope
        loaded = SweepResult.load(tmp_path / "a" / "sweep.json")
        assert loaded.slope == a.slope
        assert [e.N for e in loaded.entries] == [16, 32, 64]

    def test_threaded_matches_serial(self, tmp_path):
        doc = run_doc(N_list=[16, 32, 64], replications=3, T=60, metrics_every=10)
        serial = cmd_sweep(doc, out_dir=None)
        threaded = cmd_sweep(doc, out_dir=None, threads=4)
        assert serial.slope == threaded.slope
        assert [e.per_seed for e in serial.entries] == [
            e.per_seed for e in threaded.entries
        ]


class TestCmdOracle:
    def test_quadratic_analytic_path(self, tmp_path):
        out = cmd_oracle({"potential": dict(BASE_POTENTIAL)}, out_path=tmp_path / "ref.json")
        doc = json.loads(out.read_text())
        assert doc["provenance"] == "analytic-gaussian"

    def test_perturbed_grid_path_with_init_check(self, tmp_path):
        doc = {
            "potential": {
                "family": "perturbed_quadratic",
                "precision": [[2.0, 0.5], [0.5, 2.0]],
                "mean": [0.0, 0.0],
                "weights": [1.0, 1.0],
            },
            "grid_size": 257,
            "tol": 1e-8,
        }
        out = cmd_oracle(doc, out_path=tmp_path / "ref.json")
        saved = json.loads(out.read_text())
        assert saved["provenance"] == "grid-oracle"
        assert saved["residual"]["converged"] is True
        assert max(saved["residual"]["per_coordinate_w2"]) < 1e-8
        assert saved["residual"]["init_agreement_w2"] < 1e-6

    def test_forced_grid_path_on_quadratic(self, tmp_path):
        doc = {
            "potential": dict(BASE_POTENTIAL),
            "method": "grid",
            "grid_size": 257,
        }
        out = cmd_oracle(doc, out_path=tmp_path / "ok.json")
        assert json.loads(out.read_text())["provenance"] == "grid-oracle"

    def test_m4_separable_grid_path(self, tmp_path):
        # beyond m=3 the grid solver relies on the conditional-gradient route
        precision = (np.eye(4) + 0.1).tolist()
        doc = {
            "potential": {"family": "quadratic", "precision": precision},
            "method": "grid",
            "grid_size": 129,
            "check_inits": False,
        }
        out = cmd_oracle(doc, out_path=tmp_path / "m4.json")
        saved = json.loads(out.read_text())
        assert saved["provenance"] == "grid-oracle"
        assert saved["residual"]["converged"] is True


class TestCmdCheck:
    def test_correct_constants_pass(self):
        passed, lines = cmd_check({"potential": dict(BASE_POTENTIAL), "reference": "analytic"})
        assert passed
        names = [name for name, _, _ in lines]
        assert {"gradient_consistency", "convexity_sandwich", "contraction_map",
                "reference_moments"} <= set(names)

    def test_understated_lip_fails_sandwich(self):
        doc = {"potential": dict(BASE_POTENTIAL)}
        doc["potential"]["claimed"] = {"lip": 1.5}
        passed, lines = cmd_check(doc)
        assert not passed
        failures = {name for name, ok, _ in lines if not ok}
        assert "convexity_sandwich" in failures


class TestCmdCompare:
    def test_two_reports(self, tmp_path):
        cmd_run(run_doc(T=40, metrics_every=10), out_dir=tmp_path / "a")
        cmd_run(run_doc(T=40, metrics_every=10, seed=1), out_dir=tmp_path / "b")
        result = cmd_compare(tmp_path / "a", tmp_path / "b")
        assert result["mode"] == "report-report"
        assert result["shared_iterations"] == 5

    def test_identical_reports_zero_delta(self, tmp_path):
        cmd_run(run_doc(T=40, metrics_every=10), out_dir=tmp_path / "a")
        cmd_run(run_doc(T=40, metrics_every=10), out_dir=tmp_path / "b")
        result = cmd_compare(tmp_path / "a", tmp_path / "b")
        assert result["mean_abs_delta"] == 0.0

    def test_report_vs_reference(self, tmp_path):
        out = tmp_path / "run"
        cmd_run(run_doc(T=60, metrics_every=10), out_dir=out)
        ref_path = cmd_oracle({"potential": dict(BASE_POTENTIAL)}, out_path=tmp_path / "ref.json")
        result = cmd_compare(out, ref_path)
        assert result["mode"] == "report-reference"
        assert result["iteration"] == 60
        assert result["w2_total"] > 0
        assert len(result["w2_coord"]) == 2


class TestConfigLoading:
    def test_yaml_and_json(self, tmp_path):
        ypath = tmp_path / "c.yaml"
        ypath.write_text("N: 64\nT: 10\n")
        assert load_config(ypath) == {"N": 64, "T": 10}
        jpath = tmp_path / "c.json"
        jpath.write_text('{"N": 64, "T": 10}')
        assert load_config(jpath) == {"N": 64, "T": 10}

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.yaml")

    def test_reference_none(self):
        import pavi

        pot = pavi.QuadraticPotential(np.eye(2))
        assert build_reference(None, pot) is None
        assert build_reference("none", pot) is None
