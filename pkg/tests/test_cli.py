import json

import pytest
import yaml

from pavi.cli import main

RUN_DOC = {
    "potential": {
        "family": "quadratic",
        "precision": [[2.0, 1.0], [1.0, 2.0]],
        "mean": [1.0, -1.0],
    },
    "schedule": "corollary",
    "N": 64,
    "T": 60,
    "seed": 0,
    "metrics_every": 10,
    "reference": "analytic",
}


def write_config(tmp_path, doc, name="config.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(doc))
    return path


class TestRunCommand:
    def test_success_exit_zero(self, tmp_path, capsys):
        cfg = write_config(tmp_path, RUN_DOC)
        code = main(["run", "--config", str(cfg), "--out", str(tmp_path / "out")])
        assert code == 0
        assert "run complete" in capsys.readouterr().out
        assert (tmp_path / "out" / "metrics.jsonl").exists()

    def test_guard_violation_exit_two_with_bounds(self, tmp_path, capsys):
        doc = dict(RUN_DOC, schedule="explicit", h=0.05, B=1)
        cfg = write_config(tmp_path, doc)
        code = main(["run", "--config", str(cfg), "--out", str(tmp_path / "out")])
        assert code == 2
        err = capsys.readouterr().err
        assert "0.5" in err and "0.0277778" in err

    def test_boundary_equality_exit_two(self, tmp_path, capsys):
        doc = dict(RUN_DOC, schedule="explicit", h=1.0 / 36.0, B=1)
        cfg = write_config(tmp_path, doc)
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2

    def test_small_N_exit_two(self, tmp_path, capsys):
        doc = dict(RUN_DOC, N=1)
        cfg = write_config(tmp_path, doc)
        code = main(["run", "--config", str(cfg), "--out", str(tmp_path / "out")])
        assert code == 2
        assert "N >= 2" in capsys.readouterr().err

    def test_seed_override_changes_metrics(self, tmp_path):
        cfg = write_config(tmp_path, RUN_DOC)
        main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")])
        main(["run", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "1"])
        a = (tmp_path / "a" / "metrics.jsonl").read_text()
        b = (tmp_path / "b" / "metrics.jsonl").read_text()
        assert a != b

    def test_thread_flag_reproduces_metrics(self, tmp_path):
        cfg = write_config(tmp_path, RUN_DOC)
        main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")])
        main(["run", "--config", str(cfg), "--out", str(tmp_path / "b"), "--threads", "4"])
        assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (
            tmp_path / "b" / "metrics.jsonl"
        ).read_bytes()

    def test_resume_flag(self, tmp_path, capsys):
        doc = dict(RUN_DOC, checkpoint_every=20)
        cfg = write_config(tmp_path, doc)
        out = tmp_path / "out"
        assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
        # finished checkpoint resumes into an immediate no-op completion
        assert main(["run", "--config", str(cfg), "--out", str(out), "--resume"]) == 0


class TestOracleAndCompare:
    def test_oracle_then_compare(self, tmp_path, capsys):
        cfg = write_config(tmp_path, RUN_DOC)
        out = tmp_path / "out"
        assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
        ocfg = write_config(
            tmp_path, {"potential": RUN_DOC["potential"]}, name="oracle.yaml"
        )
        ref = tmp_path / "ref.json"
        assert main(["oracle", "--config", str(ocfg), "--out", str(ref)]) == 0
        assert json.loads(ref.read_text())["provenance"] == "analytic-gaussian"
        capsys.readouterr()
        assert main(["compare", str(out), str(ref)]) == 0
        text = capsys.readouterr().out
        assert "w2_total" in text

    def test_compare_bad_path_exit_two(self, tmp_path, capsys):
        other = tmp_path / "x.json"
        other.write_text("{}")
        assert main(["compare", str(other), str(other)]) == 2


class TestExitCodes:
    def test_error_class_codes(self):
        from pavi.errors import (
            ConfigError,
            DivergenceError,
            GridTooNarrowError,
            OracleConvergenceError,
            UsageError,
        )

        assert ConfigError.exit_code == 2
        assert UsageError.exit_code == 2
        assert DivergenceError.exit_code == 3
        assert OracleConvergenceError.exit_code == 4
        assert GridTooNarrowError.exit_code == 4

    def test_oracle_non_convergence_exit_four(self, tmp_path, capsys):
        # asymmetric perturbed target: the marginal means drift off the
        # minimizer, so one sweep cannot reach a tight tolerance
        doc = {
            "potential": {
                "family": "perturbed_quadratic",
                "precision": [[2.0, 0.5], [0.5, 2.0]],
                "mean": [0.8, -0.5],
                "weights": [1.0, 1.0],
            },
            "grid_size": 129,
            "tol": 1e-10,
            "max_iter": 1,
            "check_inits": False,
        }
        cfg = write_config(tmp_path, doc, name="oracle.yaml")
        code = main(["oracle", "--config", str(cfg), "--out", str(tmp_path / "r.json")])
        assert code == 4
        assert "sweeps" in capsys.readouterr().err

    def test_grid_too_narrow_exit_four(self, tmp_path, capsys):
        doc = {
            "potential": {
                "family": "perturbed_quadratic",
                "precision": [[2.0, 0.5], [0.5, 2.0]],
                "mean": [0.0, 0.0],
                "weights": [1.0, 1.0],
            },
            "grid_size": 129,
            "half_width": 1.0,
            "check_inits": False,
        }
        cfg = write_config(tmp_path, doc, name="oracle.yaml")
        code = main(["oracle", "--config", str(cfg), "--out", str(tmp_path / "r.json")])
        assert code == 4
        assert "widen" in capsys.readouterr().err


class TestCheckCommand:
    def test_check_pass(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"potential": RUN_DOC["potential"]})
        assert main(["check", "--config", str(cfg)]) == 0
        out = capsys.readouterr().out
        assert "PASS gradient_consistency" in out

    def test_check_fail_exit_one(self, tmp_path, capsys):
        doc = {"potential": dict(RUN_DOC["potential"], claimed={"lip": 1.5})}
        cfg = write_config(tmp_path, doc)
        assert main(["check", "--config", str(cfg)]) == 1
        assert "FAIL convexity_sandwich" in capsys.readouterr().out


class TestSweepCommand:
    def test_sweep_runs(self, tmp_path, capsys):
        doc = dict(RUN_DOC, N_list=[16, 32, 64], replications=2, T=80)
        cfg = write_config(tmp_path, doc)
        code = main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "sw")])
        assert code == 0
        assert (tmp_path / "sw" / "sweep.json").exists()
        assert "slope" in capsys.readouterr().out

    def test_sweep_usage_error(self, tmp_path, capsys):
        doc = dict(RUN_DOC, N_list=[16, 16, 64], replications=2, T=40)
        cfg = write_config(tmp_path, doc)
        assert main(["sweep", "--config", str(cfg)]) == 2

    def test_missing_config_exit_two(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "none.yaml")]) == 2
