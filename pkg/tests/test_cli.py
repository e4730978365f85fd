import json
import os

import numpy as np
import pytest

from beliefcontrol import cli, nn


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestBounds:
    def test_reference_numbers(self, capsys):
        code, out, _ = run_cli(
            capsys, "bounds", "--gamma", "0.99", "--rmax", "-1", "--wmax", "8.73", "--eta", "0.4",
        )
        assert code == 0
        assert "c_min=0.894396" in out
        assert "asymptotic_w_cap=100.000000" in out
        assert "finite_w_cap=60.400000" in out
        code, out, _ = run_cli(
            capsys, "bounds", "--gamma", "0.99", "--rmax", "-1", "--wmax", "8.73",
            "--eta", "0.1", "--w0", "80",
        )
        assert code == 0
        assert "settling_bound=800" in out

    def test_bad_gamma_is_config_error(self, capsys):
        code, _, err = run_cli(capsys, "bounds", "--gamma", "1.5", "--rmax", "-1", "--wmax", "5", "--eta", "0.4")
        assert code == 1
        assert "config error" in err


class TestUsage:
    def test_unknown_subcommand_exits_one(self, capsys):
        code, _, err = run_cli(capsys, "frobnicate")
        assert code == 1
        assert "usage" in err.lower()

    def test_no_subcommand_exits_one(self, capsys):
        code, _, err = run_cli(capsys)
        assert code == 1

    def test_missing_required_flag(self, capsys):
        code, _, err = run_cli(capsys, "train", "--env", "two_particle")
        assert code == 1


class TestToy:
    def test_writes_trace_csv(self, capsys, tmp_path):
        out = tmp_path / "trace.csv"
        code, stdout, _ = run_cli(capsys, "toy", "--env", "example1", "--seed", "3", "--out", str(out))
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "t,r_eps,entropy,std,measured"
        assert len(lines) > 50
        first = lines[1].split(",")
        assert float(first[2]) == pytest.approx(np.log(2000), abs=1e-9)


class TestEval:
    def test_eval_with_config_file(self, capsys, tmp_path):
        cfg = {
            "env": "lightdark",
            "stack": "reference",
            "episodes": 2,
            "master_seed": 4,
            "out_dir": str(tmp_path / "out"),
            "env_overrides": {"particles": 100, "timing": {"horizon": 2.0}},
        }
        path = tmp_path / "run.json"
        path.write_text(json.dumps(cfg))
        code, out, _ = run_cli(capsys, "eval", "--config", str(path))
        assert code == 0
        assert (tmp_path / "out" / "summary.csv").exists()
        assert "reach=" in out

    def test_eval_missing_env_is_config_error(self, capsys):
        code, _, err = run_cli(capsys, "eval")
        assert code == 1
        assert "config error" in err

    def test_eval_bad_weights_path(self, capsys):
        code, _, err = run_cli(
            capsys, "eval", "--env", "lightdark", "--stack", "full", "--weights", "/missing.bclfw"
        )
        assert code == 1


class TestTrainAndAudit:
    def test_train_then_audit_round_trip(self, capsys, tmp_path):
        weights = tmp_path / "toy.bclfw"
        code, out, err = run_cli(
            capsys, "train", "--env", "two_particle", "--weights", str(weights),
            "--seed", "1", "--episodes", "30",
        )
        assert code == 0, err
        assert weights.exists()
        q = nn.load_weights(weights)
        assert q.action_count == 3

        audit_csv = tmp_path / "audit.csv"
        code, out, err = run_cli(
            capsys, "audit", "--env", "two_particle", "--weights", str(weights),
            "--samples", "50", "--rollouts", "10", "--out", str(audit_csv),
        )
        assert code == 0, err
        assert audit_csv.read_text().splitlines()[0] == "condition,tpr,fpr,n"
        assert "reach goal set" in out
