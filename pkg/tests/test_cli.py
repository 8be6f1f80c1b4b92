"""
Unit tests for biscuit.py CLI module.

This module tests argument parsing, exit codes and the end-to-end command
pipeline on a tiny world.
"""

import json
import sys
from unittest.mock import patch

import numpy as np
import pandas as pd
import pytest

import biscuit
from lib.errors import NumericError


@pytest.fixture
def config_file(tmp_path):
    """A configuration small enough for every command to finish quickly."""
    config = {
        "scm": {"num_vars": 2, "frames": 300, "test_frames": 400, "warmup_samples": 64, "mechanism_hidden": 8},
        "model": {"hidden": 8, "prior_hidden": 4, "flow_layers": 2, "flow_hidden": 8},
        "train": {"epochs": 1, "batch_size": 64, "ae_epochs": 1, "checkpoint_every": 1},
        "eval": {"graph_epochs": 1},
        "seed": 4,
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))
    return path


class TestParseArguments:
    """Test parse_arguments function."""

    def test_parse_gen_data(self, monkeypatch):
        """Test parsing the gen-data command."""
        monkeypatch.setattr(sys, "argv", ["biscuit.py", "gen-data", "--out", "data/train"])
        args = biscuit.parse_arguments()

        assert args.command == "gen-data"
        assert args.out == "data/train"
        assert args.split == "train"
        assert args.seed is None
        assert not args.force

    def test_parse_train(self, monkeypatch):
        """Test parsing the train command with overrides."""
        monkeypatch.setattr(
            sys, "argv", ["biscuit.py", "train", "--data", "d", "--out", "r", "--seed", "3", "--nf", "--epochs", "5"]
        )
        args = biscuit.parse_arguments()

        assert args.seed == 3
        assert args.nf is True
        assert args.epochs == 5

    def test_parse_eval(self):
        """Test parsing the eval command from an explicit argv list."""
        args = biscuit.parse_arguments(["eval", "--run", "r", "--data", "d", "--report", "out.json", "--no-graph"])

        assert args.run == "r"
        assert args.no_graph is True

    def test_parse_report(self):
        """Test parsing several report files."""
        args = biscuit.parse_arguments(["report", "--reports", "a.json", "b.json", "--out", "t.csv"])

        assert args.reports == ["a.json", "b.json"]

    def test_parse_with_debug(self):
        """Test parsing with --debug argument."""
        assert biscuit.parse_arguments(["--debug", "check-theory"]).debug is True

    def test_parse_error_no_command(self, monkeypatch):
        """Test error when no command is given."""
        monkeypatch.setattr(sys, "argv", ["biscuit.py"])

        with pytest.raises(SystemExit) as exc_info:
            biscuit.parse_arguments()

        assert exc_info.value.code == 1

    def test_parse_error_unknown_split(self):
        """Test error on an unknown split."""
        with pytest.raises(SystemExit) as exc_info:
            biscuit.parse_arguments(["gen-data", "--out", "d", "--split", "valid"])

        assert exc_info.value.code == 1

    def test_parse_error_resume_with_force(self):
        """Test error when using --resume with --force."""
        with pytest.raises(SystemExit) as exc_info:
            biscuit.parse_arguments(["train", "--data", "d", "--out", "r", "--resume", "--force"])

        assert exc_info.value.code == 1

    def test_parse_error_zero_epochs(self):
        """Test error when --epochs is not positive."""
        with pytest.raises(SystemExit) as exc_info:
            biscuit.parse_arguments(["train", "--data", "d", "--out", "r", "--epochs", "0"])

        assert exc_info.value.code == 1


class TestExitCodes:
    """Test main exit codes."""

    def test_invalid_config_exits_1(self, tmp_path):
        """Test that configuration errors exit with code 1."""
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"scm": {"num_vars": 1}}))

        with pytest.raises(SystemExit) as exc_info:
            biscuit.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")])

        assert exc_info.value.code == 1

    def test_non_empty_output_exits_1(self, config_file, tmp_path):
        """Test that gen-data refuses a non-empty directory without --force."""
        out = tmp_path / "d"
        out.mkdir()
        (out / "keep.txt").write_text("x")

        with pytest.raises(SystemExit) as exc_info:
            biscuit.main(["gen-data", "--config", str(config_file), "--out", str(out)])

        assert exc_info.value.code == 1
        assert (out / "keep.txt").read_text() == "x"

    def test_missing_dataset_exits_1(self, config_file, tmp_path):
        """Test that an unreadable dataset exits with code 1."""
        with pytest.raises(SystemExit) as exc_info:
            biscuit.main(["train", "--config", str(config_file), "--data", str(tmp_path / "none"), "--out", str(tmp_path / "r")])

        assert exc_info.value.code == 1

    def test_numeric_failure_exits_2(self, config_file, tmp_path):
        """Test that numeric failures exit with code 2."""
        data = tmp_path / "data"
        biscuit.main(["gen-data", "--config", str(config_file), "--out", str(data)])

        with patch("biscuit.train", side_effect=NumericError("loss produced non-finite values", 0, 0)):
            with pytest.raises(SystemExit) as exc_info:
                biscuit.main(["train", "--config", str(config_file), "--data", str(data), "--out", str(tmp_path / "r")])

        assert exc_info.value.code == 2

    def test_invalid_thread_setting_exits_1(self, config_file, monkeypatch, tmp_path):
        """Test that a malformed BISCUIT_THREADS value is a configuration error."""
        monkeypatch.setenv("BISCUIT_THREADS", "many")

        with pytest.raises(SystemExit) as exc_info:
            biscuit.main(["gen-data", "--config", str(config_file), "--out", str(tmp_path / "d")])

        assert exc_info.value.code == 1

    def test_usage_error_exits_1(self):
        """Test that argument errors share the configuration exit code, not 2."""
        with pytest.raises(SystemExit) as exc_info:
            biscuit.main(["train", "--data", "d", "--out", "r", "--resume", "--force"])

        assert exc_info.value.code == 1

    def test_missing_subcommand_argument_exits_1(self):
        """Test that a subcommand without its required options exits with code 1."""
        with pytest.raises(SystemExit) as exc_info:
            biscuit.main(["eval", "--run", "r"])

        assert exc_info.value.code == 1

    def test_all_latents_dead_exits_1(self, config_file, tmp_path, caplog):
        """Test that eval reports a collapsed model instead of crashing."""
        cfg = ["--config", str(config_file)]
        train_dir, test_dir, run = tmp_path / "train", tmp_path / "test", tmp_path / "run"
        biscuit.main(["gen-data", *cfg, "--out", str(train_dir)])
        biscuit.main(["gen-data", *cfg, "--out", str(test_dir), "--split", "test"])
        biscuit.main(["train", *cfg, "--data", str(train_dir), "--out", str(run)])

        with patch("lib.model.LatentModel.encode_mean", lambda self, x: np.zeros((len(x), self.num_latents))):
            with pytest.raises(SystemExit) as exc_info:
                biscuit.main(["eval", *cfg, "--run", str(run), "--data", str(test_dir), "--report", str(run / "r.json")])

        assert exc_info.value.code == 1
        assert "every latent is dead" in caplog.text
        assert not (run / "r.json").exists()


class TestCommands:
    """Test the commands end to end on a tiny world."""

    def test_gen_data_summary(self, config_file, tmp_path, capsys):
        """Test that gen-data prints a one-line summary and writes the dataset."""
        out = tmp_path / "data"

        assert biscuit.main(["gen-data", "--config", str(config_file), "--out", str(out), "--seed", "9"]) == 0

        line = capsys.readouterr().out.strip()
        assert line == "train: 300 frames, K=2, rule=robotic-arm, clusters=None, seed=9"
        assert (out / "manifest.json").exists()

    def test_gen_data_force(self, config_file, tmp_path):
        """Test that --force allows overwriting a dataset."""
        out = tmp_path / "data"
        biscuit.main(["gen-data", "--config", str(config_file), "--out", str(out)])

        assert biscuit.main(["gen-data", "--config", str(config_file), "--out", str(out), "--force"]) == 0

    def test_check_theory_output(self, config_file, tmp_path, capsys):
        """Test that check-theory prints and writes the verdicts."""
        out = tmp_path / "theory.json"

        biscuit.main(["check-theory", "--config", str(config_file), "--out", str(out)])

        printed = json.loads(capsys.readouterr().out)
        assert printed == json.loads(out.read_text())
        assert printed["distinct_patterns"]["holds"] is True
        assert printed["rotation_oracle"]["eighth_turn_counts"] == [3, 3]

    @pytest.mark.integration
    @pytest.mark.parametrize("variant", [[], ["--nf"]])
    def test_full_pipeline(self, config_file, tmp_path, capsys, variant):
        """Test gen-data, train, eval and report in sequence."""
        cfg = ["--config", str(config_file)]
        train_dir, test_dir, run = tmp_path / "train", tmp_path / "test", tmp_path / "run"
        biscuit.main(["gen-data", *cfg, "--out", str(train_dir)])
        biscuit.main(["gen-data", *cfg, "--out", str(test_dir), "--split", "test"])
        biscuit.main(["train", *cfg, "--data", str(train_dir), "--out", str(run), "--seed", "1", *variant])

        assert (run / "model.ckpt").exists()
        assert (run / "config.json").exists()
        assert len(pd.read_csv(run / "loss.csv")) == 1

        report = run / "report.json"
        biscuit.main(["eval", *cfg, "--run", str(run), "--data", str(test_dir), "--report", str(report)])
        data = json.loads(report.read_text())
        assert 0.0 <= data["r2_diag"] <= 1.0
        assert len(data["alignment"]) == 2
        assert isinstance(data["shd"], int)
        assert (run / "report_r2.csv").exists()

        table = tmp_path / "table.csv"
        biscuit.main(["report", "--reports", str(report), "--out", str(table)])
        assert list(pd.read_csv(table)["run"]) == ["run"]
