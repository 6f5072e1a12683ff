import os

import pandas as pd
import pytest
from click.testing import CliRunner

from dlhim.commands import cmd_gen, cmd_solve, cmd_train, holdout_data_dir, train_data_dir
from dlhim.datasets import load_dataset, reference_residual
from dlhim.errors import CheckpointError, DatasetError
from dlhim.experiment import load_config
from dlhim.neural_correction import ZeroCorrection, checkpoint_save
from main import cli


@pytest.fixture
def cfg(tiny_config):
    return load_config(tiny_config, env=False)


@pytest.fixture
def runner():
    return CliRunner()


class TestVerbs:
    def test_gen_writes_train_and_test_sets(self, cfg):
        summary = cmd_gen(cfg)
        assert summary["records"] == {"train": 6, "test_31": 3}
        test_set = load_dataset(holdout_data_dir(cfg, 31))
        assert all(reference_residual(inst) <= 1e-10 for inst in test_set)
        assert len(load_dataset(train_data_dir(cfg))) == 6
        assert os.path.exists(os.path.join(cfg.output_dir, "resolved_config.yaml"))

    def test_train_without_dataset_generates_in_memory(self, cfg):
        summary = cmd_train(cfg, progress=False)
        assert summary["epochs"] == 2
        assert summary["objective"] == "static-residual-l2"
        assert os.path.exists(summary["checkpoint"])
        history = pd.read_csv(os.path.join(cfg.output_dir, "history.csv"))
        assert list(history["epoch"]) == [1, 2]

    def test_train_with_missing_dataset_directory(self, cfg, tmp_path):
        with pytest.raises(DatasetError):
            cmd_train(cfg, data_dir=str(tmp_path / "missing"), progress=False)

    def test_solve_compares_every_solver(self, cfg, tmp_path):
        checkpoint = str(tmp_path / "zero.ckpt")
        checkpoint_save(ZeroCorrection(), checkpoint)
        comparison = cmd_solve(cfg, checkpoint, instance=1)
        assert list(comparison["label"]) == ["fixed_step", "physics_aware_aa"]
        out = os.path.join(cfg.output_dir, "solve")
        assert os.path.exists(os.path.join(out, "trace_fixed_step.csv"))
        assert os.path.exists(os.path.join(out, "trace_physics_aware_aa.meta.yaml"))

    def test_solve_instance_out_of_range(self, cfg, tmp_path):
        cmd_gen(cfg)
        checkpoint = str(tmp_path / "zero.ckpt")
        checkpoint_save(ZeroCorrection(), checkpoint)
        with pytest.raises(DatasetError):
            cmd_solve(cfg, checkpoint, instance=10, data_dir=holdout_data_dir(cfg, 31))

    def test_solve_missing_checkpoint(self, cfg, tmp_path):
        with pytest.raises(CheckpointError):
            cmd_solve(cfg, str(tmp_path / "none.ckpt"))


class TestCli:
    def test_gen_is_reproducible(self, runner, tiny_config, tmp_path):
        for name in ("a", "b"):
            result = runner.invoke(cli, ["gen", "--config", tiny_config, "--out", str(tmp_path / name)])
            assert result.exit_code == 0, result.output
        for sub in ("data/train", "data/test_31"):
            names = sorted(os.listdir(tmp_path / "a" / sub))
            assert names == sorted(os.listdir(tmp_path / "b" / sub))
            for name in names:
                assert (tmp_path / "a" / sub / name).read_bytes() == (tmp_path / "b" / sub / name).read_bytes()

    def test_seed_override_changes_data(self, runner, tiny_config, tmp_path):
        runner.invoke(cli, ["gen", "--config", tiny_config, "--out", str(tmp_path / "a")])
        runner.invoke(cli, ["gen", "--config", tiny_config, "--out", str(tmp_path / "b"), "--seed", "4"])
        record = "data/train/instance_00000.rec"
        assert (tmp_path / "a" / record).read_bytes() != (tmp_path / "b" / record).read_bytes()

    def test_train_then_describe_then_solve(self, runner, tiny_config, tmp_path):
        out = str(tmp_path / "run")
        result = runner.invoke(cli, ["train", "--config", tiny_config, "--out", out])
        assert result.exit_code == 0, result.output
        assert "TRAINING COMPLETE" in result.output

        checkpoint = os.path.join(out, "operator.ckpt")
        result = runner.invoke(cli, ["describe", checkpoint])
        assert result.exit_code == 0
        assert "deeponet" in result.output

        result = runner.invoke(cli, ["solve", "--config", tiny_config, "--out", out, "--checkpoint", checkpoint,
                                     "--grid", "47"])
        assert result.exit_code == 0, result.output
        assert "physics_aware_aa" in result.output

    def test_errors_exit_with_two(self, runner, tiny_config, tmp_path):
        result = runner.invoke(cli, ["describe", str(tmp_path / "missing.ckpt")])
        assert result.exit_code == 2
        result = runner.invoke(cli, ["bench", "no-such-scenario", "--config", tiny_config])
        assert result.exit_code == 2

    def test_config_error_reports_line(self, runner, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("seed: 1\nsmoother:\n  omega: 3.0\n")
        result = runner.invoke(cli, ["gen", "--config", str(bad)])
        assert result.exit_code == 2
        assert "line 3" in result.output

    def test_bench_exit_code_follows_verdict(self, runner, tiny_config, tmp_path):
        result = runner.invoke(cli, ["bench", "false-fixed-point", "--config", tiny_config,
                                     "--out", str(tmp_path)])
        assert result.exit_code in (0, 1)
        assert "BENCH false_fixed_point" in result.output
        assert os.path.exists(tmp_path / "false_fixed_point" / "checks.csv")
