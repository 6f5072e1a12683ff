import os

import numpy as np
import pandas as pd
import pytest

from dlhim.benchmarks import (Check, ScenarioResult, bench_instances, fan_out, normalize_scenario, run_scenario,
                              run_seed, trace_metrics)
from dlhim.errors import ConfigError, DlhimError
from dlhim.experiment import SolverModel, load_config
from dlhim.hybrid_solver import SolverConfig, solve
from dlhim.neural_correction import OperatorKind, ZeroCorrection
from dlhim.pde_problems import Grid1D, ProblemKind
from dlhim.reports import RunLedger, read_yaml


@pytest.fixture
def cfg(tiny_config):
    return load_config(tiny_config, env=False)


def test_scenario_names():
    assert normalize_scenario("Update-Strategies") == "update_strategies"
    with pytest.raises(ConfigError):
        normalize_scenario("fig9")


def test_fan_out_collects_errors():
    def work(key):
        if key == 2:
            raise DlhimError("bad key")
        return key * 10

    for threads in (1, 3):
        results = fan_out([1, 2, 3], work, threads, "test")
        assert results[1] == 10 and results[3] == 30
        assert isinstance(results[2], DlhimError)


def test_trace_metrics(diffusion_instance):
    trace = solve(diffusion_instance.system, ZeroCorrection(), SolverConfig(max_cycles=5))
    metrics = trace_metrics(trace)
    assert metrics["verdict"] == "max_cycles"
    assert metrics["cycles"] == 5
    assert metrics["window_optimal"] == 1.0


def test_scenario_result_verdict(tmp_path):
    result = ScenarioResult("x", str(tmp_path), RunLedger("x"))
    result.add("gated", 1.0, ">= 0", True)
    result.add("recorded", 0.0, ">= 1", False, gated=False)
    assert result.passed
    result.checks.append(Check("fails", 0.0, ">= 1", False))
    assert not result.passed
    assert "verdict: FAIL" in result.report()


def test_false_fixed_point_smoke(cfg, tmp_path):
    result = run_scenario(cfg, "false-fixed-point", str(tmp_path))
    runs = pd.read_csv(tmp_path / "runs.csv")
    assert list(runs["label"]) == ["fixed_step"]
    assert (tmp_path / "checkpoints" / "seed0.ckpt").exists()
    assert (tmp_path / "traces" / "fixed_step" / "seed0_inst000.csv").exists()
    assert read_yaml(str(tmp_path / "summary.yaml"))["passed"] == result.passed
    assert len(result.checks) == 2


def test_loss_matrix_smoke(cfg, tmp_path):
    operators = [OperatorKind.DEEPONET, OperatorKind.SPECTRAL]
    cfg = cfg.model_copy(update={"benchmark": cfg.benchmark.model_copy(update={"operators": operators})})
    run_scenario(cfg, "loss_matrix", str(tmp_path))
    labels = set(pd.read_csv(tmp_path / "runs.csv")["label"])
    assert labels == {"diffusion/deeponet/static-residual-l2", "diffusion/spectral/static-residual-l2"}


def test_cost_table_smoke(cfg, tmp_path):
    result = run_scenario(cfg, "cost_table", str(tmp_path))
    costs = pd.read_csv(tmp_path / "costs.csv")
    assert sorted(costs["model"]) == ["dynamic", "static"]
    assert set(costs["objective"]) == {"static-residual-l2", "dynamic-residual-l2-K5"}
    assert any("peak tape" in c.name for c in result.checks)


def test_update_strategies_smoke(cfg, tmp_path):
    solvers = [SolverModel(strategy=s, max_cycles=15, memory=4)
               for s in ("fixed_step", "adaptive_step", "standard_aa", "physics_aware_aa")]
    cfg = cfg.model_copy(update={"solvers": solvers,
                                 "benchmark": cfg.benchmark.model_copy(update={"linear_test_grid": 15})})
    run_scenario(cfg, "update_strategies", str(tmp_path))
    labels = set(pd.read_csv(tmp_path / "runs.csv")["label"])
    assert {"jacobi", "jacobi_aa", "physics_aware_aa", "linear/physics_aware_aa"} <= labels
    checks = pd.read_csv(tmp_path / "checks.csv")
    window = checks[checks["name"] == "PA-AA window optimality on every step"]
    assert bool(window["passed"].iloc[0])


def test_update_strategies_needs_anderson_solvers(cfg, tmp_path):
    with pytest.raises(ConfigError):
        run_scenario(cfg, "update_strategies", str(tmp_path))


@pytest.mark.slow
def test_runs_do_not_depend_on_thread_count(cfg, tmp_path):
    cfg = cfg.model_copy(update={"benchmark": cfg.benchmark.model_copy(update={"seeds": [0, 1], "instances": 2})})
    run_scenario(cfg.model_copy(update={"threads": 1}), "false_fixed_point", str(tmp_path / "one"))
    run_scenario(cfg.model_copy(update={"threads": 3}), "false_fixed_point", str(tmp_path / "three"))
    for name in ("runs.csv", "medians.csv"):
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "three" / name).read_bytes()
    assert os.listdir(tmp_path / "one" / "traces" / "fixed_step") != []


def test_master_seed_reaches_bench_instances(tiny_config):
    first = load_config(tiny_config, seed=3, env=False)
    second = load_config(tiny_config, seed=4, env=False)
    assert run_seed(first, 0) != run_seed(second, 0)
    assert run_seed(first, 0) == run_seed(load_config(tiny_config, seed=3, env=False), 0)

    grid = Grid1D(31)
    a = bench_instances(first, 0, ProblemKind.DIFFUSION, grid)
    b = bench_instances(second, 0, ProblemKind.DIFFUSION, grid)
    assert [i.coeff_seed for i in a] != [i.coeff_seed for i in b]
    assert any(not np.array_equal(x.system.rhs, y.system.rhs) for x, y in zip(a, b))
