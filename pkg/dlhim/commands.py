"""
Commands - The gen / train / solve / bench / describe verbs

Each verb takes a resolved ExperimentConfig, writes into cfg.output_dir
(always including resolved_config.yaml) and returns a summary dict the CLI
prints. Errors are DlhimError subclasses; main.py maps them to exit code 2.
"""

import logging
import os
from typing import Dict, List, Optional

import pandas as pd

from dlhim.benchmarks import ScenarioResult, run_scenario, trace_metrics
from dlhim.datasets import Dataset, load_dataset, save_dataset
from dlhim.errors import CheckpointError, ConfigError, DatasetError
from dlhim.experiment import ExperimentConfig, derive_seed, write_resolved_config
from dlhim.hybrid_solver import solve
from dlhim.neural_correction import checkpoint_load, checkpoint_save
from dlhim.pde_problems import Grid1D, ProblemInstance, generate_instances, make_instance, instance_seeds
from dlhim.reports import write_frame
from dlhim.training import Basis, check_dataset, train

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = "operator.ckpt"
HISTORY_FILE = "history.csv"


def _prepare_output(cfg: ExperimentConfig) -> str:
    out = cfg.output_dir
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"output directory {out} is not writable: {e}")
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    write_resolved_config(cfg, out)
    return out


def train_data_dir(cfg: ExperimentConfig) -> str:
    return os.path.join(cfg.output_dir, "data", "train")


def holdout_data_dir(cfg: ExperimentConfig, n: int) -> str:
    return os.path.join(cfg.output_dir, "data", f"test_{n}")


def _needs_solution(cfg: ExperimentConfig) -> bool:
    return cfg.dataset.with_solution or cfg.objective.basis == Basis.ERROR


# ============================================================================
# GEN
# ============================================================================

def cmd_gen(cfg: ExperimentConfig) -> Dict:
    """Train set on the train grid, one test set per test grid; per-instance seeds recorded."""
    _prepare_output(cfg)
    kind = cfg.problem.kind
    coeff, source = cfg.problem.coefficient_config(), cfg.problem.source.build()

    written = {}
    train_seed = derive_seed(cfg.seed, 1)
    train_set = generate_instances(kind, cfg.train_grid(), cfg.dataset.train_size, train_seed,
                                   coeff, source, _needs_solution(cfg), cfg.threads)
    save_dataset(train_set, train_data_dir(cfg), coeff, source, train_seed)
    written["train"] = len(train_set)

    for grid in cfg.test_grids():
        test_seed = derive_seed(cfg.seed, 3, grid.n_interior)
        test_set = generate_instances(kind, grid, cfg.dataset.test_size, test_seed, coeff, source,
                                      True, cfg.threads)
        save_dataset(test_set, holdout_data_dir(cfg, grid.n_interior), coeff, source, test_seed)
        written[f"test_{grid.n_interior}"] = len(test_set)

    return {"problem": kind.value, "output": cfg.output_dir, "records": written}


# ============================================================================
# TRAIN
# ============================================================================

def _training_set(cfg: ExperimentConfig, data_dir: Optional[str]) -> List[ProblemInstance]:
    path = data_dir or train_data_dir(cfg)
    if os.path.isdir(path):
        dataset = load_dataset(path)
        if dataset.kind != cfg.problem.kind:
            raise DatasetError(f"dataset at {path} holds {dataset.kind.value}, config wants {cfg.problem.kind.value}")
        return dataset.instances
    if data_dir:
        raise DatasetError(f"no dataset directory at {data_dir}")

    logger.info("No dataset at %s, generating %d instances in memory", path, cfg.dataset.train_size)
    return generate_instances(cfg.problem.kind, cfg.train_grid(), cfg.dataset.train_size,
                              derive_seed(cfg.seed, 1), cfg.problem.coefficient_config(),
                              cfg.problem.source.build(), _needs_solution(cfg), cfg.threads)


def cmd_train(cfg: ExperimentConfig, data_dir: Optional[str] = None, progress: bool = True) -> Dict:
    out = _prepare_output(cfg)
    objective = cfg.objective_config()
    instances = _training_set(cfg, data_dir)
    check_dataset(instances, objective)

    op = cfg.build_operator(derive_seed(cfg.seed, 0))
    trained, history = train(op, instances, objective, cfg.train_config(derive_seed(cfg.seed, 2)),
                             cfg.smoother_config(), progress=progress)

    checkpoint = os.path.join(out, CHECKPOINT_FILE)
    checkpoint_save(trained, checkpoint)
    history.to_csv(os.path.join(out, HISTORY_FILE))
    return {
        "objective": objective.label,
        "operator": trained.kind.value,
        "epochs": len(history.rows),
        "final_loss": history.final_loss,
        "wall_seconds": history.total_wall_ms / 1000.0,
        "peak_tape_bytes": history.peak_tape_bytes,
        "failed": history.failed,
        "checkpoint": checkpoint,
    }


# ============================================================================
# SOLVE
# ============================================================================

def _solve_instance(cfg: ExperimentConfig, index: int, data_dir: Optional[str], n: Optional[int]) -> ProblemInstance:
    if data_dir:
        dataset: Dataset = load_dataset(data_dir)
        if not 0 <= index < len(dataset):
            raise DatasetError(f"instance {index} out of range for {len(dataset)} records in {data_dir}")
        return dataset[index]

    grid = Grid1D(n) if n else cfg.test_grids()[0]
    coeff_seed, source_seed = instance_seeds(derive_seed(cfg.seed, 3, grid.n_interior), index)
    return make_instance(cfg.problem.kind, grid, coeff_seed, source_seed,
                         cfg.problem.coefficient_config(), cfg.problem.source.build())


def cmd_solve(cfg: ExperimentConfig, checkpoint: str, instance: int = 0,
              data_dir: Optional[str] = None, grid: Optional[int] = None) -> pd.DataFrame:
    """One trace CSV per configured solver plus comparison.csv on the same instance."""
    if not os.path.exists(checkpoint):
        raise CheckpointError(f"checkpoint {checkpoint} not found")
    op = checkpoint_load(checkpoint)
    out = os.path.join(_prepare_output(cfg), "solve")
    problem = _solve_instance(cfg, instance, data_dir, grid)

    rows = []
    for label, solver in cfg.solver_configs():
        trace = solve(problem.system, op, solver, problem.solution)
        trace.metadata.update({"instance": instance, "label": label, "checkpoint": os.path.basename(checkpoint)})
        trace.to_csv(os.path.join(out, f"trace_{label}.csv"))
        rows.append({"label": label, **trace_metrics(trace, solver.stagnation_window)})

    comparison = pd.DataFrame(rows)
    write_frame(comparison, os.path.join(out, "comparison.csv"))
    return comparison


# ============================================================================
# BENCH / DESCRIBE
# ============================================================================

def cmd_bench(cfg: ExperimentConfig, scenario: Optional[str] = None) -> ScenarioResult:
    return run_scenario(cfg, scenario)


def cmd_describe(checkpoint: str) -> Dict:
    if not os.path.exists(checkpoint):
        raise CheckpointError(f"checkpoint {checkpoint} not found")
    return checkpoint_load(checkpoint).describe()
