"""
Experiment - YAML experiment configuration

ExperimentConfig is a pydantic model loaded from YAML. Validation errors
point at the YAML line of the offending key. `.env` can override the output
directory (DLHIM_OUTPUT_DIR) and worker count (DLHIM_THREADS).
"""

import os
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from dlhim.acceleration import UpdateKind, UpdateStrategy
from dlhim.errors import ConfigError
from dlhim.hybrid_solver import SolverConfig
from dlhim.neural_correction import (CorrectionOperator, DeepOnetOperator, OperatorKind,
                                     SpectralOperator, ZeroCorrection)
from dlhim.pde_problems import GrfConfig, Grid1D, ProblemKind, default_coefficient_config, SOURCE_FIELD
from dlhim.smoothers import SmootherConfig, SmootherKind
from dlhim.training import Basis, Framework, NormKind, NormSpec, Objective, OptimizerKind, TrainConfig

RESOLVED_CONFIG = "resolved_config.yaml"


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", use_enum_values=False)


class GrfModel(_Model):
    sigma: float = Field(ge=0)
    length: float = Field(gt=0)
    mean_shift: float = 0.0
    clip_min: Optional[float] = None
    jitter: float = Field(default=1e-10, ge=0)

    def build(self) -> GrfConfig:
        return GrfConfig(self.sigma, self.length, self.mean_shift, self.clip_min, self.jitter)


class ProblemModel(_Model):
    kind: ProblemKind = ProblemKind.DIFFUSION
    coefficient: Optional[GrfModel] = None
    source: GrfModel = GrfModel(sigma=SOURCE_FIELD.sigma, length=SOURCE_FIELD.length)

    def coefficient_config(self, kind: Optional[ProblemKind] = None) -> GrfConfig:
        kind = kind or self.kind
        if self.coefficient is None or kind != self.kind:
            return default_coefficient_config(kind)
        return self.coefficient.build()


class GridsModel(_Model):
    train: int = Field(default=31, ge=3)
    test: List[int] = Field(default_factory=lambda: [201])

    @field_validator("test")
    @classmethod
    def _positive(cls, v):
        if not v or any(n < 1 for n in v):
            raise ValueError("test grids must be a non-empty list of sizes >= 1")
        return v


class DatasetModel(_Model):
    train_size: int = Field(default=1000, ge=1)
    test_size: int = Field(default=10, ge=1)
    with_solution: bool = True


class OperatorModel(_Model):
    kind: OperatorKind = OperatorKind.DEEPONET
    normalize_input: Optional[bool] = None
    width: int = Field(default=64, ge=1)
    depth: int = Field(default=3, ge=1)
    hidden: int = Field(default=32, ge=1)
    n_modes: Optional[int] = Field(default=None, ge=1)


class ObjectiveModel(_Model):
    basis: Basis = Basis.ERROR
    framework: Framework = Framework.STATIC
    norm: NormKind = NormKind.L2
    lam: float = Field(default=1.0, ge=0)
    unroll: int = Field(default=1, ge=1)

    def build(self) -> Objective:
        return Objective(self.basis, self.framework, NormSpec(self.norm, self.lam), self.unroll)


class TrainingModel(_Model):
    batch_size: int = Field(default=32, ge=1)
    epochs: int = Field(default=100, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0)
    optimizer: OptimizerKind = OptimizerKind.ADAM
    grad_clip: float = Field(default=10.0, gt=0)


class SmootherModel(_Model):
    kind: SmootherKind = SmootherKind.JACOBI
    omega: Optional[float] = Field(default=None, ge=0, lt=2)
    sweeps: int = Field(default=19, ge=0)

    def build(self) -> SmootherConfig:
        if self.omega is None:
            return SmootherConfig.default(self.kind, self.sweeps)
        return SmootherConfig(self.kind, self.omega, self.sweeps)


class SolverModel(_Model):
    label: Optional[str] = None
    strategy: UpdateKind = UpdateKind.FIXED_STEP
    memory: int = Field(default=10, ge=1)
    damping: float = Field(default=1.0, gt=0, le=1)
    ls_regularization: float = Field(default=1e-10, ge=0)
    max_cycles: int = Field(default=1000, ge=1)
    tol_residual: float = Field(default=1e-9, gt=0)
    tol_update: float = Field(default=1e-12, gt=0)
    track_error: bool = False
    stagnation_window: int = Field(default=25, ge=2)
    stagnation_update_tol: float = Field(default=1e-3, gt=0)

    @property
    def name(self) -> str:
        return self.label or self.strategy.value

    def build(self, smoother: SmootherConfig) -> SolverConfig:
        strategy = UpdateStrategy(self.strategy, self.memory, self.damping, self.ls_regularization)
        return SolverConfig(smoother, strategy, self.max_cycles, self.tol_residual, self.tol_update,
                            self.track_error, self.stagnation_window, self.stagnation_update_tol)


class BenchmarkModel(_Model):
    scenario: Optional[str] = None
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    instances: int = Field(default=10, ge=1)
    problems: List[ProblemKind] = Field(default_factory=list)
    operators: List[OperatorKind] = Field(default_factory=lambda: [OperatorKind.DEEPONET])
    objectives: List[ObjectiveModel] = Field(default_factory=list)
    cycle_budget: int = Field(default=700, ge=1)
    linear_test_grid: Optional[int] = Field(default=None, ge=1)
    thresholds: Dict[str, float] = Field(default_factory=dict)


class ExperimentConfig(_Model):
    name: str = "experiment"
    seed: int = 0
    output_dir: str = "results"
    threads: int = Field(default=1, ge=1)
    problem: ProblemModel = ProblemModel()
    grids: GridsModel = GridsModel()
    dataset: DatasetModel = DatasetModel()
    operator: OperatorModel = OperatorModel()
    objective: ObjectiveModel = ObjectiveModel()
    training: TrainingModel = TrainingModel()
    smoother: SmootherModel = SmootherModel()
    solvers: List[SolverModel] = Field(default_factory=lambda: [SolverModel()])
    benchmark: BenchmarkModel = BenchmarkModel()

    # ========================================================================
    # BUILDERS
    # ========================================================================

    def train_grid(self) -> Grid1D:
        return Grid1D(self.grids.train)

    def test_grids(self) -> List[Grid1D]:
        return [Grid1D(n) for n in self.grids.test]

    def objective_config(self) -> Objective:
        return self.objective.build()

    def train_config(self, seed: Optional[int] = None) -> TrainConfig:
        t = self.training
        return TrainConfig(t.batch_size, t.epochs, t.learning_rate, t.optimizer,
                           self.seed if seed is None else seed, t.grad_clip)

    def smoother_config(self) -> SmootherConfig:
        return self.smoother.build()

    def solver_configs(self) -> List[Tuple[str, SolverConfig]]:
        smoother = self.smoother_config()
        labels = [s.name for s in self.solvers]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"solver labels must be unique, got {labels}")
        return [(s.name, s.build(smoother)) for s in self.solvers]

    def build_operator(self, seed: int, kind: Optional[OperatorKind] = None,
                       problem: Optional[ProblemKind] = None) -> CorrectionOperator:
        """Fresh operator; k inputs are standardized with the coefficient GRF's mean and spread."""
        kind = kind or self.operator.kind
        coeff = self.problem.coefficient_config(problem)
        k_shift, k_scale = coeff.mean_shift, (coeff.sigma if coeff.sigma > 0 else 1.0)
        n = self.grids.train
        op_cfg = self.operator

        if kind == OperatorKind.ZERO:
            return ZeroCorrection()
        if kind == OperatorKind.SPECTRAL:
            return SpectralOperator.create(seed, train_grid=n, hidden=op_cfg.hidden,
                                           n_modes=op_cfg.n_modes or n, k_shift=k_shift, k_scale=k_scale)
        widths = [op_cfg.width] * op_cfg.depth
        normalize = True if op_cfg.normalize_input is None else op_cfg.normalize_input
        return DeepOnetOperator.create(seed, normalize_input=normalize, train_grid=n,
                                       branch=[2 * n] + widths, trunk=[1] + widths,
                                       k_shift=k_shift, k_scale=k_scale)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False, default_flow_style=False)


# ============================================================================
# LOADING
# ============================================================================

def derive_seed(master: int, *stream: int) -> int:
    """Independent 32-bit seed for a named stream under `master`."""
    return int(np.random.SeedSequence([int(master), *map(int, stream)]).generate_state(1)[0])


def _locate(node, loc: Sequence) -> Optional[int]:
    """1-based YAML line of the deepest node reachable along a pydantic error location."""
    line = None
    for key in loc:
        if isinstance(node, yaml.MappingNode):
            match = next(((k, v) for k, v in node.value if k.value == str(key)), None)
            if match is None:
                break
            line = match[0].start_mark.line + 1
            node = match[1]
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
            line = node.start_mark.line + 1
        else:
            break
    return line


def parse_config(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text) or {}
        root = yaml.compose(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {getattr(e, 'problem', e)}",
                          line=mark.line + 1 if mark is not None else None)
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping", line=1)

    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise ConfigError(f"{where}: {first['msg']}", line=_locate(root, first["loc"]))


def apply_env_overrides(cfg: ExperimentConfig) -> ExperimentConfig:
    load_dotenv()
    updates: Dict[str, Any] = {}
    if os.getenv("DLHIM_OUTPUT_DIR"):
        updates["output_dir"] = os.getenv("DLHIM_OUTPUT_DIR")
    if os.getenv("DLHIM_THREADS"):
        try:
            updates["threads"] = max(1, int(os.getenv("DLHIM_THREADS")))
        except ValueError:
            raise ConfigError(f"DLHIM_THREADS must be an integer, got {os.getenv('DLHIM_THREADS')!r}")
    return cfg.model_copy(update=updates) if updates else cfg


def load_config(path: str, seed: Optional[int] = None, out: Optional[str] = None,
                threads: Optional[int] = None, env: bool = True) -> ExperimentConfig:
    """Load YAML, apply .env overrides, then explicit CLI overrides."""
    try:
        with open(path, "r") as f:
            text = f.read()
    except IOError as e:
        raise ConfigError(f"cannot read config {path}: {e}")

    try:
        cfg = parse_config(text)
    except ConfigError as e:
        e.args = (f"{path}: {e}",)
        raise

    if env:
        cfg = apply_env_overrides(cfg)
    updates: Dict[str, Any] = {}
    if seed is not None:
        updates["seed"] = seed
    if out is not None:
        updates["output_dir"] = out
    if threads is not None:
        updates["threads"] = max(1, threads)
    return cfg.model_copy(update=updates) if updates else cfg


def write_resolved_config(cfg: ExperimentConfig, out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, RESOLVED_CONFIG)
    with open(path, "w") as f:
        f.write(cfg.to_yaml())
    return path
