"""
Training - Loss objectives, static/dynamic frameworks and the optimizer loop

Objectives are (basis x framework x norm):
- basis: error-based (needs u*) or residual-based (needs only A and f)
- framework: static (one application to f) or dynamic (K unrolled DL-HIM cycles)
- norm: l2, l1 (squared) or H1 (l2 plus lambda-weighted discrete gradient)

Every objective is a mean of squared-norm ratios, so one gradient path
(apply_and_grad over per-instance tapes) serves all twelve combinations.
"""

import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from dlhim import tape as T
from dlhim.acceleration import UpdateKind
from dlhim.errors import ConfigError, DatasetError, NonFiniteError
from dlhim.neural_correction import CorrectionOperator, apply_and_grad
from dlhim.pde_problems import ProblemInstance
from dlhim.reports import write_frame
from dlhim.smoothers import SmootherConfig, smoother_adjoint, smoother_sweep

logger = logging.getLogger(__name__)

DEGENERATE_NORM = 1e-14


class NormKind(str, Enum):
    L2 = "l2"
    L1 = "l1"
    H1 = "h1"


class Basis(str, Enum):
    ERROR = "error"
    RESIDUAL = "residual"


class Framework(str, Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"


class OptimizerKind(str, Enum):
    ADAM = "adam"
    SGD = "sgd"


@dataclass(frozen=True)
class NormSpec:
    kind: NormKind = NormKind.L2
    lam: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"H1 weight lambda must be >= 0, got {self.lam}")


# ============================================================================
# NORMS
# ============================================================================

@lru_cache(maxsize=16)
def gradient_operator(n: int, h: float) -> np.ndarray:
    """Dense discrete gradient: central differences inside, one-sided at both ends."""
    G = np.zeros((n, n))
    if n == 1:
        G.setflags(write=False)
        return G
    rows = np.arange(1, n - 1)
    G[rows, rows - 1] = -0.5 / h
    G[rows, rows + 1] = 0.5 / h
    G[0, 0], G[0, 1] = -1.0 / h, 1.0 / h
    G[-1, -2], G[-1, -1] = -1.0 / h, 1.0 / h
    G.setflags(write=False)
    return G


def norm_eval(x, spec: NormSpec, h: float):
    """Squared norm of x; x may be an ndarray or a tape variable."""
    if np.size(T._val(x)) == 0:
        raise ValueError("norm of an empty vector")
    if spec.kind == NormKind.L2:
        return T.sum_squares(x)
    if spec.kind == NormKind.L1:
        s = T.abs_sum(x)
        return T.mul(s, s)
    value = T.sum_squares(x)
    if spec.lam == 0:
        return value
    grad = T.matmul(gradient_operator(len(T._val(x)), h), x)
    return T.add(value, T.mul(T.sum_squares(grad), spec.lam))


# ============================================================================
# OBJECTIVES
# ============================================================================

@dataclass(frozen=True)
class Objective:
    basis: Basis = Basis.ERROR
    framework: Framework = Framework.STATIC
    norm: NormSpec = field(default_factory=NormSpec)
    unroll: int = 1

    def __post_init__(self):
        if self.framework == Framework.DYNAMIC and self.unroll < 1:
            raise ConfigError(f"dynamic objective needs unroll >= 1, got {self.unroll}")

    @property
    def label(self) -> str:
        suffix = f"-K{self.unroll}" if self.framework == Framework.DYNAMIC else ""
        return f"{self.framework.value}-{self.basis.value}-{self.norm.kind.value}{suffix}"

    def bind(self, smoother: Optional[SmootherConfig] = None) -> "LossSpec":
        return LossSpec(self, smoother or SmootherConfig.default())

    def instance_loss(self, op: CorrectionOperator, blocks, instance: ProblemInstance):
        return self.bind().instance_loss(op, blocks, instance)


def check_dataset(instances: Sequence[ProblemInstance], objective: Objective):
    if not instances:
        raise DatasetError("dataset is empty")
    if objective.basis == Basis.ERROR:
        missing = [i for i, inst in enumerate(instances) if inst.solution is None]
        if missing:
            raise DatasetError(f"error-based objective needs reference solutions; "
                               f"{len(missing)} instance(s) lack one (first: {missing[0]})")


@dataclass(frozen=True)
class LossSpec:
    """An objective bound to the smoother used inside dynamic unrolls."""

    objective: Objective
    smoother: SmootherConfig

    def _reference(self, instance: ProblemInstance) -> Tuple[Optional[np.ndarray], Optional[float]]:
        """Target vector and its squared norm, or (None, None) for a degenerate instance."""
        system = instance.system
        if self.objective.basis == Basis.ERROR:
            if instance.solution is None:
                raise DatasetError("error-based objective needs a reference solution")
            target = instance.solution
        else:
            target = system.rhs
        if np.linalg.norm(target) < DEGENERATE_NORM:
            logger.warning("Skipping degenerate instance (seeds %d/%d): ||%s|| below %.0e",
                           instance.coeff_seed, instance.source_seed,
                           "u*" if self.objective.basis == Basis.ERROR else "f", DEGENERATE_NORM)
            return None, None
        return target, float(norm_eval(target, self.objective.norm, system.grid.h))

    def _ratio(self, u, instance: ProblemInstance, target: np.ndarray, denom: float):
        system = instance.system
        if self.objective.basis == Basis.ERROR:
            defect = T.sub(target, u)
        else:
            defect = T.sub(system.rhs, T.linear(u, system.matvec, system.rmatvec))
        return T.div(norm_eval(defect, self.objective.norm, system.grid.h), denom)

    def instance_loss(self, op: CorrectionOperator, blocks, instance: ProblemInstance):
        target, denom = self._reference(instance)
        if target is None:
            return None
        system = instance.system

        if self.objective.framework == Framework.STATIC:
            u = op.forward(blocks, system.rhs, system.grid, system.coefficient)
            return self._ratio(u, instance, target, denom)

        zero = np.zeros(system.n)
        offset = smoother_sweep(system, zero, self.smoother)
        u = zero
        total = 0.0
        for cycle in range(1, self.objective.unroll + 1):
            u = T.add(T.linear(u, lambda v: smoother_sweep(system, v, self.smoother, rhs=zero),
                               lambda v: smoother_adjoint(system, v, self.smoother)), offset)
            r = T.sub(system.rhs, T.linear(u, system.matvec, system.rmatvec))
            u = T.add(u, op.forward(blocks, r, system.grid, system.coefficient))
            if not np.all(np.isfinite(T._val(u))):
                raise NonFiniteError("non-finite iterate in unrolled cycle", cycle=cycle)
            total = T.add(total, self._ratio(u, instance, target, denom))
        return T.div(total, float(self.objective.unroll))


def _batch_mean(op: CorrectionOperator, batch: Sequence[ProblemInstance], spec: LossSpec) -> float:
    blocks = op.param_blocks()
    values = []
    for index, instance in enumerate(batch):
        loss = spec.instance_loss(op, blocks, instance)
        if loss is None:
            continue
        value = float(loss)
        if not np.isfinite(value):
            raise NonFiniteError("non-finite loss", batch_index=index)
        values.append(value)
    if not values:
        raise DatasetError("every instance in the batch is degenerate")
    return float(np.mean(values))


def static_loss(op: CorrectionOperator, batch: Sequence[ProblemInstance], objective: Objective) -> float:
    """Mean single-step loss with N applied to f (zero initial guess)."""
    if objective.framework != Framework.STATIC:
        raise ConfigError("static_loss needs a static objective")
    return _batch_mean(op, batch, objective.bind())


def dynamic_loss(op: CorrectionOperator, batch: Sequence[ProblemInstance], objective: Objective,
                 solver_cfg) -> float:
    """Mean over batch and cycles of the per-cycle ratios after K unrolled cycles from u = 0."""
    if objective.framework != Framework.DYNAMIC:
        raise ConfigError("dynamic_loss needs a dynamic objective")
    if solver_cfg.strategy.kind != UpdateKind.FIXED_STEP:
        raise ConfigError("dynamic training unrolls fixed-step cycles only, "
                          f"got {solver_cfg.strategy.kind.value}")
    return _batch_mean(op, batch, objective.bind(solver_cfg.smoother))


# ============================================================================
# OPTIMIZERS
# ============================================================================

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 100
    learning_rate: float = 1e-3
    optimizer: OptimizerKind = OptimizerKind.ADAM
    seed: int = 0
    grad_clip: float = 10.0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError(f"batch_size and epochs must be >= 1, got {self.batch_size}/{self.epochs}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be > 0, got {self.grad_clip}")


def clip_by_global_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


class Sgd:
    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return params - self.learning_rate * grad


class Adam:
    """Adaptive moments with bias correction."""

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: Optional[np.ndarray] = None
        self.v: Optional[np.ndarray] = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return params - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == OptimizerKind.ADAM:
        return Adam(cfg.learning_rate)
    return Sgd(cfg.learning_rate)


# ============================================================================
# TRAINING LOOP
# ============================================================================

@dataclass
class TrainingHistory:
    rows: List[Dict] = field(default_factory=list)
    failed: bool = False
    failure: str = ""

    HEADER = ("epoch", "loss", "wall_ms", "peak_tape_bytes")

    @property
    def final_loss(self) -> float:
        return self.rows[-1]["loss"] if self.rows else float("nan")

    @property
    def total_wall_ms(self) -> float:
        return float(sum(row["wall_ms"] for row in self.rows))

    @property
    def peak_tape_bytes(self) -> int:
        return max((row["peak_tape_bytes"] for row in self.rows), default=0)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=list(self.HEADER))

    def to_csv(self, path: str):
        write_frame(self.to_frame(), path)


def train(op: CorrectionOperator, dataset: Sequence[ProblemInstance], objective: Objective,
          train_cfg: TrainConfig, smoother: Optional[SmootherConfig] = None,
          progress: bool = False) -> Tuple[CorrectionOperator, TrainingHistory]:
    """Mini-batch training on a copy of `op`; the input operator is left untouched.

    A non-finite loss or gradient halts training; the history up to the
    failure is returned with `failed` set.
    """
    instances = list(dataset)
    check_dataset(instances, objective)

    trained = op.copy()
    spec = objective.bind(smoother)
    optimizer = make_optimizer(train_cfg)
    rng = np.random.default_rng(train_cfg.seed)
    history = TrainingHistory()

    logger.info("Training %s operator (%d params) on %d instances, objective %s",
                trained.kind.value, trained.n_params, len(instances), objective.label)

    epochs = tqdm(range(1, train_cfg.epochs + 1), desc=objective.label, disable=not progress, leave=False)
    for epoch in epochs:
        start = time.perf_counter()
        order = rng.permutation(len(instances))
        weighted_loss = 0.0
        counted = 0
        peak = 0

        try:
            for lo in range(0, len(order), train_cfg.batch_size):
                batch = [instances[i] for i in order[lo:lo + train_cfg.batch_size]]
                result = apply_and_grad(trained, batch, spec)
                if result.instances == 0:
                    continue
                grad = clip_by_global_norm(result.grad, train_cfg.grad_clip)
                trained.set_params(optimizer.step(trained.params, grad))
                weighted_loss += result.loss_value * result.instances
                counted += result.instances
                peak = max(peak, result.tape_bytes)
        except NonFiniteError as e:
            history.failed = True
            history.failure = f"epoch {epoch}: {e}"
            logger.warning("Training halted at epoch %d: %s", epoch, e)
            break

        if counted == 0:
            raise DatasetError("every training instance is degenerate")

        loss = weighted_loss / counted
        history.rows.append({
            "epoch": epoch,
            "loss": loss,
            "wall_ms": 1000.0 * (time.perf_counter() - start),
            "peak_tape_bytes": peak,
        })
        epochs.set_postfix(loss=f"{loss:.3e}")
        logger.debug("epoch %d loss %.6e", epoch, loss)

    return trained, history
