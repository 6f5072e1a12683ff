"""
Hybrid Solver - The DL-HIM fixed-point loop G = M_N o M_S^n

One cycle smooths n times, then adds the neural correction N(f - A u).
`solve` iterates from u = 0, routes each candidate through the configured
update strategy, and ends with a verdict: Converged, Stagnated, Diverged or
MaxCycles. Failures are verdicts, never exceptions.
"""

import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from dlhim.acceleration import (AaHistory, UpdateKind, UpdateStrategy, adaptive_alpha,
                                physics_aware_aa_step, standard_aa_step)
from dlhim.errors import ConfigError
from dlhim.neural_correction import CorrectionOperator
from dlhim.pde_problems import LinearSystem, direct_solve
from dlhim.reports import write_frame, write_yaml
from dlhim.smoothers import SmootherConfig, apply_preconditioner, smoother_sweep

logger = logging.getLogger(__name__)

CONTRACTION_WINDOW = 10


class Verdict(str, Enum):
    CONVERGED = "converged"
    STAGNATED = "stagnated"
    DIVERGED = "diverged"
    MAX_CYCLES = "max_cycles"


@dataclass(frozen=True)
class SolverConfig:
    smoother: SmootherConfig = field(default_factory=SmootherConfig.default)
    strategy: UpdateStrategy = field(default_factory=UpdateStrategy)
    max_cycles: int = 1000
    tol_residual: float = 1e-9
    tol_update: float = 1e-12
    track_error: bool = False
    stagnation_window: int = 25
    stagnation_update_tol: float = 1e-3
    divergence_factor: float = 1e8

    def __post_init__(self):
        if self.max_cycles < 1:
            raise ConfigError(f"max_cycles must be >= 1, got {self.max_cycles}")
        if self.tol_residual <= 0 or self.tol_update <= 0:
            raise ConfigError("tolerances must be > 0")
        if self.stagnation_window < 2:
            raise ConfigError(f"stagnation_window must be >= 2, got {self.stagnation_window}")
        if self.stagnation_update_tol <= 0 or self.divergence_factor <= 0:
            raise ConfigError("stagnation_update_tol and divergence_factor must be > 0")

    def to_dict(self) -> Dict:
        def plain(value):
            if isinstance(value, Enum):
                return value.value
            if isinstance(value, dict):
                return {k: plain(v) for k, v in value.items()}
            return value
        return plain(asdict(self))


# ============================================================================
# TRACE
# ============================================================================

@dataclass
class TraceRow:
    cycle: int
    res_norm: float
    err_norm: float
    upd_norm: float
    alpha_info: str
    wall_ms: float
    u_norm: float = 0.0
    window_best: float = math.nan
    next_res_norm: float = math.nan


@dataclass
class StagnationReport:
    flagged: bool
    median_update: float = math.nan
    median_relative_residual: float = math.nan
    residual_progress: float = math.nan
    gap_ratio: float = math.nan
    reason: str = ""


def _geometric_rate(values: Sequence[float]) -> float:
    tail = [float(v) for v in values[-(CONTRACTION_WINDOW + 1):]]
    if len(tail) < 2:
        return math.nan
    first, last = tail[0], tail[-1]
    if first == 0.0:
        return 0.0
    return (last / first) ** (1.0 / (len(tail) - 1))


@dataclass
class ConvergenceTrace:
    rows: List[TraceRow] = field(default_factory=list)
    verdict: Verdict = Verdict.MAX_CYCLES
    rhs_norm: float = 0.0
    stagnation: Optional[StagnationReport] = None
    metadata: Dict = field(default_factory=dict)

    HEADER = ("cycle", "res_norm", "err_norm", "upd_norm", "alpha_info", "wall_ms")

    def __len__(self):
        return len(self.rows)

    @property
    def q_r(self) -> float:
        """Geometric-mean residual contraction over the last 10 cycles."""
        return _geometric_rate([row.res_norm for row in self.rows])

    @property
    def q_e(self) -> float:
        errors = [row.err_norm for row in self.rows]
        if not errors or any(math.isnan(e) for e in errors):
            return math.nan
        return _geometric_rate(errors)

    @property
    def final_residual(self) -> float:
        return self.rows[-1].res_norm if self.rows else math.nan

    @property
    def final_relative_residual(self) -> float:
        if not self.rows:
            return math.nan
        return self.final_residual / self.rhs_norm if self.rhs_norm > 0 else self.final_residual

    @property
    def final_error(self) -> float:
        return self.rows[-1].err_norm if self.rows else math.nan

    def cycles_to_reach(self, relative_residual: float) -> Optional[int]:
        scale = self.rhs_norm if self.rhs_norm > 0 else 1.0
        for row in self.rows:
            if row.res_norm <= relative_residual * scale:
                return row.cycle
        return None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{name: getattr(row, name) for name in self.HEADER} for row in self.rows],
                            columns=list(self.HEADER))

    def summary(self) -> Dict:
        out = {
            "verdict": self.verdict.value,
            "cycles": len(self.rows),
            "final_res_norm": self.final_residual,
            "final_relative_residual": self.final_relative_residual,
            "q_r": self.q_r,
            "q_e": self.q_e,
        }
        if self.stagnation is not None:
            out["stagnation"] = asdict(self.stagnation)
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in out.items()}

    def to_csv(self, path: str):
        """Trace CSV plus a `<name>.meta.yaml` sidecar with verdict and config echo."""
        write_frame(self.to_frame(), path)
        write_yaml({**self.summary(), **self.metadata}, os.path.splitext(path)[0] + ".meta.yaml")


# ============================================================================
# CYCLE
# ============================================================================

@dataclass
class CycleDiagnostics:
    smoothed: np.ndarray
    residual: np.ndarray
    correction: np.ndarray
    step: float = 1.0
    degenerate_step: bool = False


def dl_him_cycle(system: LinearSystem, u: np.ndarray, op: CorrectionOperator,
                 cfg: SolverConfig) -> Tuple[np.ndarray, CycleDiagnostics]:
    """n smoother sweeps, then one neural correction (scaled for AdaptiveStep)."""
    smoothed = smoother_sweep(system, u, cfg.smoother)
    r = system.residual(smoothed)
    p = np.asarray(op.correct(r, system), dtype=np.float64)

    diag = CycleDiagnostics(smoothed, r, p)
    if cfg.strategy.kind == UpdateKind.ADAPTIVE_STEP and np.any(p):
        step = adaptive_alpha(p, r, system)
        diag.step, diag.degenerate_step = step.alpha, step.degenerate
    return smoothed + diag.step * p, diag


# ============================================================================
# STAGNATION
# ============================================================================

def detect_stagnation(window: Sequence[TraceRow], cfg: SolverConfig, rhs_norm: float,
                      a_norm1: float) -> StagnationReport:
    """False-fixed-point test over the last `cfg.stagnation_window` rows.

    Flags when the median update is below stagnation_update_tol * ||u||, the
    median relative residual is at least 100 * tol_residual, and the residual
    dropped by less than 10% across the window.
    """
    W = cfg.stagnation_window
    if len(window) < W:
        return StagnationReport(False, reason=f"window has {len(window)} < {W} rows")

    rows = list(window)[-W:]
    scale = rhs_norm if rhs_norm > 0 else 1.0
    updates = np.array([row.upd_norm for row in rows])
    residuals = np.array([row.res_norm for row in rows])
    u_norms = np.array([row.u_norm for row in rows])

    median_update = float(np.median(updates))
    median_residual = float(np.median(residuals))
    relative = median_residual / scale
    progress = float(residuals[-1] / residuals[0]) if residuals[0] > 0 else 1.0
    gap = median_residual / (a_norm1 * median_update) if median_update > 0 else math.inf

    small_update = median_update <= cfg.stagnation_update_tol * float(np.median(u_norms))
    large_residual = relative >= 100.0 * cfg.tol_residual
    no_progress = progress >= 0.9
    flagged = bool(small_update and large_residual and no_progress)

    reason = _miss_reason(small_update, large_residual, no_progress)
    return StagnationReport(flagged, median_update, relative, progress, gap, reason)


def _miss_reason(small_update: bool, large_residual: bool, no_progress: bool) -> str:
    if small_update and large_residual and no_progress:
        return "false fixed point"
    misses = []
    if not small_update:
        misses.append("update not small")
    if not large_residual:
        misses.append("residual already small")
    if not no_progress:
        misses.append("residual still decreasing")
    return "; ".join(misses)


# ============================================================================
# SOLVE
# ============================================================================

def _alpha_info(kind: UpdateKind, diag: CycleDiagnostics, history: Optional[AaHistory]) -> str:
    if kind == UpdateKind.FIXED_STEP:
        return "1"
    if kind == UpdateKind.ADAPTIVE_STEP:
        suffix = " degenerate" if diag.degenerate_step else ""
        return f"{diag.step:.17g}{suffix}"
    solved = history.last
    alphas = " ".join(f"{a:.17g}" for a in solved.alpha)
    return f"cond={solved.condition:.6g};alpha={alphas}"


def solve(system: LinearSystem, op: CorrectionOperator, cfg: SolverConfig,
          solution: Optional[np.ndarray] = None) -> ConvergenceTrace:
    """Run DL-HIM cycles from u = 0 until a verdict is reached."""
    if cfg.track_error and solution is None:
        solution = direct_solve(system)

    rhs_norm = float(np.linalg.norm(system.rhs))
    a_norm1 = system.norm1()
    kind = cfg.strategy.kind
    history = AaHistory(cfg.strategy.memory) if kind.is_anderson else None
    trace = ConvergenceTrace(rhs_norm=rhs_norm, metadata={
        "operator": op.describe(),
        "solver": cfg.to_dict(),
        "n_interior": system.n,
        "problem": system.kind.value,
    })

    u = np.zeros(system.n)
    start = time.perf_counter()

    for cycle in range(cfg.max_cycles + 1):
        res_norm = float(np.linalg.norm(system.residual(u)))
        err_norm = float(np.linalg.norm(solution - u)) if cfg.track_error else math.nan
        u_norm = float(np.linalg.norm(u))

        with np.errstate(all="ignore"):
            g, diag = dl_him_cycle(system, u, op, cfg)
        upd_norm = float(np.linalg.norm(g - u))

        row = TraceRow(cycle, res_norm, err_norm, upd_norm, "", 0.0, u_norm)
        trace.rows.append(row)

        verdict = None
        if not (np.isfinite(res_norm) and np.isfinite(upd_norm)) \
                or res_norm > cfg.divergence_factor * max(rhs_norm, np.finfo(float).tiny):
            verdict = Verdict.DIVERGED
        elif res_norm <= cfg.tol_residual * rhs_norm:
            verdict = Verdict.CONVERGED
        elif upd_norm <= cfg.tol_update * max(u_norm, 1.0):
            # the iterate can no longer move; only a flagged window counts as stagnation
            trace.stagnation = detect_stagnation(trace.rows[-cfg.stagnation_window:], cfg, rhs_norm, a_norm1)
            verdict = Verdict.STAGNATED if trace.stagnation.flagged else Verdict.MAX_CYCLES
            trace.metadata["stop_reason"] = "update below tol_update"
        elif cycle == cfg.max_cycles:
            verdict = Verdict.MAX_CYCLES

        if verdict is not None:
            row.wall_ms = 1000.0 * (time.perf_counter() - start)
            trace.verdict = verdict
            break

        if kind == UpdateKind.STANDARD_AA:
            u_next = standard_aa_step(history, g, u, cfg.strategy)
        elif kind == UpdateKind.PHYSICS_AWARE_AA:
            u_next = physics_aware_aa_step(history, g, system, cfg.strategy, u)
            row.window_best = min(float(np.linalg.norm(r)) for r in history.residuals)
            row.next_res_norm = float(np.linalg.norm(system.residual(u_next)))
        else:
            u_next = g
        row.alpha_info = _alpha_info(kind, diag, history)
        row.wall_ms = 1000.0 * (time.perf_counter() - start)

        report = detect_stagnation(trace.rows[-cfg.stagnation_window:], cfg, rhs_norm, a_norm1)
        if report.flagged:
            trace.verdict = Verdict.STAGNATED
            trace.stagnation = report
            break
        u = u_next

    logger.debug("solve %s n=%d: %s after %d rows (res %.3e)", kind.value, system.n,
                 trace.verdict.value, len(trace.rows), trace.final_residual)
    return trace


# ============================================================================
# FULL-CYCLE PROPAGATION
# ============================================================================

def error_propagation(system: LinearSystem, op: CorrectionOperator, cfg: SolverConfig,
                      e: np.ndarray) -> np.ndarray:
    """E(e) = E_N(E_S^n e): error after one fixed-step cycle started with error e."""
    smoothed = smoother_sweep(system, e, cfg.smoother, rhs=np.zeros(system.n))
    return smoothed - op.correct(system.matvec(smoothed), system)


def residual_propagation(system: LinearSystem, op: CorrectionOperator, cfg: SolverConfig,
                         r: np.ndarray) -> np.ndarray:
    """R(r) = R_N(R_S^n r): residual after one fixed-step cycle started with residual r."""
    sm = cfg.smoother
    r = np.array(r, dtype=np.float64, copy=True)
    if sm.omega != 0.0:
        for _ in range(sm.sweeps):
            r -= sm.omega * system.matvec(apply_preconditioner(system, r, sm.kind))
    return r - system.matvec(op.correct(r, system))
