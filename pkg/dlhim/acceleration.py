"""
Acceleration - Inference-time update strategies for the DL-HIM fixed-point map

- FixedStep: u <- G(u)
- AdaptiveStep: correction scaled by the A-norm line minimizer p^T r / p^T A p
- StandardAA: Anderson mixing over fixed-point residuals g - u
- PhysicsAwareAA: the same mixing over physical residuals f - A g
"""

import logging
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence

import numpy as np
import scipy.linalg

from dlhim.errors import ConfigError
from dlhim.pde_problems import LinearSystem

logger = logging.getLogger(__name__)

CONDITION_LIMIT = 1e12
DEGENERATE_CURVATURE = 1e-14


class UpdateKind(str, Enum):
    FIXED_STEP = "fixed_step"
    ADAPTIVE_STEP = "adaptive_step"
    STANDARD_AA = "standard_aa"
    PHYSICS_AWARE_AA = "physics_aware_aa"

    @property
    def is_anderson(self) -> bool:
        return self in (UpdateKind.STANDARD_AA, UpdateKind.PHYSICS_AWARE_AA)


@dataclass(frozen=True)
class UpdateStrategy:
    kind: UpdateKind = UpdateKind.FIXED_STEP
    memory: int = 10
    damping: float = 1.0
    ls_regularization: float = 1e-10

    def __post_init__(self):
        if self.memory < 1:
            raise ConfigError(f"AA memory must be >= 1, got {self.memory}")
        if not 0.0 < self.damping <= 1.0:
            raise ConfigError(f"AA damping must lie in (0, 1], got {self.damping}")
        if self.ls_regularization < 0:
            raise ConfigError(f"ls_regularization must be >= 0, got {self.ls_regularization}")


# ============================================================================
# ADAPTIVE STEP
# ============================================================================

@dataclass(frozen=True)
class StepSize:
    alpha: float
    degenerate: bool = False


def adaptive_alpha(p: np.ndarray, r: np.ndarray, system: LinearSystem) -> StepSize:
    """alpha = p^T r / p^T A p; falls back to 1 when the curvature vanishes."""
    pp = float(p @ p)
    if pp == 0.0:
        raise ValueError("adaptive step needs a nonzero direction")

    curvature = float(p @ system.matvec(p))
    if abs(curvature) <= DEGENERATE_CURVATURE * pp:
        logger.debug("Degenerate curvature p^T A p = %.3e, using alpha = 1", curvature)
        return StepSize(1.0, True)
    return StepSize(float(p @ r) / curvature)


# ============================================================================
# ANDERSON MIXING
# ============================================================================

@dataclass(frozen=True)
class MixingSolve:
    alpha: np.ndarray
    condition: float = 1.0
    regularized: bool = False


def _difference_lstsq(dR: np.ndarray, r0: np.ndarray, reg: float) -> MixingSolve:
    Q, R = np.linalg.qr(dR)
    diag = np.abs(np.diag(R))
    condition = float(diag.max() / diag.min()) if diag.min() > 0 else np.inf
    if condition <= CONDITION_LIMIT:
        gamma = scipy.linalg.solve_triangular(R, -(Q.T @ r0))
        return MixingSolve(gamma, condition)

    mu = reg * float(np.sum(dR * dR))
    if mu > 0:
        k = dR.shape[1]
        stacked = np.vstack([dR, np.sqrt(mu) * np.eye(k)])
        rhs = np.concatenate([-r0, np.zeros(k)])
        Qa, Ra = np.linalg.qr(stacked)
        gamma = scipy.linalg.solve_triangular(Ra, Qa.T @ rhs)
    else:
        gamma = scipy.linalg.lstsq(dR, -r0)[0]
    logger.debug("AA window ill-conditioned (cond %.2e), regularized with mu = %.2e", condition, mu)
    return MixingSolve(gamma, condition, True)


def solve_mixing(residuals: Sequence[np.ndarray], reg: float = 1e-10) -> MixingSolve:
    """Coefficients minimizing ||sum_j alpha_j r_j|| subject to sum_j alpha_j = 1.

    residuals[0] is the newest. The constraint is eliminated with
    alpha_0 = 1 - sum(gamma), leaving min ||r_0 + dR gamma|| over the
    differences dR[:, j-1] = r_j - r_0, solved by QR.
    """
    if len(residuals) == 0:
        raise ValueError("AA coefficients need at least one residual")
    if len(residuals) == 1:
        return MixingSolve(np.ones(1))

    r0 = np.asarray(residuals[0], dtype=np.float64)
    dR = np.column_stack([np.asarray(r, dtype=np.float64) - r0 for r in residuals[1:]])
    if not np.any(dR):
        gamma = np.zeros(dR.shape[1])
        solved = MixingSolve(gamma, np.inf, True)
    else:
        solved = _difference_lstsq(dR, r0, reg)
        gamma = solved.alpha

    alpha = np.concatenate([[1.0 - gamma.sum()], gamma])
    if solved.regularized:
        alpha = _no_worse_than_best(alpha, residuals)
    return MixingSolve(alpha, solved.condition, solved.regularized)


def _no_worse_than_best(alpha: np.ndarray, residuals: Sequence[np.ndarray]) -> np.ndarray:
    """Swap a shrunk mix for the best single window entry when it is worse."""
    norms = [float(np.linalg.norm(r)) for r in residuals]
    best = int(np.argmin(norms))
    mixed = float(np.linalg.norm(sum(a * np.asarray(r, dtype=np.float64) for a, r in zip(alpha, residuals))))
    if mixed <= norms[best]:
        return alpha
    logger.debug("Regularized AA mix %.3e exceeds window best %.3e, taking entry %d", mixed, norms[best], best)
    vertex = np.zeros(len(residuals))
    vertex[best] = 1.0
    return vertex


def aa_coefficients(residuals: Sequence[np.ndarray], reg: float = 1e-10) -> np.ndarray:
    return solve_mixing(residuals, reg).alpha


class AaHistory:
    """Ring buffer of the last m+1 candidates, their residuals and source iterates."""

    def __init__(self, memory: int):
        if memory < 1:
            raise ValueError(f"AA memory must be >= 1, got {memory}")
        self.memory = memory
        self._entries = deque(maxlen=memory + 1)
        self.last: Optional[MixingSolve] = None

    def __len__(self):
        return len(self._entries)

    def push(self, g: np.ndarray, residual: np.ndarray, u: Optional[np.ndarray] = None):
        g = np.asarray(g, dtype=np.float64)
        residual = np.asarray(residual, dtype=np.float64)
        if self._entries and len(g) != len(self._entries[0][0]):
            raise ValueError(f"candidate length {len(g)} does not match history length {len(self._entries[0][0])}")
        if residual.shape != g.shape:
            raise ValueError("candidate and residual lengths differ")
        self._entries.appendleft((g.copy(), residual.copy(), None if u is None else np.array(u, dtype=np.float64)))

    @property
    def candidates(self) -> List[np.ndarray]:
        return [e[0] for e in self._entries]

    @property
    def residuals(self) -> List[np.ndarray]:
        return [e[1] for e in self._entries]

    @property
    def iterates(self) -> List[Optional[np.ndarray]]:
        return [e[2] for e in self._entries]

    def iterate_differences(self) -> np.ndarray:
        """U_k columns u_{k-j} - u_{k-j-1}; diagnostic only."""
        us = [u for u in self.iterates if u is not None]
        if len(us) < 2:
            return np.zeros((len(us[0]) if us else 0, 0))
        return np.column_stack([a - b for a, b in zip(us[:-1], us[1:])])

    def clear(self):
        self._entries.clear()
        self.last = None


def _mix(history: AaHistory, strategy: UpdateStrategy) -> np.ndarray:
    solved = solve_mixing(history.residuals, strategy.ls_regularization)
    history.last = solved
    mixed = sum(a * g for a, g in zip(solved.alpha, history.candidates))
    if strategy.damping == 1.0:
        return mixed

    iterates = history.iterates
    if any(u is None for u in iterates):
        raise ValueError("damped AA needs the source iterate of every stored candidate")
    mixed_u = sum(a * u for a, u in zip(solved.alpha, iterates))
    return strategy.damping * mixed + (1.0 - strategy.damping) * mixed_u


def standard_aa_step(history: AaHistory, g_k: np.ndarray, u_k: np.ndarray,
                     strategy: UpdateStrategy) -> np.ndarray:
    """Record (g_k, g_k - u_k) and return the Anderson-mixed next iterate."""
    history.push(g_k, g_k - u_k, u_k)
    return _mix(history, strategy)


def physics_aware_aa_step(history: AaHistory, g_k: np.ndarray, system: LinearSystem,
                          strategy: UpdateStrategy, u_k: Optional[np.ndarray] = None) -> np.ndarray:
    """Record (g_k, f - A g_k) and return the mix minimizing the physical residual."""
    history.push(g_k, system.residual(g_k), u_k)
    return _mix(history, strategy)
