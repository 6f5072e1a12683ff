"""
Smoothers - Classical stationary relaxation and its propagation diagnostics

One sweep is u <- u + omega * S (f - A u) with S = D^-1 (Jacobi) or
S = (D + L)^-1 (Gauss-Seidel, forward substitution). The solver path is
matrix-free over the tridiagonal bands; the dense propagation matrices are
diagnostics for small systems only.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
import pandas as pd
import scipy.linalg

from dlhim.errors import ConfigError, SmootherError
from dlhim.pde_problems import LinearSystem, sine_modes

logger = logging.getLogger(__name__)

DENSE_SIZE_CAP = 2048


class SmootherKind(str, Enum):
    JACOBI = "jacobi"
    GAUSS_SEIDEL = "gauss_seidel"


@dataclass(frozen=True)
class SmootherConfig:
    kind: SmootherKind = SmootherKind.JACOBI
    omega: float = 2.0 / 3.0
    sweeps: int = 19

    def __post_init__(self):
        # omega = 0 is the identity smoother, kept for diagnostics
        if not 0.0 <= self.omega < 2.0:
            raise ConfigError(f"omega must lie in [0, 2), got {self.omega}")
        if self.sweeps < 0:
            raise ConfigError(f"sweeps must be >= 0, got {self.sweeps}")

    @classmethod
    def default(cls, kind: SmootherKind = SmootherKind.JACOBI, sweeps: int = 19) -> "SmootherConfig":
        omega = 2.0 / 3.0 if kind == SmootherKind.JACOBI else 1.0
        return cls(kind=kind, omega=omega, sweeps=sweeps)


def _check_diagonal(system: LinearSystem):
    zero = np.flatnonzero(system.diag == 0)
    if len(zero):
        raise SmootherError(int(zero[0]))


def _lower_bands(system: LinearSystem) -> np.ndarray:
    ab = np.zeros((2, system.n))
    ab[0] = system.diag
    ab[1, :-1] = system.sub
    return ab


def _upper_bands(system: LinearSystem) -> np.ndarray:
    # transpose of D + L is D + L^T, stored as an upper band
    ab = np.zeros((2, system.n))
    ab[0, 1:] = system.sub
    ab[1] = system.diag
    return ab


def apply_preconditioner(system: LinearSystem, r: np.ndarray, kind: SmootherKind) -> np.ndarray:
    """S r for the chosen splitting."""
    if kind == SmootherKind.JACOBI:
        return r / system.diag
    return scipy.linalg.solve_banded((1, 0), _lower_bands(system), r, check_finite=False)


def apply_preconditioner_transpose(system: LinearSystem, v: np.ndarray, kind: SmootherKind) -> np.ndarray:
    """S^T v for the chosen splitting."""
    if kind == SmootherKind.JACOBI:
        return v / system.diag
    return scipy.linalg.solve_banded((0, 1), _upper_bands(system), v, check_finite=False)


def smoother_sweep(system: LinearSystem, u: np.ndarray, cfg: SmootherConfig,
                   rhs: Optional[np.ndarray] = None) -> np.ndarray:
    """Apply cfg.sweeps relaxation steps to u; returns a new vector."""
    _check_diagonal(system)
    f = system.rhs if rhs is None else rhs
    u = np.array(u, dtype=np.float64, copy=True)
    if cfg.omega == 0.0:
        return u
    for _ in range(cfg.sweeps):
        u += cfg.omega * apply_preconditioner(system, f - system.matvec(u), cfg.kind)
    return u


def smoother_adjoint(system: LinearSystem, v: np.ndarray, cfg: SmootherConfig) -> np.ndarray:
    """Transpose of the linear part of cfg.sweeps sweeps: ((I - omega S A)^T)^n v."""
    v = np.array(v, dtype=np.float64, copy=True)
    if cfg.omega == 0.0:
        return v
    for _ in range(cfg.sweeps):
        v -= cfg.omega * system.rmatvec(apply_preconditioner_transpose(system, v, cfg.kind))
    return v


# ============================================================================
# DENSE DIAGNOSTICS
# ============================================================================

def _dense_preconditioner(system: LinearSystem, kind: SmootherKind) -> np.ndarray:
    if system.n > DENSE_SIZE_CAP:
        raise SmootherError(message=f"dense diagnostics are capped at n={DENSE_SIZE_CAP}, got n={system.n}")
    _check_diagonal(system)
    A = system.to_dense()
    if kind == SmootherKind.JACOBI:
        return np.diag(1.0 / system.diag)
    return scipy.linalg.solve_triangular(np.tril(A), np.eye(system.n), lower=True)


def error_propagation_matrix(system: LinearSystem, cfg: SmootherConfig) -> np.ndarray:
    """E_S^n = (I - omega S A)^n as a dense matrix."""
    S = _dense_preconditioner(system, cfg.kind)
    step = np.eye(system.n) - cfg.omega * S @ system.to_dense()
    return np.linalg.matrix_power(step, cfg.sweeps)


def residual_propagation_matrix(system: LinearSystem, cfg: SmootherConfig) -> np.ndarray:
    """R_S^n = (I - omega A S)^n as a dense matrix."""
    S = _dense_preconditioner(system, cfg.kind)
    step = np.eye(system.n) - cfg.omega * system.to_dense() @ S
    return np.linalg.matrix_power(step, cfg.sweeps)


@dataclass(frozen=True)
class SpectralEstimate:
    value: float
    converged: bool


def spectral_radius(M: np.ndarray, starts: int = 5, iterations: int = 500, tol: float = 1e-8,
                    seed: int = 0) -> SpectralEstimate:
    """Power-iteration estimate of rho(M), best over several starts.

    The first start is the normalized ones vector, the rest are seeded
    Gaussian vectors. Each start reports |x^T M x| once successive estimates
    agree to `tol` (relative); otherwise the last ||M x|| is kept and the
    result is flagged as not converged.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"spectral radius needs a square matrix, got shape {M.shape}")

    n = M.shape[0]
    rng = np.random.default_rng(seed)
    best_converged = None
    best_any = 0.0

    for start in range(starts):
        x = np.ones(n) if start == 0 else rng.standard_normal(n)
        x /= np.linalg.norm(x)
        estimate = np.inf
        converged = False
        growth = 0.0
        for _ in range(iterations):
            y = M @ x
            growth = float(np.linalg.norm(y))
            if growth == 0.0:
                estimate, converged = 0.0, True
                break
            rayleigh = abs(float(x @ y))
            if abs(rayleigh - estimate) <= tol * max(rayleigh, 1e-300):
                estimate, converged = rayleigh, True
                break
            estimate = rayleigh
            x = y / growth

        if converged:
            best_converged = estimate if best_converged is None else max(best_converged, estimate)
        best_any = max(best_any, growth)

    if best_converged is not None:
        return SpectralEstimate(best_converged, True)
    logger.debug("Power iteration did not converge after %d starts", starts)
    return SpectralEstimate(best_any, False)


def mode_damping(system: LinearSystem, cfg: SmootherConfig) -> np.ndarray:
    """Amplification of each discrete sine mode under E_S^n (exact eigenvalue for
    constant-coefficient stencils with Jacobi)."""
    modes = sine_modes(system.grid)
    zero = np.zeros(system.n)
    out = np.empty(system.n)
    for j, mode in enumerate(modes):
        image = smoother_sweep(system, mode, cfg, rhs=zero)
        out[j] = float(mode @ image) / float(mode @ mode)
    return out


def export_mode_damping(system: LinearSystem, cfg: SmootherConfig, path: str) -> pd.DataFrame:
    frame = pd.DataFrame({
        "mode": np.arange(1, system.n + 1),
        "eigenvalue_estimate": mode_damping(system, cfg),
    })
    frame.to_csv(path, index=False, float_format="%.17g")
    return frame
