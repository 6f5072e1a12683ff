"""
PDE Problems - Random 1D parametric PDE instances on [0, 1]

Covers the whole data side of the workbench:
- Gaussian random field sampling (RBF covariance, Cholesky with jitter)
- Shift-and-clip coefficient fields
- Finite-difference assembly for stochastic diffusion and indefinite Helmholtz
- Direct tridiagonal reference solves
- Piecewise-linear grid transfer

Homogeneous Dirichlet boundaries are implicit everywhere: solution and
residual vectors hold interior nodes only.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np
import scipy.linalg

from dlhim.errors import ConfigError, GrfFactorizationError, SingularSystemError

logger = logging.getLogger(__name__)

JITTER_RETRIES = 3
JITTER_GROWTH = 100.0


class ProblemKind(str, Enum):
    DIFFUSION = "diffusion"
    HELMHOLTZ = "helmholtz"


# ============================================================================
# GRIDS AND FIELDS
# ============================================================================

@dataclass(frozen=True)
class Grid1D:
    """Uniform grid on [0, 1]; only interior nodes are unknowns."""

    n_interior: int

    def __post_init__(self):
        if self.n_interior < 1:
            raise ConfigError(f"grid needs at least one interior node, got {self.n_interior}")

    @property
    def h(self) -> float:
        return 1.0 / (self.n_interior + 1)

    @property
    def inv_h2(self) -> float:
        return float((self.n_interior + 1) ** 2)

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(1, self.n_interior + 1) / (self.n_interior + 1)

    @property
    def all_nodes(self) -> np.ndarray:
        return np.arange(0, self.n_interior + 2) / (self.n_interior + 1)


@dataclass(frozen=True)
class GrfConfig:
    """RBF-covariance Gaussian random field, optionally shifted and clipped."""

    sigma: float
    length: float
    mean_shift: float = 0.0
    clip_min: Optional[float] = None
    jitter: float = 1e-10

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if self.length <= 0:
            raise ConfigError(f"correlation length must be > 0, got {self.length}")
        if self.jitter < 0:
            raise ConfigError(f"jitter must be >= 0, got {self.jitter}")


# (mu_k, k_min, sigma, l) = (1.0, 0.3, 0.3, 0.1) and (8.0, 3.0, 2.0, 0.2)
DIFFUSION_COEFFICIENT = GrfConfig(sigma=0.3, length=0.1, mean_shift=1.0, clip_min=0.3)
HELMHOLTZ_WAVENUMBER = GrfConfig(sigma=2.0, length=0.2, mean_shift=8.0, clip_min=3.0)
SOURCE_FIELD = GrfConfig(sigma=1.0, length=0.1)


@dataclass(frozen=True, eq=False)
class FieldSample:
    """Nodal values of a field. Coefficient fields may include the boundary nodes."""

    grid: Grid1D
    values: np.ndarray
    with_boundary: bool = False

    def __post_init__(self):
        expected = self.grid.n_interior + (2 if self.with_boundary else 0)
        if len(self.values) != expected:
            raise ValueError(f"field has {len(self.values)} values, grid expects {expected}")

    @property
    def interior(self) -> np.ndarray:
        return self.values[1:-1] if self.with_boundary else self.values


@lru_cache(maxsize=32)
def _covariance_factor(coords: Tuple[float, ...], sigma: float, length: float,
                       jitter: float) -> np.ndarray:
    x = np.asarray(coords)
    d = x[:, None] - x[None, :]
    cov = sigma ** 2 * np.exp(-d ** 2 / (2.0 * length ** 2))

    current = jitter
    for attempt in range(JITTER_RETRIES + 1):
        try:
            factor = scipy.linalg.cholesky(cov + current * np.eye(len(x)), lower=True)
            factor.setflags(write=False)
            return factor
        except np.linalg.LinAlgError:
            if attempt == JITTER_RETRIES:
                break
            current = max(current, 1e-16) * JITTER_GROWTH
            logger.warning("Covariance not positive definite (n=%d, l=%g), retrying with jitter %.1e",
                           len(x), length, current)

    raise GrfFactorizationError(
        f"covariance factorization failed for grid size {len(x)} and length scale {length} "
        f"after {JITTER_RETRIES} jitter escalations"
    )


def sample_grf(cfg: GrfConfig, grid: Grid1D, seed: int, include_boundary: bool = False) -> FieldSample:
    """Zero-mean GRF sample with C_ij = sigma^2 exp(-|x_i - x_j|^2 / 2l^2) + jitter delta_ij."""
    coords = grid.all_nodes if include_boundary else grid.nodes
    if cfg.sigma == 0:
        return FieldSample(grid, np.zeros(len(coords)), include_boundary)

    factor = _covariance_factor(tuple(coords.tolist()), cfg.sigma, cfg.length, cfg.jitter)
    z = np.random.default_rng(seed).standard_normal(len(coords))
    return FieldSample(grid, factor @ z, include_boundary)


def make_coefficient(raw: FieldSample, mean_shift: float, clip_min: float) -> FieldSample:
    """k(x) = max(raw(x) + mu, k_min) pointwise."""
    return replace(raw, values=np.maximum(raw.values + mean_shift, clip_min))


def sample_coefficient(cfg: GrfConfig, grid: Grid1D, seed: int, include_boundary: bool) -> FieldSample:
    raw = sample_grf(cfg, grid, seed, include_boundary)
    clip = -np.inf if cfg.clip_min is None else cfg.clip_min
    return make_coefficient(raw, cfg.mean_shift, clip)


# ============================================================================
# LINEAR SYSTEMS
# ============================================================================

@dataclass(frozen=True, eq=False)
class LinearSystem:
    """Tridiagonal A (diag, sub = A[i+1, i], sup = A[i, i+1]) with right-hand side f."""

    grid: Grid1D
    diag: np.ndarray
    sub: np.ndarray
    sup: np.ndarray
    rhs: np.ndarray
    spd: bool
    kind: ProblemKind
    coefficient: Optional[FieldSample] = None

    @property
    def n(self) -> int:
        return self.grid.n_interior

    def matvec(self, u: np.ndarray) -> np.ndarray:
        y = self.diag * u
        y[:-1] += self.sup * u[1:]
        y[1:] += self.sub * u[:-1]
        return y

    def rmatvec(self, v: np.ndarray) -> np.ndarray:
        y = self.diag * v
        y[:-1] += self.sub * v[1:]
        y[1:] += self.sup * v[:-1]
        return y

    def residual(self, u: np.ndarray, rhs: Optional[np.ndarray] = None) -> np.ndarray:
        f = self.rhs if rhs is None else rhs
        return f - self.matvec(u)

    def to_dense(self) -> np.ndarray:
        return np.diag(self.diag) + np.diag(self.sup, 1) + np.diag(self.sub, -1)

    def norm1(self) -> float:
        """Induced 1-norm: maximum absolute column sum."""
        col = np.abs(self.diag).copy()
        col[:-1] += np.abs(self.sub)
        col[1:] += np.abs(self.sup)
        return float(col.max())

    def with_rhs(self, rhs: np.ndarray) -> "LinearSystem":
        return replace(self, rhs=np.asarray(rhs, dtype=np.float64))


def _check_rhs(grid: Grid1D, rhs: Optional[np.ndarray]) -> np.ndarray:
    if rhs is None:
        return np.zeros(grid.n_interior)
    rhs = np.asarray(rhs, dtype=np.float64)
    if rhs.shape != (grid.n_interior,):
        raise ValueError(f"rhs has shape {rhs.shape}, grid expects ({grid.n_interior},)")
    return rhs


def assemble_diffusion(k: FieldSample, grid: Grid1D, rhs: Optional[np.ndarray] = None) -> LinearSystem:
    """-(k u')' = f with edge coefficients k_{i+1/2} = (k_i + k_{i+1}) / 2."""
    if not k.with_boundary or k.grid != grid:
        raise ValueError("diffusion coefficient must be sampled on the same grid, boundary nodes included")
    if np.any(k.values <= 0):
        bad = int(np.argmax(k.values <= 0))
        raise ValueError(f"diffusion coefficient must be positive, node {bad} has {k.values[bad]}")

    k_half = 0.5 * (k.values[:-1] + k.values[1:])
    diag = (k_half[:-1] + k_half[1:]) * grid.inv_h2
    off = -k_half[1:-1] * grid.inv_h2
    return LinearSystem(grid, diag, off, off.copy(), _check_rhs(grid, rhs), True,
                        ProblemKind.DIFFUSION, k)


def assemble_helmholtz(k: FieldSample, grid: Grid1D, rhs: Optional[np.ndarray] = None) -> LinearSystem:
    """-u'' - k^2 u = f on the constant-coefficient Laplacian stencil."""
    if k.grid != grid:
        raise ValueError("wavenumber field must be sampled on the system grid")

    n = grid.n_interior
    diag = 2.0 * grid.inv_h2 - k.interior ** 2
    off = np.full(n - 1, -grid.inv_h2)
    return LinearSystem(grid, diag, off, off.copy(), _check_rhs(grid, rhs), False,
                        ProblemKind.HELMHOLTZ, k)


def laplacian_eigenvalues(grid: Grid1D) -> np.ndarray:
    """Eigenvalues (2 - 2cos(j pi h)) / h^2 of the k = 1 stencil, j = 1..n."""
    j = np.arange(1, grid.n_interior + 1)
    return (2.0 - 2.0 * np.cos(j * np.pi * grid.h)) * grid.inv_h2


def sine_modes(grid: Grid1D) -> np.ndarray:
    """Row j-1 holds sin(j pi x_i); eigenvectors of every constant-coefficient stencil."""
    j = np.arange(1, grid.n_interior + 1)
    return np.sin(np.pi * np.outer(j, grid.nodes))


# ============================================================================
# DIRECT SOLVES
# ============================================================================

def _thomas(sub: np.ndarray, diag: np.ndarray, sup: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    n = len(diag)
    c = np.zeros(n)
    d = np.zeros(n)
    pivot = diag[0]
    if pivot == 0:
        raise SingularSystemError("zero pivot at row 0")
    if n > 1:
        c[0] = sup[0] / pivot
    d[0] = rhs[0] / pivot
    for i in range(1, n):
        pivot = diag[i] - sub[i - 1] * c[i - 1]
        if pivot == 0:
            raise SingularSystemError(f"zero pivot at row {i}")
        if i < n - 1:
            c[i] = sup[i] / pivot
        d[i] = (rhs[i] - sub[i - 1] * d[i - 1]) / pivot

    u = np.zeros(n)
    u[-1] = d[-1]
    for i in range(n - 2, -1, -1):
        u[i] = d[i] - c[i] * u[i + 1]
    return u


def direct_solve(system: LinearSystem, rhs: Optional[np.ndarray] = None) -> np.ndarray:
    """Reference solve: Thomas for SPD systems, pivoted banded LU otherwise."""
    f = system.rhs if rhs is None else np.asarray(rhs, dtype=np.float64)
    if system.spd:
        return _thomas(system.sub, system.diag, system.sup, f)

    n = system.n
    ab = np.zeros((3, n))
    ab[0, 1:] = system.sup
    ab[1, :] = system.diag
    ab[2, :-1] = system.sub
    try:
        return scipy.linalg.solve_banded((1, 1), ab, f)
    except np.linalg.LinAlgError as e:
        raise SingularSystemError(f"banded LU failed: {e}")


# ============================================================================
# GRID TRANSFER
# ============================================================================

@lru_cache(maxsize=64)
def _transfer_matrix(n_src: int, n_dst: int) -> np.ndarray:
    src = Grid1D(n_src)
    xs = src.all_nodes
    x = Grid1D(n_dst).nodes

    cell = np.clip(np.searchsorted(xs, x, side="right") - 1, 0, n_src)
    w = (x - xs[cell]) / (xs[cell + 1] - xs[cell])

    # padded node p maps to interior column p - 1; boundary nodes carry zeros
    P = np.zeros((n_dst, n_src))
    rows = np.arange(n_dst)
    left = cell - 1
    right = cell
    keep = left >= 0
    P[rows[keep], left[keep]] = 1.0 - w[keep]
    keep = right < n_src
    P[rows[keep], right[keep]] += w[keep]
    P.setflags(write=False)
    return P


def transfer_matrix(src: Grid1D, dst: Grid1D) -> np.ndarray:
    """Dense piecewise-linear transfer of interior vectors (zero Dirichlet padding)."""
    return _transfer_matrix(src.n_interior, dst.n_interior)


def _transfer(v: np.ndarray, dst: Grid1D) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if len(v) == dst.n_interior:
        return v.copy()
    return transfer_matrix(Grid1D(len(v)), dst) @ v


def restrict(v: np.ndarray, coarse: Grid1D) -> np.ndarray:
    """Fine interior vector -> coarse interior nodes."""
    return _transfer(v, coarse)


def interpolate(v: np.ndarray, fine: Grid1D) -> np.ndarray:
    """Coarse interior vector -> fine interior nodes."""
    return _transfer(v, fine)


def transfer_field(k: FieldSample, dst: Grid1D) -> np.ndarray:
    """Coefficient field values at the interior nodes of dst."""
    if k.grid == dst:
        return k.interior.copy()
    if k.with_boundary:
        return np.interp(dst.nodes, k.grid.all_nodes, k.values)
    return np.interp(dst.nodes, k.grid.nodes, k.values)


# ============================================================================
# INSTANCES
# ============================================================================

@dataclass(frozen=True, eq=False)
class ProblemInstance:
    """One (A, f, u*) sample plus the seeds that regenerate it."""

    system: LinearSystem
    solution: Optional[np.ndarray] = None
    coeff_seed: int = 0
    source_seed: int = 0

    @property
    def kind(self) -> ProblemKind:
        return self.system.kind

    @property
    def grid(self) -> Grid1D:
        return self.system.grid


def default_coefficient_config(kind: ProblemKind) -> GrfConfig:
    return DIFFUSION_COEFFICIENT if kind == ProblemKind.DIFFUSION else HELMHOLTZ_WAVENUMBER


def instance_seeds(master_seed: int, index: int) -> Tuple[int, int]:
    """Independent (coefficient, source) seeds for instance `index`."""
    state = np.random.SeedSequence([int(master_seed), int(index)]).generate_state(2)
    return int(state[0]), int(state[1])


def make_instance(kind: ProblemKind, grid: Grid1D, coeff_seed: int, source_seed: int,
                  coeff_cfg: Optional[GrfConfig] = None, source_cfg: Optional[GrfConfig] = None,
                  with_solution: bool = True) -> ProblemInstance:
    coeff_cfg = coeff_cfg or default_coefficient_config(kind)
    source_cfg = source_cfg or SOURCE_FIELD

    f = sample_grf(source_cfg, grid, source_seed).values
    if kind == ProblemKind.DIFFUSION:
        k = sample_coefficient(coeff_cfg, grid, coeff_seed, include_boundary=True)
        system = assemble_diffusion(k, grid, f)
    else:
        k = sample_coefficient(coeff_cfg, grid, coeff_seed, include_boundary=False)
        system = assemble_helmholtz(k, grid, f)

    solution = direct_solve(system) if with_solution else None
    return ProblemInstance(system, solution, coeff_seed, source_seed)


def generate_instances(kind: ProblemKind, grid: Grid1D, count: int, master_seed: int,
                       coeff_cfg: Optional[GrfConfig] = None, source_cfg: Optional[GrfConfig] = None,
                       with_solution: bool = True, threads: int = 1) -> List[ProblemInstance]:
    """Instances 0..count-1 of a seeded family; output order never depends on threads."""

    def build(index: int) -> ProblemInstance:
        cs, ss = instance_seeds(master_seed, index)
        return make_instance(kind, grid, cs, ss, coeff_cfg, source_cfg, with_solution)

    if threads <= 1:
        return [build(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(build, range(count)))
