"""
Neural Correction - Trainable operators N_theta mapping residuals to error estimates

- DeepOnetOperator: branch/trunk network (nonlinear in r), HINTS-style
- SpectralOperator: sine-mode filter with k-conditioned multipliers (linear in r), FNS-style
- ZeroCorrection: N_theta = 0, the pure-smoother sentinel

Parameters live in one flat float64 vector; the layout is derived from the
architecture descriptor, which is everything a checkpoint needs besides the
parameters themselves.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from dlhim import tape as T
from dlhim.containers import read_container, write_container
from dlhim.errors import CheckpointError, NonFiniteError
from dlhim.pde_problems import (FieldSample, Grid1D, LinearSystem, laplacian_eigenvalues,
                                transfer_field, transfer_matrix)

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = "1"
TRAIN_GRID = 31


class OperatorKind(str, Enum):
    DEEPONET = "deeponet"
    SPECTRAL = "spectral"
    ZERO = "zero"


@dataclass
class TapeGradient:
    loss_value: float
    grad: np.ndarray
    tape_bytes: int = 0
    instances: int = 0


class CorrectionOperator:
    """Base class: flat parameters + architecture descriptor."""

    kind: OperatorKind

    def __init__(self, params: np.ndarray, arch: Dict, normalize_input: bool = False):
        self.arch = dict(arch)
        self.normalize_input = bool(normalize_input)
        params = np.asarray(params, dtype=np.float64)
        expected = sum(int(np.prod(shape)) for _, shape in self.layout())
        if params.shape != (expected,):
            raise ValueError(f"{self.kind.value} operator expects {expected} parameters, got {params.shape}")
        self.params = params.copy()
        self._cache: Dict = {}

    # -- parameters -----------------------------------------------------------

    def layout(self) -> List[Tuple[str, Tuple[int, ...]]]:
        return []

    @property
    def n_params(self) -> int:
        return len(self.params)

    @property
    def train_grid(self) -> Grid1D:
        return Grid1D(int(self.arch.get("train_grid", TRAIN_GRID)))

    def param_blocks(self, params: Optional[np.ndarray] = None) -> List[np.ndarray]:
        flat = self.params if params is None else params
        blocks, offset = [], 0
        for _, shape in self.layout():
            size = int(np.prod(shape))
            blocks.append(flat[offset:offset + size].reshape(shape))
            offset += size
        return blocks

    def set_params(self, params: np.ndarray):
        params = np.asarray(params, dtype=np.float64)
        if params.shape != self.params.shape:
            raise ValueError(f"parameter shape {params.shape} != {self.params.shape}")
        self.params = params.copy()
        self._cache.clear()

    def copy(self) -> "CorrectionOperator":
        return type(self)(self.params, self.arch, self.normalize_input)

    def _coefficient_input(self, coefficient: Optional[FieldSample]) -> np.ndarray:
        train = self.train_grid
        if coefficient is None:
            k = np.zeros(train.n_interior)
        else:
            k = transfer_field(coefficient, train)
        return (k - float(self.arch.get("k_shift", 0.0))) / float(self.arch.get("k_scale", 1.0))

    # -- evaluation -----------------------------------------------------------

    def forward(self, blocks: Sequence, r, grid: Grid1D, coefficient: Optional[FieldSample]):
        """Correction for residual r on `grid`; blocks/r may be tape variables."""
        raise NotImplementedError

    def correct(self, r: np.ndarray, system: LinearSystem) -> np.ndarray:
        """Inference path: N_theta(r) on the system's grid."""
        return np.asarray(self.forward(self.param_blocks(), np.asarray(r, dtype=np.float64),
                                       system.grid, system.coefficient))

    def describe(self) -> Dict:
        return {
            "kind": self.kind.value,
            "arch": dict(self.arch),
            "n_params": self.n_params,
            "normalize_input": self.normalize_input,
        }


class ZeroCorrection(CorrectionOperator):
    """N_theta = 0: a DL-HIM cycle degenerates to the smoother alone."""

    kind = OperatorKind.ZERO

    def __init__(self, params: Optional[np.ndarray] = None, arch: Optional[Dict] = None,
                 normalize_input: bool = False):
        super().__init__(np.zeros(0) if params is None else params, arch or {}, normalize_input)

    def forward(self, blocks, r, grid, coefficient):
        return np.zeros(grid.n_interior)


# ============================================================================
# DEEPONET
# ============================================================================

def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / (fan_in + fan_out))


class DeepOnetOperator(CorrectionOperator):
    """Branch net on (restricted r, restricted k), trunk net on query coordinates."""

    kind = OperatorKind.DEEPONET

    DEFAULT_ARCH = {
        "train_grid": TRAIN_GRID,
        "branch": [2 * TRAIN_GRID, 64, 64, 64],
        "trunk": [1, 64, 64, 64],
        "k_shift": 0.0,
        "k_scale": 1.0,
    }

    def __init__(self, params: np.ndarray, arch: Dict, normalize_input: bool = True):
        branch, trunk = list(arch["branch"]), list(arch["trunk"])
        if branch[0] != 2 * int(arch["train_grid"]):
            raise ValueError(f"branch input width {branch[0]} must be 2 x train grid {arch['train_grid']}")
        if trunk[0] != 1 or branch[-1] != trunk[-1]:
            raise ValueError(f"branch/trunk latent widths differ: {branch[-1]} vs {trunk[-1]}")
        super().__init__(params, arch, normalize_input)

    @classmethod
    def create(cls, seed: int, normalize_input: bool = True, **overrides) -> "DeepOnetOperator":
        arch = {**cls.DEFAULT_ARCH, **overrides}
        if "train_grid" in overrides and "branch" not in overrides:
            arch["branch"] = [2 * int(arch["train_grid"])] + list(cls.DEFAULT_ARCH["branch"][1:])
        rng = np.random.default_rng(seed)
        parts = []
        for widths in (arch["branch"], arch["trunk"]):
            for fan_in, fan_out in zip(widths[:-1], widths[1:]):
                parts.append(_glorot(rng, fan_in, fan_out).ravel())
                parts.append(np.zeros(fan_out))
        parts.append(np.zeros(1))
        return cls(np.concatenate(parts), arch, normalize_input)

    def layout(self):
        shapes = []
        for net in ("branch", "trunk"):
            widths = self.arch[net]
            for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
                shapes.append((f"{net}.W{i}", (fan_in, fan_out)))
                shapes.append((f"{net}.b{i}", (fan_out,)))
        shapes.append(("bias", (1,)))
        return shapes

    def _split(self, blocks):
        nb = 2 * (len(self.arch["branch"]) - 1)
        nt = 2 * (len(self.arch["trunk"]) - 1)
        branch = list(zip(blocks[0:nb:2], blocks[1:nb:2]))
        trunk = list(zip(blocks[nb:nb + nt:2], blocks[nb + 1:nb + nt:2]))
        return branch, trunk, blocks[nb + nt]

    def trunk_features(self, trunk_blocks, coords: np.ndarray):
        t = coords[:, None]
        for W, b in trunk_blocks:
            t = T.tanh(T.affine(t, W, b))
        return t

    def _cached_trunk(self, trunk_blocks, coords: np.ndarray):
        if any(isinstance(W, T.Var) for W, _ in trunk_blocks):
            return self.trunk_features(trunk_blocks, coords)
        key = ("trunk", coords.tobytes())
        if key not in self._cache:
            self._cache[key] = self.trunk_features(trunk_blocks, coords)
        return self._cache[key]

    def forward(self, blocks, r, grid, coefficient, query: Union[Grid1D, np.ndarray, None] = None):
        coords = grid.nodes if query is None else (query.nodes if isinstance(query, Grid1D) else np.asarray(query, dtype=np.float64))
        if coords.size and (coords.min() < 0.0 or coords.max() > 1.0):
            raise ValueError("DeepONet query coordinates must lie in [0, 1]")

        branch_blocks, trunk_blocks, bias = self._split(blocks)
        train = self.train_grid

        scale = None
        if self.normalize_input:
            scale = T.abs_max(r)
            if float(T._val(scale)) == 0.0:
                return np.zeros(len(coords))
            r = T.div(r, scale)

        if grid.n_interior != train.n_interior:
            P = transfer_matrix(grid, train)
            r = T.matmul(P, r)

        h = T.concat([r, self._coefficient_input(coefficient)])
        for i, (W, b) in enumerate(branch_blocks):
            h = T.affine(h, W, b)
            if i < len(branch_blocks) - 1:
                h = T.tanh(h)

        out = T.add(T.matmul(self._cached_trunk(trunk_blocks, coords), h), bias)
        if scale is not None:
            out = T.mul(out, scale)
        return out


# ============================================================================
# SPECTRAL
# ============================================================================

class SpectralOperator(CorrectionOperator):
    """Sine-mode filter; multipliers from a two-layer net fed the restricted k.

    Multiplier j is (j pi)^-2 * (net output), so an O(1) output already means
    "invert a unit-coefficient Laplacian".
    """

    kind = OperatorKind.SPECTRAL

    DEFAULT_ARCH = {
        "train_grid": TRAIN_GRID,
        "hidden": 32,
        "n_modes": TRAIN_GRID,
        "k_shift": 0.0,
        "k_scale": 1.0,
    }

    def __init__(self, params: np.ndarray, arch: Dict, normalize_input: bool = False):
        super().__init__(params, arch, normalize_input)

    @classmethod
    def create(cls, seed: int, **overrides) -> "SpectralOperator":
        arch = {**cls.DEFAULT_ARCH, **overrides}
        n_in, hidden, modes = int(arch["train_grid"]), int(arch["hidden"]), int(arch["n_modes"])
        rng = np.random.default_rng(seed)
        out_bias = np.zeros(2 * modes)
        out_bias[:modes] = 1.0
        params = np.concatenate([
            _glorot(rng, n_in, hidden).ravel(),
            np.zeros(hidden),
            0.1 * _glorot(rng, hidden, 2 * modes).ravel(),
            out_bias,
        ])
        return cls(params, arch)

    @classmethod
    def with_multipliers(cls, multipliers: np.ndarray, **overrides) -> "SpectralOperator":
        """Operator whose multipliers are fixed to `multipliers` for every k."""
        multipliers = np.asarray(multipliers, dtype=np.complex128)
        arch = {**cls.DEFAULT_ARCH, "n_modes": len(multipliers), **overrides}
        n_in, hidden, modes = int(arch["train_grid"]), int(arch["hidden"]), len(multipliers)
        prior = cls.mode_prior(modes)
        params = np.concatenate([
            np.zeros(n_in * hidden),
            np.zeros(hidden),
            np.zeros(hidden * 2 * modes),
            multipliers.real / prior,
            multipliers.imag / prior,
        ])
        return cls(params, arch)

    @staticmethod
    def mode_prior(n_modes: int) -> np.ndarray:
        return 1.0 / (np.pi * np.arange(1, n_modes + 1)) ** 2

    def layout(self):
        n_in, hidden, modes = int(self.arch["train_grid"]), int(self.arch["hidden"]), int(self.arch["n_modes"])
        return [
            ("cond.W0", (n_in, hidden)),
            ("cond.b0", (hidden,)),
            ("cond.W1", (hidden, 2 * modes)),
            ("cond.b1", (2 * modes,)),
        ]

    def _multiplier_parts(self, blocks, coefficient, n: int):
        W0, b0, W1, b1 = blocks
        modes = int(self.arch["n_modes"])
        out = T.affine(T.tanh(T.affine(self._coefficient_input(coefficient), W0, b0)), W1, b1)
        used = min(modes, n)
        prior = self.mode_prior(modes)[:used]
        a = T.mul(T.take(out, 0, used), prior)
        b = T.mul(T.take(out, modes, modes + used), prior)
        return a, b

    def multipliers(self, coefficient: Optional[FieldSample], n: Optional[int] = None) -> np.ndarray:
        n = int(self.arch["n_modes"]) if n is None else n
        a, b = self._multiplier_parts(self.param_blocks(), coefficient, n)
        return np.asarray(a) + 1j * np.asarray(b)

    def forward(self, blocks, r, grid, coefficient):
        a, b = self._multiplier_parts(blocks, coefficient, grid.n_interior)
        return T.spectral_filter(r, a, b)


def exact_inverse_operator(grid: Grid1D) -> SpectralOperator:
    """Spectral oracle with multipliers 1 / lambda_j: the exact inverse of the k = 1 Laplacian."""
    return SpectralOperator.with_multipliers(1.0 / laplacian_eigenvalues(grid))


OPERATOR_TYPES = {
    OperatorKind.DEEPONET: DeepOnetOperator,
    OperatorKind.SPECTRAL: SpectralOperator,
    OperatorKind.ZERO: ZeroCorrection,
}


# ============================================================================
# PUBLIC EVALUATION
# ============================================================================

def deeponet_apply(op: DeepOnetOperator, r: np.ndarray, k: Optional[FieldSample],
                   query: Union[Grid1D, np.ndarray]) -> np.ndarray:
    if op.kind != OperatorKind.DEEPONET:
        raise ValueError(f"deeponet_apply needs a DeepONet operator, got {op.kind.value}")
    r = np.asarray(r, dtype=np.float64)
    return np.asarray(op.forward(op.param_blocks(), r, Grid1D(len(r)), k, query))


def spectral_apply(op: SpectralOperator, r: np.ndarray, k: Optional[FieldSample]) -> np.ndarray:
    if op.kind != OperatorKind.SPECTRAL:
        raise ValueError(f"spectral_apply needs a spectral operator, got {op.kind.value}")
    r = np.asarray(r, dtype=np.float64)
    return np.asarray(op.forward(op.param_blocks(), r, Grid1D(len(r)), k))


def apply_and_grad(op: CorrectionOperator, batch: Sequence, loss_spec,
                   reduction: str = "mean") -> TapeGradient:
    """Loss and exact reverse-mode gradient over a batch.

    `loss_spec.instance_loss(op, blocks, instance)` builds the per-instance loss
    on the tape (or returns None to skip a degenerate instance). Instances are
    processed in index order and their gradients summed in that order.
    """
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction '{reduction}'")

    total_loss = 0.0
    total_grad = np.zeros(op.n_params)
    tape_bytes = 0
    used = 0

    for index, instance in enumerate(batch):
        tape = T.Tape()
        leaves = [tape.leaf(b) for b in op.param_blocks()]
        loss = loss_spec.instance_loss(op, leaves, instance)
        if loss is None:
            continue

        value = float(T._val(loss))
        if not np.isfinite(value):
            raise NonFiniteError("non-finite loss", batch_index=index)
        if isinstance(loss, T.Var):
            grads = tape.gradients(loss, leaves)
            flat = np.concatenate([g.ravel() for g in grads]) if grads else np.zeros(0)
        else:
            flat = np.zeros(op.n_params)
        if not np.all(np.isfinite(flat)):
            raise NonFiniteError("non-finite gradient", batch_index=index)

        total_loss += value
        total_grad += flat
        tape_bytes += tape.nbytes
        used += 1

    if reduction == "mean" and used:
        total_loss /= used
        total_grad /= used
    return TapeGradient(total_loss, total_grad, tape_bytes, used)


# ============================================================================
# CHECKPOINTS
# ============================================================================

def checkpoint_save(op: CorrectionOperator, path: str):
    header = {
        "format_version": CHECKPOINT_VERSION,
        "kind": op.kind.value,
        "arch": op.arch,
        "normalize_input": op.normalize_input,
    }
    write_container(path, header, {"params": op.params})


def checkpoint_load(path: str) -> CorrectionOperator:
    try:
        header, payloads = read_container(path)
    except (OSError, ValueError) as e:
        raise CheckpointError(f"cannot load checkpoint: {e}")

    version = header.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version!r}, expected {CHECKPOINT_VERSION!r}")
    try:
        kind = OperatorKind(header["kind"])
        return OPERATOR_TYPES[kind](payloads["params"], header["arch"], header["normalize_input"])
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: inconsistent checkpoint ({e})")
