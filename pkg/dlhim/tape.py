"""
Tape - Minimal reverse-mode differentiation over a fixed op set

Ops: matmul/affine, tanh, add/sub/mul/div, constant linear maps with an
explicit adjoint, concatenation, slicing, abs-max, sum of squares, absolute
sum, and the real spectral filter used by the spectral correction operator.

Every op also accepts plain ndarrays and then just computes the value, so a
forward pass written once serves both inference and training.
"""

from typing import Callable, List, Optional, Sequence

import numpy as np


class Var:
    """A value recorded on a tape."""

    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: "Tape", index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return np.shape(self.value)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class Tape:
    """Append-only record of values, parent links and vector-Jacobian products."""

    def __init__(self):
        self._values: List[np.ndarray] = []
        self._parents: List[Sequence[int]] = []
        self._vjps: List[Optional[Callable]] = []
        self.nbytes = 0

    def __len__(self):
        return len(self._values)

    def leaf(self, value) -> Var:
        """Differentiable input; not counted in nbytes."""
        value = np.asarray(value, dtype=np.float64)
        return self._append(value, (), None)

    def record(self, value, parents: Sequence[Var], vjp: Callable) -> Var:
        value = np.asarray(value)
        self.nbytes += value.nbytes
        return self._append(value, tuple(p.index for p in parents), vjp)

    def _append(self, value, parents, vjp) -> Var:
        self._values.append(value)
        self._parents.append(parents)
        self._vjps.append(vjp)
        return Var(self, len(self._values) - 1, value)

    def gradients(self, output: Var, wrt: Sequence[Var]) -> List[np.ndarray]:
        """d output / d wrt for a scalar output; zeros where there is no path."""
        if np.size(output.value) != 1:
            raise ValueError("gradients() needs a scalar output")

        grads: List[Optional[np.ndarray]] = [None] * (output.index + 1)
        grads[output.index] = np.ones_like(output.value, dtype=np.float64)

        for i in range(output.index, -1, -1):
            g = grads[i]
            vjp = self._vjps[i]
            if g is None or vjp is None:
                continue
            for parent, pg in zip(self._parents[i], vjp(g)):
                if pg is None:
                    continue
                grads[parent] = pg if grads[parent] is None else grads[parent] + pg

        out = []
        for v in wrt:
            g = grads[v.index] if v.index < len(grads) else None
            out.append(np.zeros_like(v.value) if g is None else g)
        return out


def _tape_of(*args) -> Optional[Tape]:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _val(a):
    return a.value if isinstance(a, Var) else a


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(a, b, value, grad_a: Callable, grad_b: Callable):
    tape = _tape_of(a, b)
    if tape is None:
        return value
    parents, fns = [], []
    if isinstance(a, Var):
        parents.append(a)
        fns.append(lambda g: _unbroadcast(grad_a(g), np.shape(a.value)))
    if isinstance(b, Var):
        parents.append(b)
        fns.append(lambda g: _unbroadcast(grad_b(g), np.shape(b.value)))
    return tape.record(value, parents, lambda g: [fn(g) for fn in fns])


# ============================================================================
# ELEMENTWISE
# ============================================================================

def add(a, b):
    return _binary(a, b, _val(a) + _val(b), lambda g: g, lambda g: g)


def sub(a, b):
    return _binary(a, b, _val(a) - _val(b), lambda g: g, lambda g: -g)


def mul(a, b):
    av, bv = _val(a), _val(b)
    return _binary(a, b, av * bv, lambda g: g * bv, lambda g: g * av)


def div(a, b):
    av, bv = _val(a), _val(b)
    return _binary(a, b, av / bv, lambda g: g / bv, lambda g: -g * av / (bv * bv))


def tanh(x):
    y = np.tanh(_val(x))
    if not isinstance(x, Var):
        return y
    return x.tape.record(y, [x], lambda g: [g * (1.0 - y * y)])


# ============================================================================
# LINEAR ALGEBRA
# ============================================================================

def matmul(a, b):
    av, bv = _val(a), _val(b)
    value = av @ bv

    def grad_a(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv
        if av.ndim == 1:
            return bv @ g
        if bv.ndim == 1:
            return np.outer(g, bv)
        return g @ bv.T

    def grad_b(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * av
        if av.ndim == 1:
            return np.outer(av, g)
        return av.T @ g

    return _binary(a, b, value, grad_a, grad_b)


def affine(x, W, b):
    """x @ W + b, the dense-layer primitive."""
    return add(matmul(x, W), b)


def linear(x, forward: Callable, adjoint: Callable):
    """Constant linear map given by its action and the action of its transpose."""
    y = forward(_val(x))
    if not isinstance(x, Var):
        return y
    return x.tape.record(y, [x], lambda g: [adjoint(g)])


def concat(parts: Sequence):
    values = [np.atleast_1d(_val(p)) for p in parts]
    y = np.concatenate(values)
    tape = _tape_of(*parts)
    if tape is None:
        return y
    offsets = np.cumsum([0] + [len(v) for v in values])
    parents = [p for p in parts if isinstance(p, Var)]
    spans = [(offsets[i], offsets[i + 1]) for i, p in enumerate(parts) if isinstance(p, Var)]
    return tape.record(y, parents, lambda g: [g[lo:hi] for lo, hi in spans])


def take(x, start: int, stop: int):
    """x[start:stop] for 1-D x."""
    xv = _val(x)
    y = xv[start:stop].copy()
    if not isinstance(x, Var):
        return y

    def vjp(g):
        full = np.zeros_like(xv)
        full[start:stop] = g
        return [full]

    return x.tape.record(y, [x], vjp)


# ============================================================================
# REDUCTIONS
# ============================================================================

def sum_squares(x):
    xv = _val(x)
    y = np.asarray(float(xv @ xv))
    if not isinstance(x, Var):
        return y
    return x.tape.record(y, [x], lambda g: [2.0 * g * xv])


def abs_sum(x):
    xv = _val(x)
    y = np.asarray(float(np.abs(xv).sum()))
    if not isinstance(x, Var):
        return y
    return x.tape.record(y, [x], lambda g: [g * np.sign(xv)])


def abs_max(x):
    xv = _val(x)
    i = int(np.argmax(np.abs(xv)))
    y = np.asarray(float(abs(xv[i])))
    if not isinstance(x, Var):
        return y

    def vjp(g):
        out = np.zeros_like(xv)
        out[i] = g * np.sign(xv[i])
        return [out]

    return x.tape.record(y, [x], vjp)


# ============================================================================
# SPECTRAL FILTER
# ============================================================================

def _odd_extension(r: np.ndarray) -> np.ndarray:
    n = len(r)
    ext = np.zeros(2 * (n + 1))
    ext[1:n + 1] = r
    ext[n + 2:] = -r[::-1]
    return ext


def _sine_synthesis(w: np.ndarray, n: int) -> np.ndarray:
    """sum_j w_j sin(pi j t / (n+1)) for t = 1..n, modes j = 1..len(w)."""
    W = np.zeros(n + 2, dtype=np.complex128)
    W[1:len(w) + 1] = -1j * w
    return (n + 1) * np.fft.irfft(W, 2 * (n + 1))[1:n + 1]


def spectral_filter(r, a, b):
    """Multiply Dirichlet sine mode j of r by the complex multiplier a_j + i b_j.

    r is odd-extended to length 2(n+1) and real-transformed; the transform of
    the extension is -i D with D_j = 2 sum_t r_t sin(pi j t / (n+1)). Modes
    beyond len(a) are dropped. The result is linear in r and bilinear in
    (r, multipliers).
    """
    rv, av, bv = _val(r), np.asarray(_val(a)), np.asarray(_val(b))
    n = len(rv)
    m = len(av)
    if m > n or len(bv) != m:
        raise ValueError(f"multiplier length {m}/{len(bv)} incompatible with {n} nodes")

    D = -np.fft.rfft(_odd_extension(rv)).imag[1:m + 1]
    Y = np.zeros(n + 2, dtype=np.complex128)
    Y[1:m + 1] = D * (bv - 1j * av)
    y = np.fft.irfft(Y, 2 * (n + 1))[1:n + 1]

    tape = _tape_of(r, a, b)
    if tape is None:
        return y

    def vjp(g):
        padded = np.zeros(2 * (n + 1))
        padded[1:n + 1] = g
        Z = np.fft.rfft(padded)[1:m + 1]
        Sg, Cg = -Z.imag, Z.real
        grads = []
        if isinstance(r, Var):
            grads.append(2.0 / (n + 1) * _sine_synthesis(av * Sg + bv * Cg, n))
        if isinstance(a, Var):
            grads.append(D * Sg / (n + 1))
        if isinstance(b, Var):
            grads.append(D * Cg / (n + 1))
        return grads

    parents = [p for p in (r, a, b) if isinstance(p, Var)]
    return tape.record(y, parents, vjp)
