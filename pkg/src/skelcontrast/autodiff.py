"""Reverse-mode autodiff over dense float64 arrays.

Values are numpy arrays wrapped in :class:`Tensor`; every differentiable
primitive records a backward closure on the active :class:`Tape`. Replaying
the tape in reverse order of forward execution accumulates vector-Jacobian
products into each tensor's ``grad``. All higher-level math in this package
(graph convolution, contrastive losses, ...) is composed from the primitives
here, so it inherits gradients that the finite-difference checker can verify.

Primitive set: matmul, elementwise add/mul, relu, softmax, log, exp,
sum/mean reductions, 1-D temporal convolution, L2 normalization, and the
structural ops gather/reshape/concat (index/layout only, trivial Jacobians).

Every op checks its output for NaN/Inf and raises NonFiniteError, so a
finite loss implies finite intermediates. Tapes are single-threaded: one
active tape per thread, no sharing.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadConfigError,
    NonFiniteError,
    ShapeMismatchError,
    ZeroVectorError,
)

_state = threading.local()


def _active_tape():
    return getattr(_state, "tape", None)


class Tape:
    """Ordered record of primitive ops for one forward pass."""

    def __init__(self):
        self._backward_fns = []

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("a tape is already active in this thread")
        _state.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.tape = None
        return False

    def record(self, backward_fn):
        self._backward_fns.append(backward_fn)

    def run_backward(self, loss: "Tensor"):
        """Seed d(loss)/d(loss)=1 and replay ops in exact reverse order."""
        if loss.data.size != 1:
            raise ShapeMismatchError(
                f"backward needs a scalar loss, got shape {loss.data.shape}"
            )
        loss.grad = np.ones_like(loss.data)
        for fn in reversed(self._backward_fns):
            fn()


class Tensor:
    """A dense float64 array plus its accumulated gradient."""

    __slots__ = ("data", "grad", "requires")

    def __init__(self, data, requires: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires = requires

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires={self.requires})"

    # operator sugar; everything routes through the primitives below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("divide by a python scalar; tensor/tensor is not a primitive")
        return mul(self, 1.0 / float(scalar))

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    """Lift an array or scalar to a constant (non-differentiable) Tensor."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires=False)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires=True)


def _check_finite(data, op_name):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op_name} produced a non-finite value")


def _accumulate(t: Tensor, g: np.ndarray):
    # never mutate grads in place, so sharing array objects is safe
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum grad over axes that were broadcast to reach grad.shape."""
    if grad.shape == tuple(shape):
        return grad
    # leading axes added by broadcasting
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    # axes of size 1 stretched by broadcasting
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _make_op(out_data, inputs, backward, op_name):
    """Wrap a computed value; register backward on the active tape if needed."""
    _check_finite(out_data, op_name)
    requires = any(t.requires for t in inputs)
    out = Tensor(out_data, requires=requires)
    tape = _active_tape()
    if requires and tape is not None:
        def _backward():
            if out.grad is not None:
                backward(out.grad)
        tape.record(_backward)
    return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_data = a.data + b.data
    except ValueError as e:
        raise ShapeMismatchError(f"add: {a.shape} vs {b.shape}") from e

    def backward(g):
        if a.requires:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make_op(out_data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_data = a.data * b.data
    except ValueError as e:
        raise ShapeMismatchError(f"mul: {a.shape} vs {b.shape}") from e

    def backward(g):
        if a.requires:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make_op(out_data, (a, b), backward, "mul")


def matmul(a, b) -> Tensor:
    """Matrix product with numpy's stacked-matrix broadcasting.

    1-D operands follow numpy semantics (vector is promoted on the missing
    side and the result axis is squeezed away).
    """
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_data = a.data @ b.data
    except ValueError as e:
        raise ShapeMismatchError(f"matmul: {a.shape} vs {b.shape}") from e

    a2 = a.data[None, :] if a.data.ndim == 1 else a.data
    b2 = b.data[:, None] if b.data.ndim == 1 else b.data

    def backward(g):
        g2 = g
        if a.data.ndim == 1:
            g2 = np.expand_dims(g2, axis=-2)
        if b.data.ndim == 1:
            g2 = np.expand_dims(g2, axis=-1)
        if a.requires:
            ga = g2 @ np.swapaxes(b2, -1, -2)
            ga = _unbroadcast(ga, a2.shape)
            _accumulate(a, ga[0] if a.data.ndim == 1 else ga)
        if b.requires:
            gb = np.swapaxes(a2, -1, -2) @ g2
            gb = _unbroadcast(gb, b2.shape)
            _accumulate(b, gb[..., 0] if b.data.ndim == 1 else gb)

    return _make_op(out_data, (a, b), backward, "matmul")


def relu(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.maximum(x.data, 0.0)

    def backward(g):
        if x.requires:
            _accumulate(x, g * (x.data > 0.0))

    return _make_op(out_data, (x,), backward, "relu")


def softmax(x, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along one axis."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)
    s = out_data

    def backward(g):
        if x.requires:
            # ds_i/dx_j = s_i (delta_ij - s_j)  ->  gx = s * (g - <g, s>)
            inner = (g * s).sum(axis=axis, keepdims=True)
            _accumulate(x, s * (g - inner))

    return _make_op(out_data, (x,), backward, "softmax")


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(x.data)

    def backward(g):
        if x.requires:
            _accumulate(x, g / x.data)

    return _make_op(out_data, (x,), backward, "log")


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out_data = np.exp(x.data)

    def backward(g):
        if x.requires:
            _accumulate(x, g * out_data)

    return _make_op(out_data, (x,), backward, "exp")


def tensor_sum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out_data = x.data.sum(axis=axis)

    def backward(g):
        if x.requires:
            if axis is None:
                _accumulate(x, np.broadcast_to(g, x.data.shape).copy())
            else:
                _accumulate(x, np.broadcast_to(
                    np.expand_dims(g, axis=axis), x.data.shape).copy())

    return _make_op(out_data, (x,), backward, "sum")


def tensor_mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out_data = x.data.mean(axis=axis)
    count = x.data.size if axis is None else (
        x.data.size // max(out_data.size, 1))

    def backward(g):
        if x.requires:
            if axis is None:
                _accumulate(x, np.broadcast_to(g / count, x.data.shape).copy())
            else:
                _accumulate(x, np.broadcast_to(
                    np.expand_dims(g, axis=axis) / count, x.data.shape).copy())

    return _make_op(out_data, (x,), backward, "mean")


def temporal_conv1d(x, w) -> Tensor:
    """1-D convolution over the time axis, per joint, mixing channels.

    x: (T, N, C_in), w: (C_out, C_in, k) with k odd; stride 1, zero padding
    (k-1)/2 per side, so the output is (T, N, C_out).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ShapeMismatchError(
            f"temporal_conv1d: need (T,N,C) and (Co,Ci,k), got {x.shape}, {w.shape}")
    t_len, n_joints, c_in = x.data.shape
    c_out, c_in_w, k = w.data.shape
    if c_in_w != c_in:
        raise ShapeMismatchError(
            f"temporal_conv1d: channel mismatch {c_in} vs {c_in_w}")
    if k % 2 != 1:
        raise BadConfigError(f"temporal kernel must be odd, got {k}")
    pad = (k - 1) // 2

    xp = np.zeros((t_len + 2 * pad, n_joints, c_in))
    xp[pad:pad + t_len] = x.data
    out_data = np.zeros((t_len, n_joints, c_out))
    for d in range(k):
        # out[t] += x[t + d - pad] @ w[:, :, d]^T
        out_data += xp[d:d + t_len] @ w.data[:, :, d].T

    def backward(g):
        if x.requires:
            gxp = np.zeros_like(xp)
            for d in range(k):
                gxp[d:d + t_len] += g @ w.data[:, :, d]
            _accumulate(x, gxp[pad:pad + t_len])
        if w.requires:
            gw = np.empty_like(w.data)
            for d in range(k):
                gw[:, :, d] = np.einsum("tno,tni->oi", g, xp[d:d + t_len])
            _accumulate(w, gw)

    return _make_op(out_data, (x, w), backward, "temporal_conv1d")


def l2_normalize(x) -> Tensor:
    """x / ||x||_2 over all elements. Raises ZeroVectorError below 1e-12."""
    x = as_tensor(x)
    norm = float(np.sqrt((x.data ** 2).sum()))
    if norm < 1e-12:
        raise ZeroVectorError("cannot normalize a (near-)zero vector")
    out_data = x.data / norm
    y = out_data

    def backward(g):
        if x.requires:
            # d(x/||x||)/dx = (I - y y^T) / ||x||
            _accumulate(x, (g - y * (y * g).sum()) / norm)

    return _make_op(out_data, (x,), backward, "l2_normalize")


def gather(x, indices, axis: int = 0) -> Tensor:
    """Take rows along an axis. Indices are treated as at least 1-D, so the
    gathered axis is always kept (reduce afterwards if a scalar is wanted)."""
    x = as_tensor(x)
    idx = np.atleast_1d(np.asarray(indices, dtype=np.intp))
    try:
        out_data = np.take(x.data, idx, axis=axis)
    except IndexError as e:
        raise ShapeMismatchError(f"gather: bad index for shape {x.shape}") from e

    def backward(g):
        if x.requires:
            gx = np.zeros_like(x.data)
            np.add.at(np.moveaxis(gx, axis, 0), idx, np.moveaxis(g, axis, 0))
            _accumulate(x, gx)

    return _make_op(out_data, (x,), backward, "gather")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out_data = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeMismatchError(f"reshape: {x.shape} -> {shape}") from e

    def backward(g):
        if x.requires:
            _accumulate(x, g.reshape(x.data.shape))

    return _make_op(out_data, (x,), backward, "reshape")


def transpose2d(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeMismatchError(f"transpose2d: need a 2-D array, got {x.shape}")
    out_data = x.data.T.copy()

    def backward(g):
        if x.requires:
            _accumulate(x, g.T.copy())

    return _make_op(out_data, (x,), backward, "transpose2d")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out_data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeMismatchError("concat: incompatible shapes") from e
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(sl)])

    return _make_op(out_data, tuple(tensors), backward, "concat")


# ---------------------------------------------------------------------------
# driver + gradient checking
# ---------------------------------------------------------------------------

def forward_backward(graph_fn, params: dict) -> tuple[float, dict]:
    """Run graph_fn over named parameter arrays; return (loss, grads).

    graph_fn receives a dict of parameter Tensors and must return a scalar
    Tensor built from the primitives above. Parameters that do not reach the
    loss get zero gradients of the matching shape.
    """
    with Tape() as tape:
        tensors = {name: parameter(arr) for name, arr in params.items()}
        loss = graph_fn(tensors)
        _check_finite(loss.data, "loss")
        tape.run_backward(loss)
    grads = {}
    for name, t in tensors.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        _check_finite(g, f"grad[{name}]")
        grads[name] = np.asarray(g)
    return float(loss.data), grads


def evaluate_loss(graph_fn, params: dict) -> float:
    """Forward-only evaluation on constant tensors (nothing recorded)."""
    tensors = {name: as_tensor(np.asarray(arr, dtype=np.float64))
               for name, arr in params.items()}
    return float(graph_fn(tensors).data)


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    entries: list
    epsilon: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def __str__(self):
        lines = [
            f"{e.name}: max_rel_err={e.max_rel_error:.3e} "
            f"{'pass' if e.passed else 'FAIL'}"
            for e in self.entries
        ]
        lines.append(f"overall: {'pass' if self.passed else 'FAIL'} "
                     f"(eps={self.epsilon:g}, tol={self.tolerance:g})")
        return "\n".join(lines)


def _relative_error(analytic: float, fd: float, abs_floor: float) -> float:
    diff = abs(analytic - fd)
    if diff <= abs_floor:
        # below the central-difference noise floor; treat as agreement
        return 0.0
    return diff / max(abs(fd), abs_floor)


def check_gradients(graph_fn, params: dict, epsilon: float = 1e-5,
                    tolerance: float = 1e-4,
                    abs_floor: float = 1e-9) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    For every scalar entry of every parameter, relative error is
    |analytic - fd| / max(|fd|, floor); differences below ``abs_floor``
    (the fd noise floor, ~eps_machine * |loss| / epsilon) count as exact.
    """
    if epsilon <= 0:
        raise BadConfigError("epsilon must be positive")
    if tolerance <= 0:
        raise BadConfigError("tolerance must be positive")

    _, grads = forward_backward(graph_fn, params)
    work = {name: np.array(arr, dtype=np.float64) for name, arr in params.items()}

    entries = []
    for name, arr in work.items():
        flat = arr.reshape(-1)
        analytic = grads[name].reshape(-1)
        max_rel = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            loss_plus = evaluate_loss(graph_fn, work)
            flat[i] = orig - epsilon
            loss_minus = evaluate_loss(graph_fn, work)
            flat[i] = orig
            fd = (loss_plus - loss_minus) / (2.0 * epsilon)
            rel = _relative_error(analytic[i], fd, abs_floor)
            if rel > max_rel:
                max_rel = rel
        entries.append(GradCheckEntry(name, max_rel, max_rel < tolerance))
    return GradCheckReport(entries, epsilon, tolerance)
