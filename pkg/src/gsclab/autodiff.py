"""Dense tensors with reverse-mode differentiation on top of numpy.

Every differentiable op records a node on its output.  ``backward`` collects
the nodes reachable from a scalar loss into a :class:`Tape`, ordered by
execution sequence, and replays it in reverse, visiting each node once.

Graphs are built per thread.  To evaluate batch shards on worker threads,
have each worker call :func:`grad` (which never touches ``Tensor.grad``) and
combine the results with :func:`reduce_gradients`.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_EPS = 1e-7

_state = threading.local()
_sequence = itertools.count()
_default_dtype = np.float64


class ContractViolation(ValueError):
    """Raised when an operation receives arguments outside its contract."""


@contextlib.contextmanager
def branch_trace():
    """Collect the branch pattern of every non-smooth op evaluated inside.

    Yields a list that fills with one bytes object per relu or clamped log
    call.  Two evaluations with equal lists took the same smooth piece of
    the function, which is what a finite-difference check needs to know.
    """
    prev = getattr(_state, "branches", None)
    _state.branches = []
    try:
        yield _state.branches
    finally:
        _state.branches = prev


def _record_branch(mask: np.ndarray) -> None:
    branches = getattr(_state, "branches", None)
    if branches is not None:
        branches.append(np.packbits(mask).tobytes())


def set_default_dtype(dtype) -> None:
    """Select the dtype used for non-float inputs (float64 or float32)."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractViolation(f"unsupported dtype {dtype}")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them; used for the frozen old model."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class _Node:
    __slots__ = ("seq", "inputs", "backward_fn", "name")

    def __init__(self, inputs, backward_fn, name):
        self.seq = next(_sequence)
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.name = name


class Tensor:
    """N-dimensional array that can take part in differentiation.

    Leaves created with ``requires_grad=True`` carry a zero-initialised
    ``grad`` buffer of the same shape; results of ops do not retain grads.
    """

    __array_priority__ = 100
    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if not np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype(_default_dtype)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple, backward_fn: Callable, name: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{name} produced non-finite values")
    out = Tensor(data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(inputs, backward_fn, name)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ContractViolation(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# --------------------------------------------------------------------- tape


class Tape:
    """Executed nodes reachable from an output, in execution order."""

    def __init__(self, records: list[Tensor]):
        self.records = records

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen: set[int] = set()
        found: list[Tensor] = []
        stack = [out]
        while stack:
            t = stack.pop()
            if t._node is None or id(t) in seen:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(t._node.inputs)
        found.sort(key=lambda t: t._node.seq)
        return cls(found)

    def __len__(self) -> int:
        return len(self.records)

    def names(self) -> list[str]:
        return [t._node.name for t in self.records]

    def replay(self, out: Tensor, seed: np.ndarray) -> dict[int, tuple[Tensor, np.ndarray]]:
        """Propagate ``seed`` back from ``out``; returns leaf gradients keyed by id."""
        pending: dict[int, np.ndarray] = {id(out): seed}
        leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
        for t in reversed(self.records):
            g = pending.pop(id(t), None)
            if g is None:
                continue
            node = t._node
            for inp, gi in zip(node.inputs, node.backward_fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if inp._node is None:
                    if key in leaves:
                        leaves[key] = (inp, leaves[key][1] + gi)
                    else:
                        leaves[key] = (inp, gi)
                elif key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi
        return leaves


def _seed_for(loss: Tensor) -> np.ndarray:
    if loss.size != 1:
        raise ContractViolation(f"backward needs a single-element loss, got shape {loss.shape}")
    return np.ones_like(loss.data)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every requiring leaf."""
    seed = _seed_for(loss)
    if loss._node is None:
        if not loss.requires_grad:
            raise ContractViolation("loss was not produced by any recorded operation")
        loss.grad = loss.grad + seed
        return
    for leaf, g in Tape.from_output(loss).replay(loss, seed).values():
        leaf.grad = leaf.grad + g.reshape(leaf.shape)


def grad(loss: Tensor, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``inputs`` without touching ``.grad``."""
    seed = _seed_for(loss)
    if loss._node is None:
        return [seed.reshape(()) * np.ones_like(t.data) if t is loss else np.zeros_like(t.data)
                for t in inputs]
    leaves = Tape.from_output(loss).replay(loss, seed)
    return [leaves[id(t)][1].reshape(t.shape) if id(t) in leaves else np.zeros_like(t.data)
            for t in inputs]


def reduce_gradients(per_worker: Iterable[Sequence[np.ndarray]]) -> list[np.ndarray]:
    """Sum per-worker gradient lists.

    Shards are summed in a canonical order (sorted by their bytes) so the
    result does not depend on the order workers finished in.
    """
    per_worker = [list(g) for g in per_worker]
    if not per_worker:
        raise ContractViolation("no gradients to reduce")
    out = []
    for parts in zip(*per_worker):
        ordered = sorted(parts, key=lambda a: a.tobytes())
        out.append(np.sum(np.stack(ordered), axis=0))
    return out


# ------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), bw, "mul")


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)
    return _result(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    _record_branch(mask)
    return _result(np.where(mask, a.data, 0).astype(a.dtype, copy=False), (a,),
                   lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a, lo: float = LOG_EPS, hi: float | None = None) -> Tensor:
    """Natural log of ``a`` clamped to ``[lo, hi]``; no gradient where clamped."""
    a = as_tensor(a)
    clipped = np.clip(a.data, lo, hi)
    inside = clipped == a.data
    _record_branch(inside)

    def bw(g):
        return (np.where(inside, g / clipped, 0).astype(g.dtype, copy=False),)

    return _result(np.log(clipped), (a,), bw, "log")


def sqrt(a) -> Tensor:
    """Square root of a non-negative tensor with a zero subgradient at 0."""
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise ContractViolation("sqrt of a negative value")
    out = np.sqrt(a.data)
    _record_branch(out > 0)

    def bw(g):
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, g / (2 * safe), 0).astype(g.dtype, copy=False),)

    return _result(out, (a,), bw, "sqrt")


def softmax(a, axis: int = 1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), bw, "softmax")


# ---------------------------------------------------------------- shaping


def _axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _axes(axis, a.ndim)
    if any(a.shape[ax] == 0 for ax in axes):
        raise ContractViolation("reduction over an empty axis")
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), bw, "sum")


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _axes(axis, a.ndim)
    if any(a.shape[ax] == 0 for ax in axes):
        raise ContractViolation("reduction over an empty axis")
    count = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result(np.asarray(out), (a,), bw, "mean")


def pool_avg(a, axis) -> Tensor:
    """Average-pool away ``axis`` (one axis or a tuple)."""
    return reduce_mean(a, axis=axis)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ContractViolation(str(exc)) from exc
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out), (a,), bw, "getitem")


# ------------------------------------------------------------ convolution


def _im2col(xp: np.ndarray, k: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, ho, wo, c, k, k), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[..., i, j] = xp[:, :, i:i + ho, j:j + wo].transpose(0, 2, 3, 1)
    return cols.reshape(n * ho * wo, c * k * k)


def conv2d(x, kernel, bias, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation of ``x`` [N,Cin,H,W] with ``kernel`` [Cout,Cin,k,k]."""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ContractViolation("conv2d expects 4-d input and kernel")
    n, cin, h, w = x.shape
    cout, kcin, k, k2 = kernel.shape
    if kcin != cin or k != k2 or k % 2 == 0:
        raise ContractViolation(f"conv2d: kernel {kernel.shape} incompatible with input {x.shape}")
    if bias.shape != (cout,):
        raise ContractViolation(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if padding < 0:
        raise ContractViolation("negative padding")
    ho, wo = h + 2 * padding - k + 1, w + 2 * padding - k + 1
    if ho <= 0 or wo <= 0:
        raise ContractViolation("conv2d: kernel larger than padded input")
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, k, ho, wo)
    wmat = kernel.data.reshape(cout, -1)
    out = (cols @ wmat.T + bias.data).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, cin, k, k)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + ho, j:j + wo] += dcols[..., i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, p:p + h, p:p + w] if p else dxp
        return gx, gk, gb

    return _result(np.ascontiguousarray(out), (x, kernel, bias), bw, "conv2d")
