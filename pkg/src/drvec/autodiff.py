"""Reverse-mode automatic differentiation over dense numpy tensors.

A define-by-run tape: operations executed while a :class:`Tape` is active
record one node each (output, parents, backward rule), in execution order.
``backward`` replays the tape once, in reverse, so parent gradients are
fully accumulated before their producing node is visited.

Tensors are immutable after construction except for gradient accumulation
(and parameter updates performed by the single-threaded trainer). Tapes
are thread-confined; distinct tapes may run on distinct threads.

Training runs in float32; gradient checks and oracle tests use float64.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense n-dimensional array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if any(n < 1 for n in arr.shape):
            raise DimensionError(f"tensor dimensions must be >= 1, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the stored values."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # Operator sugar; the module-level functions do the real work.
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out: Tensor, parents: tuple, backward_fn: Callable):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations; recording order is topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def record(self, out: Tensor, parents: tuple, backward_fn: Callable) -> None:
        self.nodes.append(_Node(out, parents, backward_fn))

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self, "tapes must be exited in LIFO order"

    def __len__(self) -> int:
        return len(self.nodes)


_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def _active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None and np.isscalar(x) else None
    return Tensor(np.asarray(x, dtype=dtype))


def _wrap(data: np.ndarray, requires_grad: bool) -> Tensor:
    """Fast construction for op outputs (already-validated float arrays)."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = requires_grad
    out.grad = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcasting introduced."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _record(out: Tensor, parents: tuple, backward_fn: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, parents, backward_fn)
    return out


def _needs(parents: Iterable[Tensor]) -> bool:
    return any(p.requires_grad for p in parents)


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    out = _wrap(a.data + b.data, _needs((a, b)))

    def backward_fn(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _record(out, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    out = _wrap(a.data - b.data, _needs((a, b)))

    def backward_fn(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _record(out, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    out = _wrap(a.data * b.data, _needs((a, b)))
    ad, bd = a.data, b.data

    def backward_fn(g):
        return (_unbroadcast(g * bd, a.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, b.shape) if b.requires_grad else None)

    return _record(out, (a, b), backward_fn)


def div(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    out = _wrap(a.data / b.data, _needs((a, b)))
    ad, bd = a.data, b.data

    def backward_fn(g):
        return (_unbroadcast(g / bd, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * ad / (bd * bd), b.shape) if b.requires_grad else None)

    return _record(out, (a, b), backward_fn)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = _wrap(-a.data, a.requires_grad)

    def backward_fn(g):
        return (-g,)

    return _record(out, (a,), backward_fn)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    out = _wrap(a.data @ b.data, _needs((a, b)))
    ad, bd = a.data, b.data

    def backward_fn(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _record(out, (a, b), backward_fn)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a 2-d tensor, got shape {a.shape}")
    out = _wrap(np.ascontiguousarray(a.data.T), a.requires_grad)

    def backward_fn(g):
        return (g.T,)

    return _record(out, (a,), backward_fn)


# ---------------------------------------------------------------------------
# nonlinearities

def _tanh_grad(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return 1.0 - y * y


def _sigmoid_grad(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return y * (1.0 - y)


def _softplus_grad(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return _sigmoid_fwd(x)


# Looked up at backward time (not captured) so test fixtures can inject a
# wrong derivative and watch the gradient checker catch it.
_ACTIVATION_GRADS = {
    "tanh": _tanh_grad,
    "sigmoid": _sigmoid_grad,
    "softplus": _softplus_grad,
}


def _sigmoid_fwd(x: np.ndarray) -> np.ndarray:
    # overflow-free: sigma(x) = (1 + tanh(x/2)) / 2
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def activation(x, kind: str, alpha: float = 0.2) -> Tensor:
    """Elementwise nonlinearity: one of ``tanh``, ``sigmoid``, ``leaky_relu``.

    ``alpha`` applies to leaky_relu only; the derivative at exactly 0 is
    defined as ``alpha`` (measure-zero point, consistent subgradient).
    """
    x = _as_tensor(x)
    xd = x.data
    if kind == "tanh":
        yd = np.tanh(xd)
    elif kind == "sigmoid":
        yd = _sigmoid_fwd(xd)
    elif kind == "softplus":
        yd = np.logaddexp(0.0, xd)
    elif kind == "leaky_relu":
        yd = np.where(xd > 0, xd, alpha * xd)
    else:
        raise ContractError(f"unknown activation kind: {kind!r}")
    out = _wrap(yd, x.requires_grad)

    if kind == "leaky_relu":
        def backward_fn(g):
            return (g * np.where(xd > 0, np.asarray(1.0, dtype=xd.dtype), np.asarray(alpha, dtype=xd.dtype)),)
    else:
        def backward_fn(g):
            return (g * _ACTIVATION_GRADS[kind](xd, out.data),)

    return _record(out, (x,), backward_fn)


def tanh(x) -> Tensor:
    return activation(x, "tanh")


def sigmoid(x) -> Tensor:
    return activation(x, "sigmoid")


def leaky_relu(x, alpha: float = 0.2) -> Tensor:
    return activation(x, "leaky_relu", alpha)


def softplus(x) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    return activation(x, "softplus")


def cast(x, dtype) -> Tensor:
    """Dtype conversion; backward converts gradients back. Lets float32
    graphs run their loss reductions in float64."""
    x = _as_tensor(x)
    dt = np.dtype(dtype)
    if x.dtype == dt:
        return x
    out = _wrap(x.data.astype(dt), x.requires_grad)
    src_dt = x.data.dtype

    def backward_fn(g):
        return (g.astype(src_dt),)

    return _record(out, (x,), backward_fn)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = _wrap(np.exp(x.data), x.requires_grad)

    def backward_fn(g):
        return (g * out.data,)

    return _record(out, (x,), backward_fn)


def log(x) -> Tensor:
    x = _as_tensor(x)
    out = _wrap(np.log(x.data), x.requires_grad)
    xd = x.data

    def backward_fn(g):
        return (g / xd,)

    return _record(out, (x,), backward_fn)


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    out = _wrap(np.sqrt(x.data), x.requires_grad)

    def backward_fn(g):
        return (g * (0.5 / out.data),)

    return _record(out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# shape manipulation

def concat(xs: Sequence, axis: int = 0) -> Tensor:
    """Concatenate tensors along ``axis``; backward splits the gradient."""
    xs = [_as_tensor(x) for x in xs]
    if not xs:
        raise DimensionError("concat of an empty tensor list")
    nd = xs[0].ndim
    if axis < -nd or axis >= nd:
        raise DimensionError(f"concat axis {axis} out of range for {nd}-d tensors")
    axis = axis % nd
    ref = list(xs[0].shape)
    for x in xs[1:]:
        got = list(x.shape)
        if len(got) != nd or any(g != r for i, (g, r) in enumerate(zip(got, ref)) if i != axis):
            raise DimensionError(f"concat shape mismatch off axis {axis}: {xs[0].shape} vs {x.shape}")
    out = _wrap(np.concatenate([x.data for x in xs], axis=axis), _needs(xs))
    sizes = [x.shape[axis] for x in xs]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        grads = []
        for i, x in enumerate(xs):
            if x.requires_grad:
                sl = [slice(None)] * nd
                sl[axis] = slice(offsets[i], offsets[i + 1])
                grads.append(np.ascontiguousarray(g[tuple(sl)]))
            else:
                grads.append(None)
        return tuple(grads)

    return _record(out, tuple(xs), backward_fn)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(n) for n in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise DimensionError(f"cannot reshape {x.shape} ({x.size} elems) to {shape}")
    out = _wrap(x.data.reshape(shape), x.requires_grad)
    orig = x.shape

    def backward_fn(g):
        return (g.reshape(orig),)

    return _record(out, (x,), backward_fn)


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries starting at ``start`` along ``axis``."""
    x = _as_tensor(x)
    if axis < 0 or axis >= x.ndim:
        raise DimensionError(f"narrow axis {axis} out of range for shape {x.shape}")
    if start < 0 or length < 1 or start + length > x.shape[axis]:
        raise DimensionError(f"narrow [{start}:{start + length}) exceeds axis {axis} of shape {x.shape}")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    key = tuple(sl)
    out = _wrap(np.ascontiguousarray(x.data[key]), x.requires_grad)
    orig_shape = x.shape
    dt = x.dtype

    def backward_fn(g):
        gx = np.zeros(orig_shape, dtype=dt)
        gx[key] = g
        return (gx,)

    return _record(out, (x,), backward_fn)


def gather_rows(x, indices) -> Tensor:
    """Select rows ``x[indices]`` along axis 0; backward scatter-adds."""
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise DimensionError("gather_rows expects a non-empty 1-d index array")
    if idx.min() < 0 or idx.max() >= x.shape[0]:
        raise DimensionError(f"gather_rows index out of range for axis 0 of shape {x.shape}")
    out = _wrap(x.data[idx], x.requires_grad)
    orig_shape = x.shape
    dt = x.dtype

    def backward_fn(g):
        gx = np.zeros(orig_shape, dtype=dt)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record(out, (x,), backward_fn)


def diag_part(x) -> Tensor:
    """Main diagonal of a square matrix as a 1-d tensor."""
    x = _as_tensor(x)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise DimensionError(f"diag_part expects a square matrix, got shape {x.shape}")
    n = x.shape[0]
    out = _wrap(np.ascontiguousarray(np.diagonal(x.data)), x.requires_grad)
    dt = x.dtype

    def backward_fn(g):
        gx = np.zeros((n, n), dtype=dt)
        np.fill_diagonal(gx, g)
        return (gx,)

    return _record(out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# reductions

def reduce(x, kind: str, axis: Optional[int] = None) -> Tensor:
    """Sum or mean over one axis, or over all elements when ``axis`` is None.

    Single-axis reductions keep that axis with size 1 so results broadcast
    cleanly against the input; full reductions produce a scalar.
    """
    x = _as_tensor(x)
    if kind not in ("sum", "mean"):
        raise ContractError(f"unknown reduction kind: {kind!r}")
    if axis is not None and (axis < 0 or axis >= x.ndim):
        raise DimensionError(f"reduce axis {axis} out of range for shape {x.shape}")
    if axis is None:
        n = x.size
        yd = x.data.sum()
    else:
        n = x.shape[axis]
        yd = x.data.sum(axis=axis, keepdims=True)
    if kind == "mean":
        yd = yd / n
    out = _wrap(yd, x.requires_grad)
    orig_shape = x.shape
    scale = 1.0 / n if kind == "mean" else 1.0
    dt = x.dtype

    def backward_fn(g):
        return (np.broadcast_to(np.asarray(g * scale, dtype=dt), orig_shape).copy(),)

    return _record(out, (x,), backward_fn)


def sum_all(x) -> Tensor:
    return reduce(x, "sum")


def mean_all(x) -> Tensor:
    return reduce(x, "mean")


# ---------------------------------------------------------------------------
# backward pass and gradient checking

def backward(tape: Tape, root: Tensor) -> None:
    """Populate ``grad`` on every tensor reachable from ``root``.

    Visits the tape in reverse recording order exactly once; gradients
    accumulate additively, so a tensor used twice receives the sum of its
    per-use gradients.
    """
    if not isinstance(root, Tensor):
        raise ContractError("backward root must be a Tensor")
    if root.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    seed = np.ones_like(root.data)
    root.grad = seed if root.grad is None else root.grad + seed
    # First contribution to a tensor is borrowed (it may alias an upstream
    # buffer); a second contribution replaces it with a fresh sum, so
    # borrowed arrays are never mutated.
    borrowed = set()
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            if parent.grad is None:
                parent.grad = pg
                borrowed.add(id(parent))
            elif id(parent) in borrowed:
                parent.grad = parent.grad + pg
                borrowed.discard(id(parent))
            else:
                parent.grad += pg


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               max_coords: Optional[int] = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a tensor to a scalar tensor and must be pure. The check runs
    in float64 regardless of the input dtype. Error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``. With ``max_coords`` set,
    a deterministic random subset of coordinates is probed (for large
    parameter tensors); otherwise every coordinate is.
    """
    base = np.asarray(x.data, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(xt)
        if y.size != 1:
            raise ContractError("grad_check target function must return a scalar")
        backward(tape, y)
    analytic = (xt.grad if xt.grad is not None else np.zeros_like(base)).reshape(-1)

    coords = _pick_coords(base.size, max_coords, seed)
    flat = base.reshape(-1)
    worst = 0.0
    for i in coords:
        probe = flat.copy()
        probe[i] = flat[i] + eps
        f_plus = f(Tensor(probe.reshape(base.shape))).item()
        probe[i] = flat[i] - eps
        f_minus = f(Tensor(probe.reshape(base.shape))).item()
        numeric = (f_plus - f_minus) / (2.0 * eps)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        if err > worst:
            worst = err
    return float(worst)


def _pick_coords(n: int, max_coords: Optional[int], seed: int) -> np.ndarray:
    if max_coords is not None and max_coords < n:
        coords = np.random.default_rng(seed).choice(n, size=max_coords, replace=False)
        coords.sort()
        return coords
    return np.arange(n)


def param_grad_check(loss_fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-5,
                     max_coords: Optional[int] = None, seed: int = 0) -> float:
    """Finite-difference check for a parameter embedded in a model.

    ``loss_fn`` takes no arguments, must be a pure function of the current
    parameter values, and returns a scalar tensor. The parameter is
    perturbed in place for the numeric probes and restored afterwards.
    Use float64 parameters for tight tolerances.
    """
    param.zero_grad()
    with Tape() as tape:
        y = loss_fn()
        if y.size != 1:
            raise ContractError("param_grad_check loss function must return a scalar")
        backward(tape, y)
    analytic = (param.grad if param.grad is not None else np.zeros_like(param.data)).reshape(-1).copy()
    param.zero_grad()

    flat = param.data.reshape(-1)  # contiguous, so this is an in-place view
    worst = 0.0
    for i in _pick_coords(flat.size, max_coords, seed):
        orig = flat[i]
        try:
            flat[i] = orig + eps
            f_plus = loss_fn().item()
            flat[i] = orig - eps
            f_minus = loss_fn().item()
        finally:
            flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        if err > worst:
            worst = err
    return float(worst)
