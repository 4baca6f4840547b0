"""Dense tensors with reverse-mode differentiation on top of numpy.

Every differentiable op builds a node holding its parents and a closure that
maps the output gradient to one gradient per parent. ``Tensor.backward`` walks
the recorded graph in reverse topological order and accumulates gradients
additively into leaves, so fan-out is handled for free.

Arrays are numpy row-major buffers; a ``Tensor`` never copies its input array
unless a dtype conversion is required.
"""

from __future__ import annotations

import contextlib
import math
import os
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, InvalidTargetError, NonFiniteError, ShapeError

_DEBUG = bool(os.environ.get("OWCZSL_DEBUG"))


def set_debug(flag: bool) -> None:
    """Enable or disable NaN/Inf policing on every op output."""
    global _DEBUG
    _DEBUG = bool(flag)


@contextlib.contextmanager
def debug_checks(flag: bool = True):
    prev = _DEBUG
    set_debug(flag)
    try:
        yield
    finally:
        set_debug(prev)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


def _as_float_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    arr = np.asarray(data)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = _as_float_array(data, dtype)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @classmethod
    def _node(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        if _DEBUG:
            _check_finite(data, f"output of {op}")
        return out

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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    def backward(self) -> None:
        """Populate ``.grad`` on every leaf that requires it."""
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topological_order(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, pow_scalar(other, -1.0))
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _raise_not_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with parents before children.

    Only nodes that take part in differentiation are listed. Iterative so deep
    graphs do not hit the recursion limit.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str = "custom") -> Tensor:
    """Record an op with a hand-written backward.

    ``backward(grad_out)`` must return one array (or None) per parent, each
    shaped like that parent.
    """
    return Tensor._node(data, parents, backward, op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return scale(b, float(a))
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._node(ad * bd, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    a = _lift(a)
    c = float(c)

    def backward(g):
        return (g * c,)

    return Tensor._node(a.data * c, (a,), backward, "scale")


def pow_scalar(a: Tensor, p: float) -> Tensor:
    ad = a.data

    def backward(g):
        return (g * p * ad ** (p - 1.0),)

    return Tensor._node(ad**p, (a,), backward, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return Tensor._node(out, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data

    def backward(g):
        return (g / ad,)

    return Tensor._node(np.log(ad), (a,), backward, "log")


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def backward(g):
        return (g * out * (1.0 - out),)

    return Tensor._node(out, (a,), backward, "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return Tensor._node(out, (a,), backward, "tanh")


def relu(a: Tensor) -> Tensor:
    ad = a.data

    def backward(g):
        return (g * (ad > 0),)

    return Tensor._node(np.maximum(ad, 0), (a,), backward, "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU; smooth everywhere, which keeps gradient checks honest."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return Tensor._node(out, (a,), backward, "gelu")


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a = _lift(a)
    b = _lift(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return Tensor._node(out, (a, b), backward, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {shape}") from exc

    def backward(g):
        return (g.reshape(src),)

    return Tensor._node(out, (a,), backward, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return Tensor._node(np.transpose(a.data, axes), (a,), backward, "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def broadcast_to(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {src} to {shape}") from exc

    def backward(g):
        return (_unbroadcast(g, src),)

    return Tensor._node(np.ascontiguousarray(out), (a,), backward, "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._node(out, tuple(tensors), backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        ax = axis if axis >= 0 else len(shape) + 1 + axis
        shape.insert(ax, 1)
        expanded.append(reshape(t, tuple(shape)))
    return concat(expanded, axis=axis)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, index) -> Tensor:
    """Slicing and fancy indexing; backward scatter-adds into the source."""
    if isinstance(index, Tensor):
        raise ContractError("index with an integer array, not a Tensor")
    src_shape, dtype = a.shape, a.dtype
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(str(exc)) from exc
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    if basic:
        out = np.ascontiguousarray(out)
    return Tensor._node(out, (a,), backward, "getitem")


def embedding(table: Tensor, idx) -> Tensor:
    """Row lookup ``table[idx]``; gradient scatter-adds back into the rows used."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding index out of range for table with {table.shape[0]} rows")
    return getitem(table, idx)


def scatter_add(values: np.ndarray, idx, n_rows: int) -> np.ndarray:
    """Adjoint of row gather: sum ``values`` into ``n_rows`` rows at ``idx``."""
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((n_rows,) + values.shape[idx.ndim:], dtype=values.dtype)
    np.add.at(out, idx, values)
    return out


# ---------------------------------------------------------------------------
# reductions


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return Tensor._node(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_(a, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# normalisations and losses


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._node(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor._node(out, (a,), backward, "log_softmax")


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then apply gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def backward(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return Tensor._node(out, (x, gain, bias), backward, "layernorm")


def cross_entropy(logits: Tensor, targets, class_subset=None) -> Tensor:
    """Mean negative log-softmax of the target class over a batch.

    With ``class_subset`` the softmax only runs over those columns; targets are
    given in full-class coordinates and must all lie inside the subset.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B, C] logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.intp).reshape(-1)
    n, c = logits.shape
    if targets.shape[0] != n:
        raise ShapeError(f"{targets.shape[0]} targets for {n} rows")
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise InvalidTargetError(f"target out of range [0, {c})")
    if class_subset is not None:
        subset = np.asarray(sorted(set(int(i) for i in class_subset)), dtype=np.intp)
        position = np.full(c, -1, dtype=np.intp)
        position[subset] = np.arange(subset.size)
        local = position[targets]
        if np.any(local < 0):
            bad = sorted(set(targets[local < 0].tolist()))
            raise InvalidTargetError(f"targets {bad} are outside the class subset")
        logits = getitem(logits, (slice(None), subset))
        targets = local
    logp = log_softmax(logits, axis=-1)
    picked = getitem(logp, (np.arange(n), targets))
    return scale(sum_(picked), -1.0 / n)


# ---------------------------------------------------------------------------
# finite-difference oracle


def numerical_gradient(fn: Callable[[], float], array: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function w.r.t. every entry of ``array`` (mutated in place, restored)."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn()
        flat[i] = orig - step
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def gradient_errors(loss_fn: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-5) -> dict[int, float]:
    """Max of |analytic - numeric| / max(1, |numeric|) for each parameter.

    ``loss_fn`` must rebuild the graph from the current parameter data on each call.
    Keys are positions in ``params``.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def value():
        return float(loss_fn().data)

    errors = {}
    for k, p in enumerate(params):
        numeric = numerical_gradient(value, p.data, step)
        errors[k] = float(np.max(np.abs(analytic[k] - numeric) / np.maximum(1.0, np.abs(numeric)))) if numeric.size else 0.0
    return errors


# ---------------------------------------------------------------------------
# named-tensor archive

_DTYPES = {"float64": "<f8", "float32": "<f4", "int64": "<i8"}


def save_archive(path, tensors: dict[str, np.ndarray], comments: Sequence[str] = ()) -> None:
    """Write named arrays as a text header followed by raw little-endian payloads.

    Header lines are ``name dtype d0,d1,... offset``; optional ``#`` comment lines
    come first; a blank line ends the header. Offsets count from the first
    payload byte.
    """
    lines = []
    for c in comments:
        if "\n" in c:
            raise ContractError("archive comments must be single lines")
        lines.append("#" + c)
    payloads = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if " " in name or not name:
            raise ContractError(f"bad tensor name {name!r}")
        dname = arr.dtype.name
        if dname not in _DTYPES:
            raise ContractError(f"unsupported dtype {dname} for {name}")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        buf = np.ascontiguousarray(arr, dtype=_DTYPES[dname]).tobytes()
        lines.append(f"{name} {dname} {','.join(str(n) for n in arr.shape)} {offset}")
        payloads.append(buf)
        offset += len(buf)
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n\n").encode("ascii"))
        for buf in payloads:
            fh.write(buf)


def load_archive(path) -> tuple[dict[str, np.ndarray], list[str]]:
    """Inverse of :func:`save_archive`; returns ``(tensors, comments)``."""
    from .errors import CheckpointError

    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.find(b"\n\n")
    if end < 0:
        raise CheckpointError(f"{path}: archive header is not terminated")
    header = raw[:end].decode("ascii").split("\n") if end else []
    payload = raw[end + 2 :]
    tensors: dict[str, np.ndarray] = {}
    comments: list[str] = []
    for lineno, line in enumerate(header, start=1):
        if line.startswith("#"):
            comments.append(line[1:])
            continue
        parts = line.split(" ")
        if len(parts) != 4 or parts[1] not in _DTYPES:
            raise CheckpointError(f"{path}: bad header line {lineno}: {line!r}")
        name, dname, dims, off = parts
        shape = tuple(int(s) for s in dims.split(","))
        dt = np.dtype(_DTYPES[dname])
        n = int(np.prod(shape)) * dt.itemsize
        off = int(off)
        if off + n > len(payload):
            raise CheckpointError(f"{path}: payload for {name} is truncated")
        tensors[name] = np.frombuffer(payload, dtype=dt, count=int(np.prod(shape)), offset=off).reshape(shape).astype(dname)
    return tensors, comments
