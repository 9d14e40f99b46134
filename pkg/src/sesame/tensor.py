"""Dense float64 tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a read-only NumPy array. Operations on tensors that
require gradients record their parents and a vector-Jacobian product, so the
computation graph lives on the tensors themselves; :func:`gradients` walks it
backwards from a scalar loss. Tensors are never mutated after construction,
which keeps gradient replays bit-identical and makes tensors safe to share
between threads.

Binary elementwise operations accept equal shapes or a scalar operand only.
Anything else must be made explicit with :func:`broadcast_to` first.
"""

from __future__ import annotations

import io
import math
import struct
from contextlib import contextmanager
from typing import BinaryIO, Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DimensionError, ConfigurationError, EvaluationError, FormatError, InputError

__all__ = [
    "Tensor",
    "tensor",
    "parameter",
    "gradients",
    "matmul",
    "transpose",
    "softmax_rows",
    "conv1d_same",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "relu",
    "recording_relu_inputs",
    "sigmoid",
    "reshape",
    "broadcast_to",
    "sum",
    "mean",
    "concat",
    "stack",
    "layer_norm",
    "embedding",
    "cross_entropy",
    "grad_check",
    "grad_check_detailed",
    "write_tensor",
    "read_tensor",
]

VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An immutable n-dimensional array of 64-bit floats.

    ``requires_grad`` marks leaves whose gradient is wanted; results of
    operations inherit it from their inputs.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: VJP | None = None
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple["Tensor", ...], vjp: VJP) -> "Tensor":
        out = cls.__new__(cls)
        if data.dtype != np.float64:
            data = data.astype(np.float64)
        if data.flags.writeable:
            data.flags.writeable = False
        out.data = data
        out.name = None
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"

    def __getitem__(self, index) -> "Tensor":
        shape = self.shape

        basic = _is_basic_index(index)

        def vjp(g):
            full = np.zeros(shape)
            if basic:
                full[index] = g
            else:
                np.add.at(full, index, g)
            return (full,)

        return Tensor._result(np.asarray(self.data[index]), (self,), vjp)

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
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, slice)) or p is Ellipsis or p is None for p in parts)


def tensor(data) -> Tensor:
    """A constant tensor (no gradient)."""
    return data if isinstance(data, Tensor) else Tensor(data)


def parameter(data, name: str | None = None) -> Tensor:
    """A leaf tensor whose gradient is tracked."""
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def gradients(loss: Tensor, wrt: Mapping[str, Tensor] | None = None) -> dict:
    """Reverse-mode gradients of a scalar ``loss``.

    With ``wrt`` given, returns ``{name: ndarray}`` for each named tensor
    (zeros when the loss does not depend on it). Without it, returns a
    mapping from ``id(tensor)`` to gradient for every leaf that requires one.
    """
    if loss.size != 1:
        raise DimensionError(f"gradients need a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones(loss.shape)
        for node in reversed(_topological_order(loss)):
            g = grads.pop(id(node), None) if node._vjp is not None else grads.get(id(node))
            if g is None:
                continue
            if node._vjp is None:
                leaves[id(node)] = node
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    if wrt is None:
        return {k: grads[k] for k in leaves}
    out = {}
    for name, t in wrt.items():
        g = grads.get(id(t))
        out[name] = np.zeros(t.shape) if g is None else np.asarray(g).reshape(t.shape)
    return out


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either a plain matrix shared
    across the batch or has exactly the same batch axes as ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes differ between {a.shape} and {b.shape}")
    if b.ndim > a.ndim:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return Tensor._result(ad @ bd, (a, b), vjp)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    x = _as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"transpose needs rank >= 2, got {x.shape}")
    return Tensor._result(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row maximum."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._result(y, (x,), vjp)


def _correlate_same(x: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    half = len(taps) // 2
    n = x.shape[axis]
    moved = np.moveaxis(x, axis, 0)
    out = np.zeros_like(moved)
    for t, w in enumerate(taps):
        offset = t - half
        if w == 0.0 or abs(offset) >= n:
            continue
        # out[i] += w * x[i + offset], rows outside [0, n) read as zero
        if offset >= 0:
            out[: n - offset] += w * moved[offset:]
        else:
            out[-offset:] += w * moved[: n + offset]
    return np.moveaxis(out, 0, axis)


def conv1d_same(x: Tensor, kernel, axis: int = -2) -> Tensor:
    """Zero-padded SAME convolution along ``axis`` with a fixed kernel.

    Implemented as cross-correlation:
    ``out[i] = sum_t kernel[t] * x[i + t - k//2]`` with rows outside the
    sequence treated as zero. For the symmetric kernels used here this is the
    same as true convolution. The kernel is a constant; no gradient flows
    into it.
    """
    x = _as_tensor(x)
    taps = np.asarray(kernel.data if isinstance(kernel, Tensor) else kernel, dtype=np.float64).ravel()
    k = taps.size
    if x.ndim == 0:
        raise DimensionError("conv1d_same needs at least one axis")
    length = x.shape[axis]
    if k % 2 == 0 or k < 1:
        raise ConfigurationError(f"kernel size must be odd and positive, got {k}")
    if k > length:
        raise ConfigurationError(f"kernel size {k} exceeds sequence length {length}")
    flipped = taps[::-1].copy()

    def vjp(g):
        return (_correlate_same(g, flipped, axis),)

    return Tensor._result(_correlate_same(x.data, taps, axis), (x,), vjp)


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def _check_binary(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("add", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("sub", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("mul", a, b)
    ad, bd = a.data, b.data
    return Tensor._result(
        ad * bd, (a, b), lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape))
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        return _reduce_to(g / bd, ad.shape), _reduce_to(-g * out / bd, bd.shape)

    return Tensor._result(out, (a, b), vjp)


def scale(x, c: float) -> Tensor:
    """Multiply by a constant Python scalar."""
    x = _as_tensor(x)
    c = float(c)
    return Tensor._result(x.data * c, (x,), lambda g: (g * c,))


_relu_inputs: list[np.ndarray] | None = None


@contextmanager
def recording_relu_inputs():
    """Collect the input of every :func:`relu` evaluated inside the block.

    Finite differences are unreliable within ``h`` of a ReLU kink; gradient
    checks use this to pick evaluation points that stay clear of them.
    """
    global _relu_inputs
    previous, _relu_inputs = _relu_inputs, []
    try:
        yield _relu_inputs
    finally:
        _relu_inputs = previous


def relu(x) -> Tensor:
    x = _as_tensor(x)
    if _relu_inputs is not None:
        _relu_inputs.append(x.data)
    mask = x.data > 0
    return Tensor._result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    # split by sign so exp never overflows
    xd = x.data
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._result(y, (x,), lambda g: (g * y * (1.0 - y),))


_ELEMENTWISE = {
    "relu": relu,
    "sigmoid": sigmoid,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scale": scale,
}


def elementwise(name: str, *operands) -> Tensor:
    """Dispatch a pointwise operation by name (``relu``, ``sigmoid``, ``add``, ``mul``, ``scale``, ...)."""
    try:
        fn = _ELEMENTWISE[name]
    except KeyError:
        raise ConfigurationError(f"unknown elementwise op {name!r}") from None
    return fn(*operands)


# ---------------------------------------------------------------------------
# Shape manipulation and reductions
# ---------------------------------------------------------------------------


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {old} -> {tuple(shape)}: {exc}") from None
    return Tensor._result(data, (x,), lambda g: (g.reshape(old),))


def broadcast_to(x, shape: Sequence[int]) -> Tensor:
    """Explicit NumPy-style broadcast; the gradient sums over expanded axes."""
    x = _as_tensor(x)
    shape = tuple(shape)
    old = x.shape
    try:
        data = np.broadcast_to(x.data, shape)
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot broadcast {old} to {shape}") from None
    lead = len(shape) - len(old)
    axes = tuple(range(lead)) + tuple(i + lead for i, n in enumerate(old) if n == 1 and shape[i + lead] != 1)

    def vjp(g):
        return (g.sum(axis=axes, keepdims=True).reshape(old) if axes else g,)

    return Tensor._result(data, (x,), vjp)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = _as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor._result(np.asarray(out), (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = math.prod(x.shape[a] for a in axes)
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in ts]}: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(out, tuple(ts), vjp)


def stack(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("stack of an empty list")
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {[t.shape for t in ts]}")
    out = np.stack([t.data for t in ts], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return Tensor._result(out, tuple(ts), vjp)


# ---------------------------------------------------------------------------
# Network building blocks
# ---------------------------------------------------------------------------


def layer_norm(x, gain, offset, eps: float = 1e-12) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then apply gain/offset."""
    x, gain, offset = _as_tensor(x), _as_tensor(gain), _as_tensor(offset)
    d = x.shape[-1]
    if gain.shape != (d,) or offset.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / offset {offset.shape} vs features {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv
    gd = gain.data

    def vjp(g):
        flat_g = g.reshape(-1, d)
        flat_xhat = xhat.reshape(-1, d)
        g_gain = (flat_g * flat_xhat).sum(axis=0)
        g_offset = flat_g.sum(axis=0)
        gx = g * gd
        g_x = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return g_x, g_gain, g_offset

    return Tensor._result(xhat * gd + offset.data, (x, gain, offset), vjp)


def embedding(table, ids) -> Tensor:
    """Gather rows of ``table`` (V x d) by integer ``ids`` of any shape."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and not np.issubdtype(ids.dtype, np.integer):
        raise InputError(f"embedding ids must be integers, got {ids.dtype}")
    vocab = table.shape[0]
    bad = np.argwhere((ids < 0) | (ids >= vocab))
    if bad.size:
        pos = tuple(int(i) for i in bad[0])
        raise InputError(f"token id {int(ids[pos])} at position {pos} is outside vocabulary of size {vocab}")
    shape = table.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, ids, g)
        return (full,)

    return Tensor._result(table.data[ids], (table,), vjp)


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` (batch x classes) against integer labels."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(labels.size)
    loss = -logp[rows, labels].mean()

    def vjp(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / labels.size),)

    return Tensor._result(np.asarray(loss), (logits,), vjp)


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


def grad_check_detailed(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    analytic: Mapping[str, np.ndarray] | None = None,
) -> dict[str, float]:
    """Per-parameter maximum relative error between analytic and numeric gradients.

    The numeric gradient is the central difference ``(f(p + h) - f(p - h)) / 2h``
    taken one coordinate at a time; the error for a coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``. ``analytic`` overrides the
    tape gradient, which is how callers test that the checker itself fires.
    """
    if h <= 0:
        raise ConfigurationError(f"step h must be positive, got {h}")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(values: dict[str, np.ndarray], where: str) -> float:
        out = f({k: Tensor(v) for k, v in values.items()})
        val = float(np.asarray(out.data).reshape(()))
        if not math.isfinite(val):
            raise EvaluationError(f"objective is {val} when perturbing {where}")
        return val

    if analytic is None:
        leaves = {k: parameter(v, name=k) for k, v in base.items()}
        loss = f(leaves)
        if not math.isfinite(loss.item()):
            raise EvaluationError(f"objective is {loss.item()} at the base point")
        analytic = gradients(loss, leaves)

    errors: dict[str, float] = {}
    for name, value in base.items():
        worst = 0.0
        g = np.asarray(analytic[name]).reshape(value.shape)
        flat = value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = evaluate(base, f"{name}[{i}]")
            flat[i] = orig - h
            minus = evaluate(base, f"{name}[{i}]")
            flat[i] = orig
            numeric = (plus - minus) / (2 * h)
            err = abs(g.flat[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
        errors[name] = worst
    return errors


def grad_check(f, params, h: float = 1e-5, analytic=None) -> float:
    """Maximum relative gradient error over all parameters (see :func:`grad_check_detailed`)."""
    errors = grad_check_detailed(f, params, h=h, analytic=analytic)
    return max(errors.values(), default=0.0)


# ---------------------------------------------------------------------------
# Serialization: uint32 rank, uint32 dims, then float64 data, all little-endian
# ---------------------------------------------------------------------------


def write_tensor(stream: BinaryIO, value) -> None:
    arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f8", order="C")
    stream.write(struct.pack("<I", arr.ndim))
    stream.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    stream.write(arr.tobytes(order="C"))


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated tensor record: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(stream: BinaryIO) -> np.ndarray:
    (rank,) = struct.unpack("<I", _read_exact(stream, 4))
    dims = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank))
    count = math.prod(dims)
    arr = np.frombuffer(_read_exact(stream, 8 * count), dtype="<f8").reshape(dims)
    return arr.astype(np.float64)


def tensors_to_bytes(values: Iterable) -> bytes:
    buf = io.BytesIO()
    for v in values:
        write_tensor(buf, v)
    return buf.getvalue()
