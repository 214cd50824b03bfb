"""Dense float64 tensors with a define-by-run reverse-mode tape.

Every differentiable operation computes its value eagerly with numpy and,
when a tape is active and some input requires a gradient, appends a record
holding the operation kind, its inputs, its output and a closure that maps
the output cotangent to input cotangents.  ``backward`` walks the records of
one tape in reverse, so a tape is already a topological order.

Broadcasting is deliberately absent except between a size-1 tensor and an
arbitrary tensor; use :func:`broadcast_to` to expand explicitly.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "backward",
    "tensor",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "conv1d",
    "conv_transpose1d",
    "relu",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "square",
    "power",
    "log_softmax",
    "logsumexp",
    "logaddexp",
    "tsum",
    "mean",
    "concat",
    "getitem",
    "reshape",
    "transpose",
    "broadcast_to",
    "bias_add",
    "take",
    "grad_check",
]


class ShapeError(ValueError):
    """Operands of an operation have incompatible shapes."""


_tape_ids = itertools.count(1)
_active: list["Tape"] = []


@dataclass
class Record:
    kind: str
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of operations for one forward pass.

    Use as a context manager; operations executed inside the ``with`` block
    are recorded on it.
    """

    records: list[Record] = field(default_factory=list)
    id: int = field(default_factory=lambda: next(_tape_ids))

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def record(self, kind, inputs, output, vjp) -> None:
        self.records.append(Record(kind, tuple(inputs), output, vjp))

    def __len__(self) -> int:
        return len(self.records)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "tape_id", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(kind: str, data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor(data)
    if not _active or not any(t.requires_grad for t in inputs):
        return out
    tape = _active[-1]
    for t in inputs:
        if t.tape_id is not None and t.tape_id != tape.id and t.requires_grad:
            raise RuntimeError(f"{kind}: input belongs to tape {t.tape_id}, active tape is {tape.id}")
    out.requires_grad = True
    out.tape_id = tape.id
    tape.record(kind, inputs, out, vjp)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` of every grad-requiring tensor reachable from ``loss``.

    Leaf gradients accumulate across calls; zero them between steps.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.tape_id != tape.id:
        raise RuntimeError("backward: loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        rec.output.grad = g
        for t, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if t.tape_id is None:
                leaves[key] = t
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------- elementwise


def _binary_shapes(kind: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    if a.size == 1:
        return b.shape
    if b.size == 1:
        return a.shape
    raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def _fit(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _bdata(x: Tensor, out_shape) -> np.ndarray:
    # Size-1 operands are flattened to 0-d so numpy treats them as scalars.
    return x.data.reshape(()) if x.size == 1 and x.shape != out_shape else x.data


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _binary_shapes("add", a, b)
    data = _bdata(a, shape) + _bdata(b, shape)
    return _emit("add", data, (a, b), lambda g: (_fit(g, a.shape), _fit(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _binary_shapes("sub", a, b)
    data = _bdata(a, shape) - _bdata(b, shape)
    return _emit("sub", data, (a, b), lambda g: (_fit(g, a.shape), _fit(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _binary_shapes("mul", a, b)
    ad, bd = _bdata(a, shape), _bdata(b, shape)

    def vjp(g):
        return _fit(g * bd, a.shape), _fit(g * ad, b.shape)

    return _emit("mul", ad * bd, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _binary_shapes("div", a, b)
    ad, bd = _bdata(a, shape), _bdata(b, shape)
    out = ad / bd

    def vjp(g):
        ga = g / bd
        return _fit(ga, a.shape), _fit(-ga * out, b.shape)

    return _emit("div", out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _emit("relu", a.data * pos, (a,), lambda g: (g * pos,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _emit("log", np.log(x), (a,), lambda g: (g / x,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _emit("square", x * x, (a,), lambda g: (2.0 * g * x,))


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    x = a.data
    return _emit("power", x**p, (a,), lambda g: (g * p * x ** (p - 1.0),))


def logaddexp(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"logaddexp: shape mismatch {a.shape} vs {b.shape}")
    out = np.logaddexp(a.data, b.data)

    def vjp(g):
        return g * np.exp(a.data - out), g * np.exp(b.data - out)

    return _emit("logaddexp", out, (a, b), vjp)


# ----------------------------------------------------------------- reductions


def _lse(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True)))[..., 0]


def logsumexp(a: Tensor) -> Tensor:
    """Log-sum-exp over the last axis."""
    out = _lse(a.data)

    def vjp(g):
        return (g[..., None] * np.exp(a.data - out[..., None]),)

    return _emit("logsumexp", out, (a,), vjp)


def log_softmax(a: Tensor) -> Tensor:
    out = a.data - _lse(a.data)[..., None]

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax", out, (a,), vjp)


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    if axis is None:
        return _emit("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % a.ndim
    return _emit(
        "sum",
        a.data.sum(axis=ax),
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),),
    )


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    s = tsum(a, axis)
    return scale(s, 1.0 / n)


# -------------------------------------------------------------- linear algebra


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched-left matmul on contiguous 2-d views (keeps numpy on the BLAS path)."""
    lead = a.shape[:-1]
    a2 = np.ascontiguousarray(a.reshape(-1, a.shape[-1]))
    return (a2 @ np.ascontiguousarray(b)).reshape(lead + (b.shape[-1],))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a`` of shape (..., m, k) times a 2-d ``b`` of shape (k, n)."""
    if a.ndim < 2 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    out = _mm(a.data, b.data)
    k, n = b.shape

    def vjp(g):
        return _mm(g, b.data.T), _mm(a.data.reshape(-1, k).T, g.reshape(-1, n))

    return _emit("matmul", out, (a, b), vjp)


def bias_add(a: Tensor, bias: Tensor) -> Tensor:
    """Add a vector along the last axis of ``a``."""
    if bias.ndim != 1 or a.shape[-1] != bias.shape[0]:
        raise ShapeError(f"bias_add: shape mismatch {a.shape} vs {bias.shape}")
    lead = tuple(range(a.ndim - 1))
    return _emit("bias_add", a.data + bias.data, (a, bias), lambda g: (g, g.sum(axis=lead)))


def conv_out_len(n: int, kernel: int, stride: int) -> int:
    return (n - kernel) // stride + 1


def _frames(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """(B, C, T) -> (B, C, T_out, kernel) strided view."""
    win = np.lib.stride_tricks.sliding_window_view(x, kernel, axis=-1)
    return win[:, :, ::stride, :]


def _overlap_add(cols: np.ndarray, stride: int, length: int) -> np.ndarray:
    """Adjoint of :func:`_frames`: (B, C, T_out, kernel) -> (B, C, length)."""
    b, c, t_out, kernel = cols.shape
    nblk = -(-kernel // stride)
    if nblk * stride != kernel:
        pad = np.zeros((b, c, t_out, nblk * stride - kernel))
        cols = np.concatenate([cols, pad], axis=-1)
    total = (t_out + nblk - 1) * stride
    out = np.zeros((b, c, t_out + nblk - 1, stride))
    blocks = cols.reshape(b, c, t_out, nblk, stride)
    for j in range(nblk):
        out[:, :, j : j + t_out, :] += blocks[:, :, :, j, :]
    out = out.reshape(b, c, total)
    if total >= length:
        return out[:, :, :length]
    return np.concatenate([out, np.zeros((b, c, length - total))], axis=-1)


def conv1d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Valid cross-correlation. x: (B, C_in, T), w: (C_out, C_in, K)."""
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1] or x.shape[2] < w.shape[2]:
        raise ShapeError(f"conv1d: shape mismatch {x.shape} vs {w.shape}")
    c_out, c_in, k = w.shape
    bsz, _, t = x.shape
    fr = _frames(x.data, k, stride)  # (B, Cin, To, K)
    t_out = fr.shape[2]
    cols = fr.transpose(0, 2, 1, 3).reshape(bsz, t_out, c_in * k)
    wm = w.data.reshape(c_out, c_in * k)
    out = _mm(cols, wm.T).transpose(0, 2, 1)

    def vjp(g):
        gt = g.transpose(0, 2, 1)  # (B, To, Cout)
        gw = _mm(gt.reshape(-1, c_out).T, cols.reshape(-1, c_in * k)).reshape(w.shape)
        gcols = _mm(gt, wm).reshape(bsz, t_out, c_in, k).transpose(0, 2, 1, 3)
        return _overlap_add(gcols, stride, t), gw

    return _emit("conv1d", np.ascontiguousarray(out), (x, w), vjp)


def conv_transpose1d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Adjoint of conv1d. x: (B, C_in, T), w: (C_in, C_out, K) -> (B, C_out, (T-1)*stride+K)."""
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose1d: shape mismatch {x.shape} vs {w.shape}")
    c_in, c_out, k = w.shape
    bsz, _, t = x.shape
    length = (t - 1) * stride + k
    xt = x.data.transpose(0, 2, 1)  # (B, T, Cin)
    wm = w.data.reshape(c_in, c_out * k)
    cols = _mm(xt, wm).reshape(bsz, t, c_out, k).transpose(0, 2, 1, 3)
    out = _overlap_add(cols, stride, length)

    def vjp(g):
        fr = _frames(g, k, stride)  # (B, Cout, T, K)
        gcols = fr.transpose(0, 2, 1, 3).reshape(bsz, t, c_out * k)
        gx = _mm(gcols, wm.T).transpose(0, 2, 1)
        gw = _mm(xt.reshape(-1, c_in).T, gcols.reshape(-1, c_out * k))
        return np.ascontiguousarray(gx), gw.reshape(w.shape)

    return _emit("conv_transpose1d", out, (x, w), vjp)


# ---------------------------------------------------------------- structural


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shape mismatch {ref} vs {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return np.split(g, cuts, axis=ax)

    return _emit("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, vjp)


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    shape = a.shape
    basic = _is_basic(idx)

    def vjp(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _emit("slice", np.array(out), (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit numpy-style expansion of ``a`` to ``shape``."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: shape mismatch {a.shape} vs {shape}") from None
    old = a.shape

    def vjp(g):
        lead = len(shape) - len(old)
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(old) if n == 1 and g.shape[i] != 1)
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _emit("broadcast_to", out, (a,), vjp)


def take(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather along the last axis; ``index`` shares all leading dims with ``a``."""
    index = np.asarray(index, dtype=np.intp)
    if index.shape[:-1] != a.shape[:-1]:
        raise ShapeError(f"take: shape mismatch {a.shape} vs {index.shape}")
    out = np.take_along_axis(a.data, index, axis=-1)
    shape = a.shape

    def vjp(g):
        n = shape[-1]
        flat = np.zeros(int(np.prod(shape[:-1])) * n)
        rows = np.arange(flat.size // n).reshape(shape[:-1] + (1,)) * n
        np.add.at(flat, (rows + index).reshape(-1), g.reshape(-1))
        return (flat.reshape(shape),)

    return _emit("take", out, (a,), vjp)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, h: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences of ``f`` at ``x``."""
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(leaf)
    if y.tape_id == tape.id:
        backward(tape, y)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    probe = base.copy()
    pflat = probe.reshape(-1)
    for i in range(pflat.size):
        orig = pflat[i]
        pflat[i] = orig + h
        fp = f(Tensor(probe.copy())).item()
        pflat[i] = orig - h
        fm = f(Tensor(probe.copy())).item()
        pflat[i] = orig
        flat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
