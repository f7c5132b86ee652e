"""Dense float64 tensors with reverse-mode autodiff on an explicit tape.

Every op is eager: it computes its value immediately and, when a tape is
active and any input participates in differentiation, appends a backward
rule to the tape.  Replaying the tape in reverse yields exact gradients.
All data is float64; any op producing a NaN/Inf raises NumericError.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NumericError",
    "ContractError",
    "matmul",
    "add",
    "sub",
    "multiply",
    "scale",
    "sigmoid",
    "softmax",
    "layer_norm",
    "gelu",
    "embedding",
    "transpose",
    "reshape",
    "slice_",
    "mean",
    "sum_",
    "sq_frobenius",
    "abs_diff_sum",
    "cross_entropy",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operands have inconsistent shapes for the requested op."""


class NumericError(ArithmeticError):
    """An op produced a NaN or Inf, or was fed non-finite data."""


class ContractError(ValueError):
    """A caller violated an API precondition."""


_ids = itertools.count()


class Tensor:
    """A float64 array plus autodiff metadata.

    ``requires_grad`` on a leaf marks it as trainable; on an op output it
    means the value was recorded on the active tape.  ``grad`` is filled
    in by ``Tape.gradient`` for requested tensors.
    """

    __slots__ = ("data", "requires_grad", "grad", "tid")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor created with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tid = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar; keyword ops below are the real implementations
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


class Tape:
    """Ordered record of ops for one differentiable computation.

    Ops append themselves in construction order, which is a topological
    order of the graph; ``gradient`` replays them exactly once in reverse.
    """

    def __init__(self):
        self.ops = []  # (out_tid, inputs, backward_fn, name)

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPES.pop()
        return False

    def record(self, out: Tensor, inputs, backward, name: str):
        self.ops.append((out.tid, tuple(inputs), backward, name))

    def gradient(self, loss: Tensor, wrt) -> dict:
        """d(loss)/d(t) for every t in wrt, keyed by tensor id.

        Tensors never touched on the path from wrt to loss get a zero
        gradient.  Also populates ``t.grad`` on each requested tensor.
        """
        if loss.data.shape != ():
            raise ContractError(
                f"gradient: loss must be scalar, got shape {loss.data.shape}"
            )
        if not loss.requires_grad:
            raise ContractError("gradient: loss was not recorded on an active tape")
        acc = {loss.tid: np.ones((), dtype=np.float64)}
        for out_tid, inputs, backward, _name in reversed(self.ops):
            g = acc.pop(out_tid, None)
            if g is None:
                continue
            for t, gi in zip(inputs, backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                prev = acc.get(t.tid)
                acc[t.tid] = gi if prev is None else prev + gi
        out = {}
        for t in wrt:
            if not t.requires_grad:
                raise ContractError(
                    "gradient: tensor is not on the tape and has requires_grad=False"
                )
            g = acc.get(t.tid)
            if g is None:
                g = np.zeros_like(t.data)
            else:
                g = np.broadcast_to(g, t.data.shape).astype(np.float64, copy=True)
            t.grad = g
            out[t.tid] = Tensor(g)
        return out


_TAPES: list[Tape] = []


def _active_tape():
    return _TAPES[-1] if _TAPES else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(name: str, data: np.ndarray, inputs, backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{name}: non-finite value in output")
    tape = _active_tape()
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out.tid = next(_ids)
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward, name)
    else:
        out.requires_grad = False
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul: operands must have at least 2 dimensions")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions differ, {a.data.shape} @ {b.data.shape}"
        )
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape)
        gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape)
        return ga, gb

    return _result("matmul", ad @ bd, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: {e}") from None
    ash, bsh = a.data.shape, b.data.shape

    def backward(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _result("add", data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: {e}") from None
    ash, bsh = a.data.shape, b.data.shape

    def backward(g):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return _result("sub", data, (a, b), backward)


def multiply(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"multiply: {e}") from None
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result("multiply", data, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def backward(g):
        return (g * c,)

    return _result("scale", a.data * c, (a,), backward)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    # split by sign for stability at large |x|
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _result("sigmoid", out, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _result("softmax", out, (a,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias must have shape ({d},), got "
            f"{gain.data.shape} and {bias.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    diff = x.data - mu
    var = (diff * diff).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = diff * inv
    out = xh * gain.data + bias.data
    gd = gain.data

    def backward(g):
        gxh = g * gd
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xh).sum(axis=lead)
        gbias = g.sum(axis=lead)
        m1 = gxh.mean(axis=-1, keepdims=True)
        m2 = (gxh * xh).mean(axis=-1, keepdims=True)
        gx = inv * (gxh - m1 - xh * m2)
        return gx, ggain, gbias

    return _result("layer_norm", out, (x, gain, bias), backward)


def gelu(a) -> Tensor:
    """Exact erf-based GELU."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _result("gelu", out, (a,), backward)


def embedding(table, ids) -> Tensor:
    """Row lookup; differentiable w.r.t. the table only."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError("embedding: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ContractError(
            f"embedding: id out of range for table with {table.data.shape[0]} rows"
        )
    tshape = table.data.shape

    def backward(g):
        gt = np.zeros(tshape, dtype=np.float64)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, tshape[-1]))
        return (gt,)

    return _result("embedding", table.data[ids], (table,), backward)


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return _result("transpose", a.data.transpose(axes).copy(), (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape

    def backward(g):
        return (g.reshape(old),)

    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {e}") from None
    return _result("reshape", data.copy(), (a,), backward)


def slice_(a, key) -> Tensor:
    """Basic indexing (ints and slices); backward scatters into zeros."""
    a = _as_tensor(a)
    old = a.data.shape

    def backward(g):
        ga = np.zeros(old, dtype=np.float64)
        ga[key] = g
        return (ga,)

    return _result("slice", a.data[key].copy(), (a,), backward)


def mean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    if n == 0:
        raise ContractError("mean: empty tensor")
    shape = a.data.shape

    def backward(g):
        return (np.full(shape, float(g) / n),)

    return _result("mean", np.asarray(a.data.mean()), (a,), backward)


def sum_(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.data.shape

    def backward(g):
        return (np.full(shape, float(g)),)

    return _result("sum", np.asarray(a.data.sum()), (a,), backward)


def sq_frobenius(a) -> Tensor:
    """Sum of squared entries (squared Frobenius norm)."""
    a = _as_tensor(a)
    ad = a.data

    def backward(g):
        return (2.0 * float(g) * ad,)

    return _result("sq_frobenius", np.asarray((ad * ad).sum()), (a,), backward)


def abs_diff_sum(a, b) -> Tensor:
    """Sum of elementwise absolute differences; subgradient 0 at ties."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(
            f"abs_diff_sum: shapes differ, {a.data.shape} vs {b.data.shape}"
        )
    diff = a.data - b.data
    sgn = np.sign(diff)

    def backward(g):
        return float(g) * sgn, -float(g) * sgn

    return _result("abs_diff_sum", np.asarray(np.abs(diff).sum()), (a, b), backward)


def cross_entropy(logits, targets, valid=None) -> Tensor:
    """Mean next-token cross-entropy over valid positions.

    logits: (..., V); targets: integer array matching the leading shape;
    valid: optional boolean mask selecting which positions count.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    if targets.shape != logits.data.shape[:-1]:
        raise ShapeError(
            f"cross_entropy: targets shape {targets.shape} does not match "
            f"logits leading shape {logits.data.shape[:-1]}"
        )
    if valid is None:
        valid = np.ones(targets.shape, dtype=bool)
    else:
        valid = np.asarray(valid, dtype=bool)
    count = int(valid.sum())
    if count == 0:
        raise ContractError("cross_entropy: no valid positions")
    x = logits.data
    z = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
    losses = (lse - picked) * valid
    out = np.asarray(losses.sum() / count)

    def backward(g):
        p = np.exp(z - lse[..., None])
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        gl = (p - onehot) * valid[..., None] * (float(g) / count)
        return (gl,)

    return _result("cross_entropy", out, (logits,), backward)
