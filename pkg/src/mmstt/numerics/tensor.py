"""Dense tensor values plus the reverse-mode differentiable primitives the
forecaster is built from. Arrays are numpy-backed; every op is pure, checks
shapes up front, and records its backward rule on the active GradTape."""

from __future__ import annotations

import math
import threading

import numpy as np
from scipy.special import erf

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes (or dtypes) are incompatible."""


class Tensor:
    """Immutable dense array value.

    `data` is a row-major numpy array in float32 (training mode) or float64
    (gradient-check mode). Tensors are never mutated after construction, so
    sharing them across threads is safe; updates produce new Tensors.
    """

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        if dtype is None:
            # float arrays keep their width; lists, ints, etc. get the default
            keep = isinstance(data, np.ndarray) and data.dtype in FLOAT_DTYPES
            dtype = data.dtype if keep else DEFAULT_DTYPE
        arr = np.array(data, dtype=dtype)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Fast path for op outputs: takes ownership, no copy.
        t = object.__new__(cls)
        if arr.flags.writeable:
            arr.setflags(write=False)
        object.__setattr__(t, "data", arr)
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor._wrap(self.data.astype(dtype))

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"


def zeros(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor._wrap(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor._wrap(np.ones(shape, dtype=dtype))


# ---------------------------------------------------------------------------
# Gradient tape
# ---------------------------------------------------------------------------

_TLS = threading.local()


def active_tape() -> "GradTape | None":
    return getattr(_TLS, "tape", None)


class GradTape:
    """Ordered record of primitive applications for reverse-mode gradients.

    Use as a context manager around the forward computation, then call
    `gradients(loss, params)`. One tape per training step; a tape is
    single-threaded while the ops themselves stay pure.
    """

    def __init__(self):
        self._ops: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self) -> "GradTape":
        if active_tape() is not None:
            raise RuntimeError("a GradTape is already active in this thread")
        _TLS.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _TLS.tape = None
        return False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        """Append one primitive: `backward(grad_out)` must return one gradient
        array (or None) per input, each of the input's exact shape."""
        self._ops.append((out, inputs, backward))

    def gradients(self, loss: Tensor, params: list[Tensor]) -> list[np.ndarray]:
        """Walk the tape backward from a scalar loss.

        Returns one gradient per requested parameter, of identical shape;
        parameters the loss does not depend on get zeros.
        """
        if loss.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, backward in reversed(self._ops):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = backward(g)
            for t, ig in zip(inputs, in_grads):
                if ig is None:
                    continue
                acc = grads.get(id(t))
                grads[id(t)] = ig if acc is None else acc + ig
        return [grads.get(id(p), np.zeros_like(p.data)) for p in params]


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward) -> Tensor:
    tape = active_tape()
    if tape is not None:
        tape.record(out, inputs, backward)
    return out


def _check_same_dtype(op: str, *tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"{op}: mixed dtypes {sorted(d.name for d in dtypes)}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and broadcast arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; shapes must match exactly."""
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ: {a.shape} vs {b.shape}")
    _check_same_dtype("add", a, b)
    out = Tensor._wrap(a.data + b.data)

    def backward(g):
        return g, g

    return _record(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes differ: {a.shape} vs {b.shape}")
    _check_same_dtype("sub", a, b)
    out = Tensor._wrap(a.data - b.data)

    def backward(g):
        return g, -g

    return _record(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; shapes must match exactly."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ: {a.shape} vs {b.shape}")
    _check_same_dtype("mul", a, b)
    ad, bd = a.data, b.data
    out = Tensor._wrap(ad * bd)

    def backward(g):
        return g * bd, g * ad

    return _record(out, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar."""
    s = a.dtype.type(s)
    out = Tensor._wrap(a.data * s)

    def backward(g):
        return (g * s,)

    return _record(out, (a,), backward)


def broadcast_add(a: Tensor, b: Tensor) -> Tensor:
    """`a + b` where `b` broadcasts against `a` by numpy trailing-axis rules
    (bias vectors, positional embeddings). `a`'s shape is preserved."""
    _check_same_dtype("broadcast_add", a, b)
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"broadcast_add: incompatible shapes {a.shape} vs {b.shape}") from None
    if out_shape != a.shape:
        raise ShapeError(f"broadcast_add: {b.shape} does not broadcast into {a.shape}")
    out = Tensor._wrap(a.data + b.data)
    b_shape = b.shape

    def backward(g):
        return g, _unbroadcast(g, b_shape)

    return _record(out, (a, b), backward)


# ---------------------------------------------------------------------------
# Matrix product
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product on the last two axes.

    Supports 2-D x 2-D, stacked x stacked with identical leading extents,
    and stacked x 2-D (shared weight applied to every leading slot).
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D: {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading extents differ: {a.shape} x {b.shape}")
    _check_same_dtype("matmul", a, b)
    ad, bd = a.data, b.data
    out = Tensor._wrap(ad @ bd)

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            # Shared weight: reduce over the stacked slots.
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _record(out, (a, b), backward)


# ---------------------------------------------------------------------------
# Normalization and nonlinearities
# ---------------------------------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row zero-mean/unit-variance over the last axis, then affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma/beta must have shape ({d},), got {gamma.shape} and {beta.shape}"
        )
    if eps <= 0:
        raise ValueError(f"layer_norm: eps must be > 0, got {eps}")
    _check_same_dtype("layer_norm", x, gamma, beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = Tensor._wrap(xhat * gamma.data + beta.data)
    gd = gamma.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return _record(out, (x, gamma, beta), backward)


def softmax_last_axis(x: Tensor) -> Tensor:
    """Max-stabilized softmax over the last axis; rows sum to 1."""
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor._wrap(p)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), backward)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    phi = 0.5 * (1.0 + erf(xd * x.dtype.type(_INV_SQRT2)))
    out = Tensor._wrap((xd * phi).astype(x.dtype, copy=False))

    def backward(g):
        pdf = np.exp(-0.5 * xd * xd) * x.dtype.type(_INV_SQRT2PI)
        return (g * (phi + xd * pdf),)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if math.prod(shape) != x.size:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {shape}")
    in_shape = x.shape
    out = Tensor._wrap(x.data.reshape(shape))

    def backward(g):
        return (g.reshape(in_shape),)

    return _record(out, (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} is not a permutation for rank {x.ndim}")
    out = Tensor._wrap(np.transpose(x.data, axes))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _record(out, (x,), backward)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    _check_same_dtype("concat", *tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            i != axis % len(ref) and t.shape[i] != ref[i] for i in range(len(ref))
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
    out = Tensor._wrap(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record(out, tuple(tensors), backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start:stop) along one axis."""
    n = x.shape[axis]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice_axis: [{start}:{stop}) out of range for extent {n}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    in_shape = x.shape
    out = Tensor._wrap(x.data[idx])

    def backward(g):
        full = np.zeros(in_shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _record(out, (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    """Mean over every element, producing a scalar tensor."""
    out = Tensor._wrap(np.asarray(x.data.mean(), dtype=x.dtype))
    in_shape = x.shape
    inv_n = 1.0 / x.size

    def backward(g):
        return (np.full(in_shape, g * inv_n, dtype=g.dtype),)

    return _record(out, (x,), backward)


def conv1x1(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """1x1 convolution over the channel axis of (..., C_in, H, W).

    Equivalent to a per-pixel matmul with `w` of shape (C_in, C_out) plus
    bias (C_out,); built from transpose/matmul/broadcast_add so the backward
    pass comes from the primitives.
    """
    if x.ndim < 3:
        raise ShapeError(f"conv1x1: input must be (..., C, H, W), got {x.shape}")
    c_in = x.shape[-3]
    if w.ndim != 2 or w.shape[0] != c_in:
        raise ShapeError(f"conv1x1: weight {w.shape} does not match input channels {c_in}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"conv1x1: bias {b.shape} does not match output channels {w.shape[1]}")
    n = x.ndim
    to_last = tuple(i for i in range(n) if i != n - 3) + (n - 3,)
    y = transpose(x, to_last)                    # (..., H, W, C_in)
    y = broadcast_add(matmul(y, w), b)           # (..., H, W, C_out)
    from_last = tuple(range(n - 3)) + (n - 1, n - 3, n - 2)
    return transpose(y, from_last)               # (..., C_out, H, W)
