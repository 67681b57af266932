"""Dense tensors with broadcasting arithmetic and tape-based reverse-mode
differentiation.

A :class:`Tape` is an ordered record of executed operations. Every op run
inside a ``with tape() as tp:`` block appends one entry; ``backward(loss)``
replays the entries in exact reverse execution order, accumulating gradients
additively into ``Tensor.grad`` (a tensor used twice receives the sum of both
paths). Tensors are immutable after construction except for the gradient
accumulator; a tape belongs to a single thread.

Training runs in float32; gradient checking switches the whole stack to
float64 via :func:`set_default_dtype` / :func:`using_dtype` because central
differences are meaningless in single precision.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DetachedGraphError(RuntimeError):
    """The loss does not reach any recorded operation on the tape."""


_state = threading.local()


def _tls():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
        _state.dtype = np.float32
        _state.check_finite = False
    return _state


def set_default_dtype(dtype):
    _tls().dtype = np.dtype(dtype).type


def get_default_dtype():
    return _tls().dtype


@contextmanager
def using_dtype(dtype):
    prev = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def set_finite_checks(enabled):
    """Debug mode: verify every op output is finite (NaN/Inf is an error state)."""
    _tls().check_finite = bool(enabled)


@contextmanager
def capture_kink_masks(out_list):
    """Record a checksum of every relu/clip activation pattern seen.

    Central differences are only valid on a smooth segment; comparing these
    checksums between the two evaluations of a difference quotient detects
    crossings of the piecewise boundaries.
    """
    tls = _tls()
    prev = getattr(tls, "kink_masks", None)
    tls.kink_masks = out_list
    try:
        yield out_list
    finally:
        tls.kink_masks = prev


def _record_kink_mask(mask):
    masks = getattr(_tls(), "kink_masks", None)
    if masks is not None:
        import zlib

        masks.append(zlib.crc32(np.packbits(mask).tobytes()))


class Tape:
    """Ordered record of executed operations for one backward pass."""

    def __init__(self):
        self.entries = []

    def backward(self, loss):
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        if not loss.requires_grad:
            raise DetachedGraphError(
                "loss is not connected to any tracked tensor on this tape"
            )
        loss.grad = np.ones_like(loss.data)
        owned = set()  # grad buffers allocated by this pass, safe to add into
        for out, inputs, bwd in reversed(self.entries):
            if out.grad is None:
                continue
            grads = bwd(out.grad)
            for t, g in zip(inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = g
                elif id(t.grad) in owned:
                    np.add(t.grad, g, out=t.grad)
                else:
                    t.grad = t.grad + g
                    owned.add(id(t.grad))


@contextmanager
def tape():
    """Record operations onto a fresh tape."""
    tp = Tape()
    _tls().tapes.append(tp)
    try:
        yield tp
    finally:
        _tls().tapes.pop()


@contextmanager
def no_grad():
    """Run ops without recording (inference / data preparation)."""
    _tls().tapes.append(None)
    try:
        yield
    finally:
        _tls().tapes.pop()


def _active_tape():
    tapes = _tls().tapes
    return tapes[-1] if tapes else None


def backward(loss, tp=None):
    """Populate gradients of everything the scalar ``loss`` depends on."""
    if tp is None:
        tp = _active_tape()
        if tp is None:
            raise DetachedGraphError("no active tape; call inside `with tape():`")
    tp.backward(loss)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind == "f":
            arr = arr.astype(get_default_dtype(), copy=False)
        else:
            arr = arr.astype(get_default_dtype())
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # arithmetic sugar; all routed through the recorded ops below
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

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=get_default_dtype()), requires_grad)


def ones(shape, requires_grad=False):
    return Tensor(np.ones(shape, dtype=get_default_dtype()), requires_grad)


def _emit(out_data, inputs, bwd):
    st = _tls()
    if st.check_finite and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("operation produced non-finite values")
    tp = _active_tape()
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out.requires_grad = False
    if tp is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tp.entries.append((out, inputs, bwd))
    return out


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of trailing-extent broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_check(a, b, opname):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{opname}: shapes {a.shape} and {b.shape} are not broadcast-compatible"
        ) from None


def add(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _broadcast_check(a, b, "add")
    out = a.data + b.data

    def bwd(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _emit(out, (a, b), bwd)


def sub(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _broadcast_check(a, b, "sub")
    out = a.data - b.data

    def bwd(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _emit(out, (a, b), bwd)


def mul(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _broadcast_check(a, b, "mul")
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return unbroadcast(g * bd, a.shape), unbroadcast(g * ad, b.shape)

    return _emit(out, (a, b), bwd)


def div(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _broadcast_check(a, b, "div")
    out = a.data / b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return (
            unbroadcast(g / bd, a.shape),
            unbroadcast(-g * ad / (bd * bd), b.shape),
        )

    return _emit(out, (a, b), bwd)


def neg(a):
    a = as_tensor(a)

    def bwd(g):
        return (-g,)

    return _emit(-a.data, (a,), bwd)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _emit(out, (a,), bwd)


def log(a):
    a = as_tensor(a)
    ad = a.data

    def bwd(g):
        return (g / ad,)

    return _emit(np.log(ad), (a,), bwd)


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def bwd(g):
        return (g / (2.0 * out),)

    return _emit(out, (a,), bwd)


def square(a):
    a = as_tensor(a)
    ad = a.data

    def bwd(g):
        return (2.0 * ad * g,)

    return _emit(ad * ad, (a,), bwd)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    _record_kink_mask(mask)
    out = np.where(mask, a.data, 0.0).astype(a.data.dtype)

    def bwd(g):
        return (g * mask,)

    return _emit(out, (a,), bwd)


def sigmoid(a):
    a = as_tensor(a)
    ad = a.data
    out = np.empty_like(ad)
    pos = ad >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    ez = np.exp(ad[~pos])
    out[~pos] = ez / (1.0 + ez)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _emit(out, (a,), bwd)


def clip(a, lo, hi):
    """Clamp values; positions pushed onto the bounds get zero gradient."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    _record_kink_mask(inside)
    out = np.clip(a.data, lo, hi)

    def bwd(g):
        return (g * inside,)

    return _emit(out, (a,), bwd)


def detach(a):
    """Value of ``a`` as a constant; blocks gradient flow."""
    a = as_tensor(a)
    return Tensor(a.data, requires_grad=False, dtype=a.data.dtype)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, in_shape),)

    return _emit(np.asarray(out), (a,), bwd)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.size if axis is None else np.prod(
        [a.shape[i] for i in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def matmul(a, b):
    """Batched matrix product over the last two axes (numpy semantics)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ for {a.shape} @ {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _emit(out, (a, b), bwd)


def vecmat(v, m):
    """Batched vector-matrix product: (..., s) x (..., s, z) -> (..., z).

    Leading batch extents must match exactly. The backward pass uses a
    broadcast outer product, which is much faster than numpy's batched
    matmul for the small inner extents routing produces.
    """
    v, m = as_tensor(v), as_tensor(m)
    if v.shape != m.shape[:-1]:
        raise ShapeError(f"vecmat: {v.shape} incompatible with {m.shape}")
    out = (v.data[..., None, :] @ m.data)[..., 0, :]
    vd, md = v.data, m.data

    def bwd(g):
        gv = np.einsum("...z,...sz->...s", g, md)
        gm = vd[..., :, None] * g[..., None, :]
        return gv, gm

    return _emit(out, (v, m), bwd)


def matvec(m, v):
    """Batched matrix-vector product: (..., s, z) x (..., z) -> (..., s)."""
    m, v = as_tensor(m), as_tensor(v)
    if v.shape != m.shape[:-2] + m.shape[-1:]:
        raise ShapeError(f"matvec: {m.shape} incompatible with {v.shape}")
    out = (m.data @ v.data[..., :, None])[..., 0]
    md, vd = m.data, v.data

    def bwd(g):
        gm = g[..., :, None] * vd[..., None, :]
        gv = np.einsum("...s,...sz->...z", g, md)
        return gm, gv

    return _emit(out, (m, v), bwd)


def index_grid(a, rows, cols):
    """Select ``a[rows ⨯ cols]`` on the first two axes (differentiable)."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    sel = np.ix_(rows, cols)
    out = a.data[sel]
    in_shape = a.shape

    def bwd(g):
        ga = np.zeros(in_shape, dtype=g.dtype)
        ga[sel] = g
        return (ga,)

    return _emit(np.ascontiguousarray(out), (a,), bwd)


def parity_interleave(a):
    """Interleave (4, h, w, ...) parity blocks into (2h, 2w, ...).

    Block order is (row parity, column parity) = 00, 01, 10, 11; the inverse
    gather is the backward pass.
    """
    a = as_tensor(a)
    if a.ndim < 3 or a.shape[0] != 4:
        raise ShapeError(f"parity_interleave expects (4, h, w, ...), got {a.shape}")
    _, h, w = a.shape[:3]
    out = np.empty((2 * h, 2 * w) + a.shape[3:], dtype=a.data.dtype)
    out[0::2, 0::2] = a.data[0]
    out[0::2, 1::2] = a.data[1]
    out[1::2, 0::2] = a.data[2]
    out[1::2, 1::2] = a.data[3]

    def bwd(g):
        return (np.stack(
            [g[0::2, 0::2], g[0::2, 1::2], g[1::2, 0::2], g[1::2, 1::2]]
        ),)

    return _emit(out, (a,), bwd)


def reshape(a, shape):
    a = as_tensor(a)
    in_shape = a.shape
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(in_shape),)

    return _emit(out, (a,), bwd)


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return _emit(out, (a,), bwd)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        for i in range(len(sizes)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return _emit(out, tuple(tensors), bwd)


def contract(a, b, axes):
    """Tensor contraction over paired axes: ``axes = (axes_a, axes_b)``.

    Result carries a's free axes then b's free axes, in input order.
    Built from transpose/reshape/matmul so the backward pass comes from the
    tape.
    """
    a, b = as_tensor(a), as_tensor(b)
    axes_a, axes_b = axes
    axes_a = [ax % a.ndim for ax in axes_a]
    axes_b = [ax % b.ndim for ax in axes_b]
    if len(axes_a) != len(axes_b):
        raise ShapeError("contract: axis lists differ in length")
    for ia, ib in zip(axes_a, axes_b):
        if a.shape[ia] != b.shape[ib]:
            raise ShapeError(
                f"contract: paired extents differ, {a.shape}[{ia}] vs {b.shape}[{ib}]"
            )
    free_a = [i for i in range(a.ndim) if i not in axes_a]
    free_b = [i for i in range(b.ndim) if i not in axes_b]
    m = int(np.prod([a.shape[i] for i in free_a])) if free_a else 1
    k = int(np.prod([a.shape[i] for i in axes_a])) if axes_a else 1
    n = int(np.prod([b.shape[i] for i in free_b])) if free_b else 1
    lhs = reshape(transpose(a, tuple(free_a + axes_a)), (m, k))
    rhs = reshape(transpose(b, tuple(axes_b + free_b)), (k, n))
    out_shape = tuple(a.shape[i] for i in free_a) + tuple(b.shape[i] for i in free_b)
    return reshape(matmul(lhs, rhs), out_shape)


def conv2d_lower(a, kh, kw, stride=1, padding="same"):
    """Lower an (h, w, c) tensor to patch rows (h', w', kh*kw*c).

    Row (x, y) is the flattened kh x kw x c window read around the
    stride-mapped position; out-of-grid positions read zero under "same"
    padding.
    """
    a = as_tensor(a)
    if a.ndim != 3:
        raise ShapeError(f"conv2d_lower expects (h, w, c), got {a.shape}")
    h, w, _ = a.shape
    out = kernels.im2col(a.data, kh, kw, stride, padding)

    def bwd(g):
        return (kernels.col2im(g, kh, kw, stride, h, w, padding),)

    return _emit(out, (a,), bwd)


def deconv2d_scatter(a, kh, kw, stride):
    """Exact adjoint of :func:`conv2d_lower`: scatter patch rows
    (h, w, kh*kw*c) to an (stride*h, stride*w, c) grid, summing overlaps.
    """
    a = as_tensor(a)
    if a.ndim != 3:
        raise ShapeError(f"deconv2d_scatter expects (h, w, k*k*c), got {a.shape}")
    if stride not in (1, 2):
        raise ValueError(f"unsupported stride {stride}; expected 1 or 2")
    if a.shape[2] % (kh * kw) != 0:
        raise ShapeError(
            f"deconv2d_scatter: channel extent {a.shape[2]} not divisible by {kh}*{kw}"
        )
    h, w, _ = a.shape
    oh, ow = stride * h, stride * w
    out = kernels.col2im(a.data, kh, kw, stride, oh, ow, "same")

    def bwd(g):
        return (kernels.im2col(g, kh, kw, stride, "same"),)

    return _emit(out, (a,), bwd)


def upsample_zeros(a, stride):
    """Insert stride-1 zeros between spatial positions of an (h, w, ...) tensor."""
    a = as_tensor(a)
    h, w = a.shape[0], a.shape[1]
    out_shape = (h * stride, w * stride) + a.shape[2:]
    out = np.zeros(out_shape, dtype=a.data.dtype)
    out[::stride, ::stride] = a.data

    def bwd(g):
        return (np.ascontiguousarray(g[::stride, ::stride]),)

    return _emit(out, (a,), bwd)


def softmax(a, axis):
    """Numerically-stable softmax along ``axis`` (max-subtraction)."""
    a = as_tensor(a)
    shift = Tensor(a.data.max(axis=axis, keepdims=True), dtype=a.data.dtype)
    e = exp(sub(a, shift))
    return div(e, sum_(e, axis=axis, keepdims=True))
