"""Reverse-mode automatic differentiation on numpy arrays.

A ``Tensor`` wraps an ndarray; every op that touches a gradient-requiring
input records one entry on a thread-local tape. ``backward(loss)`` walks the
tape once in reverse, accumulates ``.grad`` on the inputs, and consumes the
tape. Storage defaults to float32; ``set_default_dtype("float64")`` switches
new tensors to double precision (used by the gradient checks).

Broadcasting is deliberately not supported except for the scalar-with-tensor
case: shape mismatches are bugs here, not conveniences.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DtypeError(TypeError):
    """Operand dtypes disagree (no implicit promotion)."""


class TapeError(RuntimeError):
    """Backward was asked to replay a tape that is unavailable or spent."""


_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32


def set_default_dtype(name):
    """Set the storage dtype for tensors created without an explicit dtype.

    ``"float32"`` is the normal mode; ``"float64"`` exists so gradient
    checks can run at tolerances where finite differences are trustworthy.
    """
    global _default_dtype
    if name not in _DTYPES:
        raise DtypeError(f"unsupported dtype {name!r}; expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def default_dtype():
    return np.dtype(_default_dtype).name


class _Tape:
    __slots__ = ("entries", "consumed")

    def __init__(self):
        self.entries = []
        self.consumed = False


class _State(threading.local):
    def __init__(self):
        self.tape = _Tape()
        self.grad_enabled = True


_state = _State()


def current_tape():
    return _state.tape


@contextmanager
def no_grad():
    """Disable tape recording within the block (pure numpy evaluation)."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """An ndarray plus an optional gradient buffer.

    Leaves created with ``requires_grad=True`` are parameters: their ``.grad``
    accumulates across backward calls until explicitly zeroed. Tensors
    produced by ops inherit requires_grad from their inputs.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape", "_op")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if dtype is None:
            dt = _default_dtype
        else:
            if dtype not in _DTYPES:
                raise DtypeError(f"unsupported dtype {dtype!r}")
            dt = _DTYPES[dtype]
        self.data = np.asarray(data, dtype=dt)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._tape = None
        self._op = None

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
        return float(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad}{tag})"

    # Arithmetic sugar; scalars on either side are fine, tensors must match shape.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)


def _record(out, inputs, op, backward_fn):
    """Attach ``out`` to the tape if any input needs gradient."""
    if not _state.grad_enabled:
        return out
    if not any(t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    out._tape = _state.tape
    out._op = op
    _state.tape.entries.append((out, backward_fn))
    return out


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.integer, np.floating)):
        return Tensor(np.asarray(x, dtype=like.dtype))
    raise TypeError(f"cannot use {type(x).__name__} as a tensor operand")


def _check_same_dtype(op, a, b):
    if a.data.dtype != b.data.dtype:
        raise DtypeError(f"{op}: dtype mismatch {a.data.dtype.name} vs {b.data.dtype.name}")


def _binary_shapes(op, a, b):
    """Validate shapes for a binary op; returns True if b is the scalar side,
    False if a is, None if both sides have the full shape."""
    if a.data.shape == b.data.shape:
        return None
    if b.data.size == 1:
        return True
    if a.data.size == 1:
        return False
    raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def _scalar_reduce(g, target):
    """Reduce a full-shape gradient onto a one-element operand."""
    return np.asarray(g.sum(), dtype=g.dtype).reshape(target.data.shape)


def backward(loss):
    """Run reverse-mode accumulation from a scalar ``loss``.

    Consumes the tape the loss was recorded on: a second backward through the
    same graph raises ``TapeError``. A fresh tape is installed for subsequent
    ops.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    tape = loss._tape
    if tape is None:
        if loss.requires_grad:
            loss._accum(np.ones_like(loss.data))
            return
        raise TapeError("loss is a constant: nothing to differentiate")
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward call")
    if tape is not _state.tape:
        raise TapeError("loss belongs to a tape that is no longer current")

    loss._accum(np.ones_like(loss.data))
    for out, backward_fn in reversed(tape.entries):
        if out.grad is not None:
            backward_fn(out.grad)
    tape.consumed = True
    _state.tape = _Tape()


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    _check_same_dtype("add", a, b)
    scalar_side = _binary_shapes("add", a, b)
    out = Tensor(a.data + b.data)

    def bwd(g):
        if a.requires_grad:
            a._accum(_scalar_reduce(g, a) if scalar_side is False else g)
        if b.requires_grad:
            b._accum(_scalar_reduce(g, b) if scalar_side is True else g)

    return _record(out, (a, b), "add", bwd)


def sub(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    _check_same_dtype("sub", a, b)
    scalar_side = _binary_shapes("sub", a, b)
    out = Tensor(a.data - b.data)

    def bwd(g):
        if a.requires_grad:
            a._accum(_scalar_reduce(g, a) if scalar_side is False else g)
        if b.requires_grad:
            b._accum(-(_scalar_reduce(g, b) if scalar_side is True else g))

    return _record(out, (a, b), "sub", bwd)


def neg(a):
    out = Tensor(-a.data)

    def bwd(g):
        if a.requires_grad:
            a._accum(-g)

    return _record(out, (a,), "neg", bwd)


def mul(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    _check_same_dtype("mul", a, b)
    scalar_side = _binary_shapes("mul", a, b)
    out = Tensor(a.data * b.data)

    def bwd(g):
        if a.requires_grad:
            ga = g * b.data
            a._accum(_scalar_reduce(ga, a) if scalar_side is False else ga)
        if b.requires_grad:
            gb = g * a.data
            b._accum(_scalar_reduce(gb, b) if scalar_side is True else gb)

    return _record(out, (a, b), "mul", bwd)


def relu(a):
    out = Tensor(np.maximum(a.data, 0.0))

    def bwd(g):
        if a.requires_grad:
            a._accum(g * (a.data > 0.0))

    return _record(out, (a,), "relu", bwd)


def sigmoid(a):
    """Logistic function, computed sign-split so large |x| cannot overflow.

    For x >= 0 use 1/(1+exp(-x)); for x < 0 use exp(x)/(1+exp(x)). Both
    branches only ever exponentiate non-positive values, so the op is finite
    and monotone out to |x| = 1e3 and beyond.
    """
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = Tensor(s)

    def bwd(g):
        if a.requires_grad:
            a._accum(g * s * (1.0 - s))

    return _record(out, (a,), "sigmoid", bwd)


def abs_(a):
    out = Tensor(np.abs(a.data))

    def bwd(g):
        if a.requires_grad:
            a._accum(g * np.sign(a.data))

    return _record(out, (a,), "abs", bwd)


def square(a):
    out = Tensor(np.square(a.data))

    def bwd(g):
        if a.requires_grad:
            a._accum(g * (2.0 * a.data))

    return _record(out, (a,), "square", bwd)


# ---------------------------------------------------------------------------
# reductions and shape ops


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False):
    axes = _axis_tuple(axis, a.data.ndim)
    out = Tensor(a.data.sum(axis=axes, keepdims=keepdims))

    def bwd(g):
        if not a.requires_grad:
            return
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        a._accum(np.broadcast_to(g, a.data.shape).copy())

    return _record(out, (a,), "sum", bwd)


def mean(a, axis=None, keepdims=False):
    axes = _axis_tuple(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    out = Tensor(a.data.mean(axis=axes, keepdims=keepdims))

    def bwd(g):
        if not a.requires_grad:
            return
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        a._accum(np.broadcast_to(g, a.data.shape) / count)

    return _record(out, (a,), "mean", bwd)


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty input list")
    first = tensors[0]
    for t in tensors[1:]:
        _check_same_dtype("concat", first, t)
        if t.data.ndim != first.data.ndim:
            raise ShapeError(f"concat: rank mismatch {first.data.shape} vs {t.data.shape}")
        for ax in range(first.data.ndim):
            if ax != axis % first.data.ndim and t.data.shape[ax] != first.data.shape[ax]:
                raise ShapeError(f"concat: shape mismatch off axis {axis}: {first.data.shape} vs {t.data.shape}")
    ax = axis % first.data.ndim
    out = Tensor(np.concatenate([t.data for t in tensors], axis=ax))
    sizes = [t.data.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return _record(out, tuple(tensors), "concat", bwd)


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape))

    def bwd(g):
        if a.requires_grad:
            a._accum(g.reshape(a.data.shape))

    return _record(out, (a,), "reshape", bwd)


def transpose(a, axes=None):
    perm = tuple(axes) if axes is not None else tuple(reversed(range(a.data.ndim)))
    out = Tensor(a.data.transpose(perm))
    inv = np.argsort(perm)

    def bwd(g):
        if a.requires_grad:
            a._accum(g.transpose(inv))

    return _record(out, (a,), "transpose", bwd)


def narrow(a, axis, start, length):
    """Contiguous slice ``[start, start+length)`` along one axis."""
    ax = axis % a.data.ndim
    if start < 0 or start + length > a.data.shape[ax]:
        raise ShapeError(
            f"narrow: [{start}, {start + length}) out of bounds for axis {ax} of shape {a.data.shape}"
        )
    idx = [slice(None)] * a.data.ndim
    idx[ax] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(a.data[idx].copy())

    def bwd(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[idx] = g
            a._accum(buf)

    return _record(out, (a,), "narrow", bwd)


def crop_nchw(a, n, y0, y1, x0, x1):
    """Extract one sample's spatial window from an NCHW batch in a single op.

    Equivalent to three chained narrows but cheaper on the tape; used by the
    region cropping path where many small crops are taken per batch.
    """
    N, C, H, W = a.data.shape
    if not (0 <= n < N and 0 <= y0 < y1 <= H and 0 <= x0 < x1 <= W):
        raise ShapeError(f"crop_nchw: window n={n} y=[{y0},{y1}) x=[{x0},{x1}) out of bounds for {a.data.shape}")
    out = Tensor(a.data[n : n + 1, :, y0:y1, x0:x1].copy())

    def bwd(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[n : n + 1, :, y0:y1, x0:x1] = g
            a._accum(buf)

    return _record(out, (a,), "crop_nchw", bwd)


def gather(a, index):
    """Pick elements of a 1-D tensor at integer positions (duplicates allowed)."""
    if a.data.ndim != 1:
        raise ShapeError(f"gather: expected a 1-D tensor, got shape {a.data.shape}")
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1:
        raise ShapeError("gather: index must be 1-D")
    if index.size and (index.min() < 0 or index.max() >= a.data.shape[0]):
        raise ShapeError(f"gather: index out of range for length {a.data.shape[0]}")
    out = Tensor(a.data[index])

    def bwd(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, index, g)
            a._accum(buf)

    return _record(out, (a,), "gather", bwd)


# ---------------------------------------------------------------------------
# dense / convolution / pooling / resize


def linear(x, w, b=None):
    """Affine map: x (N, F_in) @ w (F_in, F_out) + b (F_out,)."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"linear: expected 2-D x and w, got {x.data.shape} and {w.data.shape}")
    if x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"linear: inner dims disagree: {x.data.shape} vs {w.data.shape}")
    _check_same_dtype("linear", x, w)
    y = x.data @ w.data
    if b is not None:
        if b.data.shape != (w.data.shape[1],):
            raise ShapeError(f"linear: bias shape {b.data.shape} != ({w.data.shape[1]},)")
        y = y + b.data
    out = Tensor(y)
    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g):
        if x.requires_grad:
            x._accum(g @ w.data.T)
        if w.requires_grad:
            w._accum(x.data.T @ g)
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=0))

    return _record(out, inputs, "linear", bwd)


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D cross-correlation: x (N,Cin,H,W), w (Cout,Cin,K,K), b (Cout,).

    Forward lowers the padded input to columns (im2col) so the whole conv is
    one matmul; backward reuses the columns for the weight gradient and
    scatters the input gradient back tap by tap (K*K strided adds).
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected NCHW x and OIKK w, got {x.data.shape} and {w.data.shape}")
    N, Cin, H, W = x.data.shape
    Cout, Cw, Kh, Kw = w.data.shape
    if Cw != Cin:
        raise ShapeError(f"conv2d: channel mismatch x has {Cin}, w expects {Cw}")
    if Kh != Kw:
        raise ShapeError(f"conv2d: only square kernels supported, got {Kh}x{Kw}")
    _check_same_dtype("conv2d", x, w)
    K, s, p = Kh, int(stride), int(padding)
    if H + 2 * p < K or W + 2 * p < K:
        raise ShapeError(f"conv2d: kernel {K} too large for padded input {H + 2 * p}x{W + 2 * p}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (K, K), axis=(2, 3))[:, :, ::s, ::s]
    N_, _, Ho, Wo, _, _ = win.shape
    # (N, Ho, Wo, Cin, K, K) -> rows of length Cin*K*K, matching w.reshape(Cout, -1)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, Cin * K * K)
    wmat = w.data.reshape(Cout, -1)
    y = cols @ wmat.T
    if b is not None:
        if b.data.shape != (Cout,):
            raise ShapeError(f"conv2d: bias shape {b.data.shape} != ({Cout},)")
        y = y + b.data
    out = Tensor(y.reshape(N, Ho, Wo, Cout).transpose(0, 3, 1, 2))
    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gcols = g.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, Cout)
        if w.requires_grad:
            w._accum((gcols.T @ cols).reshape(w.data.shape))
        if b is not None and b.requires_grad:
            b._accum(gcols.sum(axis=0))
        if x.requires_grad:
            gx_cols = (gcols @ wmat).reshape(N, Ho, Wo, Cin, K, K)
            gxp = np.zeros_like(xp)
            for i in range(K):
                for j in range(K):
                    gxp[:, :, i : i + s * Ho : s, j : j + s * Wo : s] += gx_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            x._accum(gxp[:, :, p : p + H, p : p + W] if p else gxp)

    return _record(out, inputs, "conv2d", bwd)


def max_pool2d(x, kernel, stride=None):
    """Max pooling over kernel x kernel windows; stride defaults to kernel."""
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2d: expected NCHW, got {x.data.shape}")
    k = int(kernel)
    s = int(stride) if stride is not None else k
    N, C, H, W = x.data.shape
    if H < k or W < k:
        raise ShapeError(f"max_pool2d: kernel {k} too large for input {H}x{W}")
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    N_, C_, Ho, Wo, _, _ = win.shape
    flat = win.reshape(N, C, Ho, Wo, k * k)
    arg = flat.argmax(axis=-1)
    out = Tensor(np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0])

    def bwd(g):
        if not x.requires_grad:
            return
        buf = np.zeros_like(x.data)
        oy, ox = np.meshgrid(np.arange(Ho), np.arange(Wo), indexing="ij")
        iy = oy * s + arg // k  # (N,C,Ho,Wo) row of the winning element
        ix = ox * s + arg % k
        n_idx = np.arange(N)[:, None, None, None]
        c_idx = np.arange(C)[None, :, None, None]
        np.add.at(buf, (n_idx, c_idx, iy, ix), g)
        x._accum(buf)

    return _record(out, (x,), "max_pool2d", bwd)


def resize_bilinear(x, out_h, out_w):
    """Bilinear resize of an NCHW tensor with align-corners sampling.

    Source coordinates are ``i * (H-1)/(out_h-1)`` (0 when the output axis has
    a single element), so the four corner pixels map exactly to corners and
    the op is linear in the input — its gradient is the transposed
    interpolation, accumulated onto the four neighbours of each output pixel.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"resize_bilinear: expected NCHW, got {x.data.shape}")
    N, C, H, W = x.data.shape
    out_h, out_w = int(out_h), int(out_w)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize_bilinear: bad output size {out_h}x{out_w}")

    def _coords(n_in, n_out):
        if n_out == 1 or n_in == 1:
            lo = np.zeros(n_out, dtype=np.int64)
            return lo, lo.copy(), np.zeros(n_out, dtype=x.data.dtype)
        src = np.arange(n_out, dtype=np.float64) * ((n_in - 1) / (n_out - 1))
        lo = np.floor(src).astype(np.int64)
        lo = np.minimum(lo, n_in - 2)
        frac = (src - lo).astype(x.data.dtype)
        return lo, lo + 1, frac

    y0, y1, fy = _coords(H, out_h)
    x0, x1, fx = _coords(W, out_w)
    wy0, wy1 = (1.0 - fy)[:, None], fy[:, None]
    wx0, wx1 = (1.0 - fx)[None, :], fx[None, :]

    d = x.data
    vals = (
        d[:, :, y0[:, None], x0[None, :]] * (wy0 * wx0)
        + d[:, :, y0[:, None], x1[None, :]] * (wy0 * wx1)
        + d[:, :, y1[:, None], x0[None, :]] * (wy1 * wx0)
        + d[:, :, y1[:, None], x1[None, :]] * (wy1 * wx1)
    )
    out = Tensor(vals)

    def bwd(g):
        if not x.requires_grad:
            return
        buf = np.zeros_like(x.data)
        for ys, wy in ((y0, wy0), (y1, wy1)):
            for xs, wx in ((x0, wx0), (x1, wx1)):
                np.add.at(buf, (slice(None), slice(None), ys[:, None], xs[None, :]), g * (wy * wx))
        x._accum(buf)

    return _record(out, (x,), "resize_bilinear", bwd)


# public aliases matching the exported op names
abs = abs_  # noqa: A001 - intentional module-level name
sum = sum_  # noqa: A001
