"""Dense tensors with tape-based reverse-mode differentiation.

Only the operators the GaitSet graph needs are provided: 2-D convolution,
2x2 max pooling, affine maps over the last axis, leaky ReLU, elementwise
arithmetic with broadcasting, and max/mean/median/sum reductions.

A ``Tensor`` wraps a numpy array. When gradient recording is enabled and an
operand requires a gradient, the result remembers its parents and a closure
that maps the output gradient onto them. ``Tensor.backward`` replays these
closures in reverse topological order, visiting each node once and summing
contributions for values consumed several times.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = ""

    # -- basic properties -------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- graph ------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf.

        Gradients of intermediate nodes are released once propagated.
        """
        if grad is None:
            if self.data.size != 1:
                raise ConfigError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.shape != self.shape:
            raise ConfigError(f"seed gradient shape {grad.shape} != {self.shape}")

        if not self.requires_grad:
            return
        order = _topological_order(self)
        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            node._backward(node.grad)
            if node._parents:
                node.grad = None

    # -- operator sugar -----------------------------------------------------
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
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.dtype)
    if g.shape != t.shape:
        g = np.broadcast_to(g, t.shape)
    if t.grad is None:
        t.grad = g if g.flags.writeable else g.copy()
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(sorted(a % ndim for a in axis))
    if len(set(axes)) != len(axes):
        raise ConfigError(f"repeated axis in {axis}")
    return axes


# -- elementwise arithmetic ---------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(a.data / b.data, (a, b), backward, "div")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    """``x`` where positive, ``slope * x`` elsewhere (including at zero)."""
    positive = x.data > 0
    k = x.dtype.type(slope)
    out = x.data * k
    np.copyto(out, x.data, where=positive)

    def backward(g):
        d = g * g.dtype.type(slope)
        np.copyto(d, g, where=positive)
        _accumulate(x, d)

    return _result(out, (x,), backward, "leaky_relu")


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def sqrt(x: Tensor) -> Tensor:
    """Square root whose gradient is defined as 0 where the input is 0."""
    if np.any(x.data < 0):
        raise NumericError("sqrt of a negative value")
    root = np.sqrt(x.data)

    def backward(g):
        safe = np.where(root > 0, root, 1)
        _accumulate(x, np.where(root > 0, g / (2 * safe), 0))

    return _result(root, (x,), backward, "sqrt")


# -- shape manipulation -------------------------------------------------------
def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), backward, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(x, g.transpose(inverse))

    return _result(x.data.transpose(axes), (x,), backward, "transpose")


def broadcast_to(x: Tensor, shape) -> Tensor:
    def backward(g):
        _accumulate(x, _unbroadcast(g, x.shape))

    return _result(np.broadcast_to(x.data, shape), (x,), backward, "broadcast_to")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x: Tensor, index) -> Tensor:
    if not _is_basic_index(index):
        raise ConfigError("only basic (slice/int) indexing is differentiable")

    def backward(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        full[index] = g
        _accumulate(x, full)

    return _result(x.data[index], (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ConfigError("concat of an empty list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    axis = axis % data.ndim
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(sl)])

    return _result(data, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ConfigError("stack of an empty list")
    data = np.stack([t.data for t in tensors], axis=axis)
    axis = axis % data.ndim

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                _accumulate(t, np.take(g, i, axis=axis))

    return _result(data, tensors, backward, "stack")


# -- reductions ---------------------------------------------------------------
def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    data = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _result(np.asarray(data), (x,), backward, "sum")


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Mean over ``axis``, accumulated in double precision."""
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise ConfigError("mean over an empty extent")
    data = (x.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64) / count).astype(x.dtype)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(x, np.broadcast_to(g / g.dtype.type(count), x.shape))

    return _result(np.asarray(data), (x,), backward, "mean")


def reduce_max(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum over ``axis``; the gradient goes to the first maximal element
    in row-major order of the reduced axes."""
    axes = _normalize_axes(axis, x.ndim)
    if any(x.shape[a] == 0 for a in axes):
        raise ConfigError("max over an empty extent")
    if len(axes) == 1:
        (ax,) = axes
        idx = np.argmax(x.data, axis=ax, keepdims=True)
        val = np.take_along_axis(x.data, idx, axis=ax)

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, ax)
            full = np.zeros(x.shape, dtype=x.dtype)
            np.put_along_axis(full, idx, g, axis=ax)
            _accumulate(x, full)

        return _result(val if keepdims else np.squeeze(val, ax), (x,), backward, "max")

    k = len(axes)
    moved = np.moveaxis(x.data, axes, range(x.ndim - k, x.ndim))
    kept_shape = moved.shape[: x.ndim - k]
    flat = moved.reshape(kept_shape + (-1,))
    idx = np.argmax(flat, axis=-1)[..., None]
    val = np.take_along_axis(flat, idx, axis=-1)[..., 0]
    out = val
    if keepdims:
        out = np.expand_dims(val, axes)

    def backward(g):
        g = g.reshape(kept_shape)
        full = np.zeros(flat.shape, dtype=x.dtype)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        full = full.reshape(moved.shape)
        _accumulate(x, np.moveaxis(full, range(x.ndim - k, x.ndim), axes))

    return _result(np.asarray(out), (x,), backward, "max")


def reduce_median(x: Tensor, axis: int) -> Tensor:
    """Median along one axis.

    Even extents give the mean of the two middle order statistics, with the
    gradient split equally between them; odd extents route the whole
    gradient to the middle element.
    """
    ax = axis % x.ndim
    n = x.shape[ax]
    if n == 0:
        raise ConfigError("median over an empty extent")
    order = np.argsort(x.data, axis=ax, kind="stable")
    hi = np.take(order, [n // 2], axis=ax)
    if n % 2:
        picks = [(hi, 1.0)]
        val = np.take_along_axis(x.data, hi, axis=ax)
    else:
        lo = np.take(order, [n // 2 - 1], axis=ax)
        picks = [(lo, 0.5), (hi, 0.5)]
        val = (np.take_along_axis(x.data, lo, axis=ax) + np.take_along_axis(x.data, hi, axis=ax)) / 2

    def backward(g):
        g = np.expand_dims(g, ax)
        full = np.zeros(x.shape, dtype=x.dtype)
        for idx, w in picks:
            # the two picked positions are distinct, so plain assignment suffices
            np.put_along_axis(full, idx, g * w, axis=ax)
        _accumulate(x, full)

    return _result(np.squeeze(val, ax), (x,), backward, "median")


# -- layers -------------------------------------------------------------------
# floats per column-matrix chunk in conv2d (about 1 MB in float32)
_COLUMN_BUDGET = 1 << 18


def _pair_int(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x: Tensor, kernel: Tensor, padding=None) -> Tensor:
    """Cross-correlation of ``x[n, c, h, w]`` with ``kernel[o, c, kh, kw]``.

    ``padding=None`` selects "same" zero padding, which requires odd kernels.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ConfigError("conv2d expects 4-D input and kernel")
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if min(x.shape) == 0 or min(kernel.shape) == 0:
        raise ConfigError(f"conv2d on zero-extent operand {x.shape} / {kernel.shape}")
    if ci != c:
        raise ConfigError(f"conv2d channel mismatch: input has {c}, kernel expects {ci}")
    if padding is None:
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError("same-padding needs odd kernel extents")
        ph, pw = kh // 2, kw // 2
    else:
        ph, pw = _pair_int(padding)
    oh, ow = h + 2 * ph - kh + 1, w + 2 * pw - kw + 1
    if oh <= 0 or ow <= 0:
        raise ConfigError("conv2d kernel larger than padded input")

    ckk = c * kh * kw
    wmat = kernel.data.reshape(o, ckk)
    dtype = np.result_type(x.data, kernel.data)
    pointwise = kh == 1 and kw == 1 and ph == 0 and pw == 0
    if pointwise:
        cols = x.data.reshape(n, c, h * w)
        out = np.matmul(wmat, cols).reshape(n, o, oh, ow)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
        # the column matrix is 9-25x the input; build it a few samples at a
        # time so it stays in cache, and rebuild it in the backward pass
        step = max(1, _COLUMN_BUDGET // (ckk * oh * ow))

        def columns(a: int) -> np.ndarray:
            # [b, c, kh, kw, oh, ow]: image rows stay contiguous through the copy
            win = sliding_window_view(xp[a : a + step], (kh, kw), axis=(2, 3)).transpose(0, 1, 4, 5, 2, 3)
            return win.reshape(-1, ckk, oh * ow)

        out = np.empty((n, o, oh * ow), dtype=dtype)
        for a in range(0, n, step):
            np.matmul(wmat, columns(a), out=out[a : a + step])
        out = out.reshape(n, o, oh, ow)

    def backward(g):
        g3 = g.reshape(n, o, oh * ow)
        if pointwise:
            if kernel.requires_grad:
                dw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0)
                _accumulate(kernel, dw.reshape(o, c, kh, kw))
            if x.requires_grad:
                _accumulate(x, np.matmul(wmat.T, g3).reshape(n, c, h, w))
            return
        dw = np.zeros((o, ckk), dtype=dtype) if kernel.requires_grad else None
        dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype) if x.requires_grad else None
        for a in range(0, n, step):
            ga = g3[a : a + step]
            if dw is not None:
                dw += np.matmul(ga, columns(a).transpose(0, 2, 1)).sum(axis=0)
            if dxp is not None:
                taps = np.matmul(wmat.T, ga).reshape(-1, c, kh, kw, oh, ow)
                d = dxp[a : a + step]
                for i in range(kh):
                    for j in range(kw):
                        d[:, :, i : i + oh, j : j + ow] += taps[:, :, i, j]
        if dw is not None:
            _accumulate(kernel, dw.reshape(o, c, kh, kw))
        if dxp is not None:
            _accumulate(x, dxp[:, :, ph : ph + h, pw : pw + w])

    return _result(out, (x, kernel), backward, "conv2d")


def max_pool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping ``window x window`` max pooling over the last two axes.

    Ties route the gradient to the first maximal cell in row-major order.
    """
    *lead, h, w = x.shape
    if h % window or w % window:
        raise ConfigError(f"max_pool2d: extents {h}x{w} not divisible by {window}")
    offsets = [(i, j) for i in range(window) for j in range(window)]

    def view(arr, i, j):
        return arr[..., i::window, j::window]

    out = view(x.data, 0, 0).copy()
    for i, j in offsets[1:]:
        np.maximum(out, view(x.data, i, j), out=out)

    def backward(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        claimed = np.zeros(out.shape, dtype=bool)
        for i, j in offsets:
            hit = view(x.data, i, j) == out
            hit &= ~claimed
            claimed |= hit
            view(full, i, j)[...] = np.where(hit, g, 0)
        _accumulate(x, full)

    return _result(out, (x,), backward, "max_pool2d")


def affine(x: Tensor, weight: Tensor) -> Tensor:
    """Matrix product over the last axis, without bias.

    ``weight`` is ``[d_in, d_out]``, or ``[g, d_in, d_out]`` to apply ``g``
    independent maps to the ``g`` rows of an input shaped ``[..., g, d_in]``.
    """
    if weight.ndim == 2:
        d_in, d_out = weight.shape
        if x.shape[-1] != d_in:
            raise ConfigError(f"affine: input extent {x.shape[-1]} != weight rows {d_in}")
        lead = x.shape[:-1]
        flat = x.data.reshape(-1, d_in)
        out = (flat @ weight.data).reshape(*lead, d_out)

        def backward(g):
            g2 = g.reshape(-1, d_out)
            if x.requires_grad:
                _accumulate(x, (g2 @ weight.data.T).reshape(x.shape))
            if weight.requires_grad:
                _accumulate(weight, flat.T @ g2)

        return _result(out, (x, weight), backward, "affine")

    if weight.ndim != 3:
        raise ConfigError("affine weight must be 2-D or 3-D")
    groups, d_in, d_out = weight.shape
    if x.ndim < 2 or x.shape[-2:] != (groups, d_in):
        raise ConfigError(f"grouped affine: input {x.shape} does not end in ({groups}, {d_in})")
    lead = x.shape[:-2]
    xg = x.data.reshape(-1, groups, d_in).transpose(1, 0, 2)
    out = np.matmul(xg, weight.data).transpose(1, 0, 2).reshape(*lead, groups, d_out)

    def backward(g):
        gg = g.reshape(-1, groups, d_out).transpose(1, 0, 2)
        if x.requires_grad:
            dx = np.matmul(gg, weight.data.transpose(0, 2, 1))
            _accumulate(x, dx.transpose(1, 0, 2).reshape(x.shape))
        if weight.requires_grad:
            _accumulate(weight, np.matmul(xg.transpose(0, 2, 1), gg))

    return _result(out, (x, weight), backward, "affine")


# -- numeric hygiene and verification ---------------------------------------
def check_finite(value, what: str = "tensor") -> None:
    data = value.data if isinstance(value, Tensor) else np.asarray(value)
    if not np.all(np.isfinite(data)):
        bad = int(np.size(data) - np.count_nonzero(np.isfinite(data)))
        raise NumericError(f"{what}: {bad} non-finite value(s) of {np.size(data)}")


def _relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    return np.where(scale < floor, diff, diff / np.where(scale < floor, 1.0, scale))


def numeric_gradient(f: Callable[[Tensor], Tensor], point: np.ndarray, step: float) -> np.ndarray:
    base = np.array(point, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f(Tensor(base.copy())).item()
            flat[i] = orig - step
            down = f(Tensor(base.copy())).item()
            flat[i] = orig
            grad.reshape(-1)[i] = (up - down) / (2 * step)
    return grad


def grad_check(f: Callable[[Tensor], Tensor], point, step: float = 1e-6) -> float:
    """Worst componentwise relative error between the reverse-mode gradient
    of scalar ``f`` at ``point`` and central finite differences.

    Runs in double precision. Components where both gradients are below
    1e-8 in magnitude contribute their absolute error instead.
    """
    if not 1e-7 <= step <= 1e-4:
        raise ConfigError(f"finite-difference step {step} outside [1e-7, 1e-4]")
    raw = point.data if isinstance(point, Tensor) else point
    x = Tensor(np.array(raw, dtype=np.float64), requires_grad=True)
    out = f(x)
    if out.data.size != 1:
        raise ConfigError(f"grad_check needs a scalar function, got shape {out.shape}")
    if out.requires_grad:
        out.backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    numeric = numeric_gradient(f, x.data, step)
    if analytic.size == 0:
        return 0.0
    return float(_relative_errors(analytic, numeric).max())


def parameters_grad_check(
    loss: Callable[[], Tensor],
    params: Iterable[Tensor],
    step: float = 1e-6,
) -> float:
    """Gradient check of a scalar closure against several leaf tensors at once.

    Each leaf is perturbed in place, so ``loss`` must read the leaves on
    every call.
    """
    params = list(params)
    for p in params:
        p.grad = None
    out = loss()
    if out.data.size != 1:
        raise ConfigError("parameters_grad_check needs a scalar loss")
    out.backward()
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = loss().item()
                flat[i] = orig - step
                down = loss().item()
                flat[i] = orig
                numeric.reshape(-1)[i] = (up - down) / (2 * step)
        if analytic.size:
            worst = max(worst, float(_relative_errors(analytic, numeric).max()))
    return worst


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)
