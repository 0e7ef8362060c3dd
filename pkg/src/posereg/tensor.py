"""Dense tensors with tape-based reverse-mode differentiation.

Every op builds a node that remembers its parents and a closure computing
the parents' gradient contributions.  ``Tensor.backward`` walks the graph
once in reverse topological order.  Layout is NCHW everywhere.
"""
from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")
    # make ``ndarray + Tensor`` defer to Tensor.__radd__ instead of broadcasting
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    # -- introspection ---------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    # -- graph -----------------------------------------------------------
    def backward(self, grad=None):
        """Populate ``.grad`` on every leaf reachable from this scalar."""
        if self.data.size != 1 and grad is None:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        if grad is None:
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype).reshape(self.shape)}
        for node in reversed(order):
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
            # the tape is single-use
            node._backward = None
            node._parents = ()

    # -- operator sugar --------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)

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


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        return Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite result in {op}")


def _make(data, parents, backward, op, check=True):
    if check:
        _check_finite(data, op)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out.op = op
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary_operands(a, b, op):
    a = as_tensor(a, None if not isinstance(b, Tensor) else b.dtype)
    b = as_tensor(b, a.dtype)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None
    return a, b


# -- elementwise -------------------------------------------------------------

def add(a, b):
    a, b = _binary_operands(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = _binary_operands(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = _binary_operands(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = _binary_operands(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), backward, "div")


def scale(a, c):
    a = as_tensor(a)
    c = float(c)

    def backward(g):
        return (g * c,)

    return _make(a.data * c, (a,), backward, "scale")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _make(out, (a,), backward, "exp")


def log(a):
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _make(out, (a,), backward, "log")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _make(np.maximum(a.data, 0), (a,), backward, "relu", check=False)


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    # split by sign so neither branch overflows
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + z), z / (1 + z)).astype(a.dtype)

    def backward(g):
        return (g * out * (1 - out),)

    return _make(out, (a,), backward, "sigmoid")


def absolute(a):
    """|a| with subgradient 0 at 0."""
    a = as_tensor(a)
    sign = np.sign(a.data)

    def backward(g):
        return (g * sign,)

    return _make(np.abs(a.data), (a,), backward, "abs", check=False)


def square(a):
    a = as_tensor(a)

    def backward(g):
        return (2 * g * a.data,)

    return _make(a.data * a.data, (a,), backward, "square")


def clip(a, lo, hi):
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        return (g * inside,)

    return _make(np.clip(a.data, lo, hi), (a,), backward, "clip", check=False)


def elementwise(op, a, b=None):
    """Dispatch by name; ``scale`` takes a python number as ``b``."""
    unary = {"exp": exp, "log": log, "relu": relu, "sigmoid": sigmoid}
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    if op in unary:
        return unary[op](a)
    if op in binary:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return binary[op](a, b)
    if op == "scale":
        return scale(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


# -- reductions --------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def _expand(g, axes, keepdims):
    return g if keepdims else np.expand_dims(g, axes)


def reduce_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)

    def backward(g):
        return (np.broadcast_to(_expand(g, axes, keepdims), a.shape).copy(),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward, "sum", check=False)


def reduce_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1

    def backward(g):
        return (np.broadcast_to(_expand(g, axes, keepdims) / n, a.shape).copy(),)

    return _make(a.data.mean(axis=axes, keepdims=keepdims), (a,), backward, "mean", check=False)


def reduce_max(a, axis=None, keepdims=False):
    """Max reduction; ties send the gradient to the first maximum in row-major order."""
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    keep = [i for i in range(a.ndim) if i not in axes]
    # move reduced axes last and flatten them so argmax picks the row-major first
    moved = np.transpose(a.data, keep + list(axes))
    kshape = moved.shape[: len(keep)]
    flat = moved.reshape(kshape + (-1,))
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    if keepdims:
        out = np.expand_dims(out, axes)

    def backward(g):
        g = np.asarray(g).reshape(kshape)
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gmoved = gflat.reshape(moved.shape)
        return (np.transpose(gmoved, np.argsort(keep + list(axes))),)

    return _make(out, (a,), backward, "max", check=False)


def reduce(op, a, axes=None):
    fns = {"sum": reduce_sum, "max": reduce_max, "mean": reduce_mean}
    if op not in fns:
        raise ValueError(f"unknown reduction {op!r}")
    return fns[op](a, axes)


# -- shape ops ---------------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), backward, "reshape", check=False)


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(a.data, axes), (a,), backward, "transpose", check=False)


def getitem(a, idx):
    a = as_tensor(a)

    basic = all(isinstance(k, (slice, int, type(Ellipsis), type(None)))
                for k in (idx if isinstance(idx, tuple) else (idx,)))

    def backward(g):
        out = np.zeros_like(a.data)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), backward, "getitem", check=False)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(data, tensors, backward, "concat", check=False)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    data = np.stack([t.data for t in tensors], axis=axis)
    return _make(data, tensors, backward, "stack", check=False)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


# -- convolution -------------------------------------------------------------

def conv_output_size(n, k, stride, padding):
    if padding == "same":
        return -(-n // stride)
    if padding == "valid":
        if n < k:
            raise ValueError(f"valid conv: input {n} smaller than kernel {k}")
        return (n - k) // stride + 1
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def _pads(n, k, stride, padding):
    if padding == "valid":
        return 0, 0
    out = conv_output_size(n, k, stride, padding)
    total = max((out - 1) * stride + k - n, 0)
    return total // 2, total - total // 2


def _pad_input(x, kh, kw, stride, padding):
    ph = _pads(x.shape[2], kh, stride, padding)
    pw = _pads(x.shape[3], kw, stride, padding)
    if ph == (0, 0) and pw == (0, 0):
        return x, ph, pw
    return np.pad(x, ((0, 0), (0, 0), ph, pw)), ph, pw


def conv2d(x, kernel, bias=None, stride=1, padding="same"):
    """Cross-correlation of NCHW input with an (O, C, kh, kw) kernel.

    Output spatial size is ``ceil(n / stride)`` for ``same`` padding and
    ``(n - k) // stride + 1`` for ``valid``.  Same padding splits the total
    pad with the extra row/column at the bottom/right.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError("conv2d expects NCHW input and OCHW kernel")
    if x.shape[1] != kernel.shape[1]:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    O, C, kh, kw = kernel.shape
    B, _, H, W = x.shape
    Ho = conv_output_size(H, kh, stride, padding)
    Wo = conv_output_size(W, kw, stride, padding)
    xp, ph, pw = _pad_input(x.data, kh, kw, stride, padding)
    # im2col rows are output pixels (NHWC order): one tall GEMM per call
    wmat = np.ascontiguousarray(kernel.data.transpose(2, 3, 1, 0)).reshape(kh * kw * C, O)
    xh = xp.transpose(0, 2, 3, 1)
    if kh == 1 and kw == 1 and stride == 1:
        cols = np.ascontiguousarray(xh).reshape(B * H * W, C)
    else:
        cols = np.empty((B, Ho, Wo, kh, kw, C), dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, i, j] = xh[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
        cols = cols.reshape(B * Ho * Wo, kh * kw * C)
    out = cols @ wmat
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data.astype(out.dtype, copy=False)
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))
    parents = [x, kernel] + ([bias] if bias is not None else [])

    def backward(g):
        gk = gx = None
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, O)
        if kernel.requires_grad:
            gk = (cols.T @ g2).reshape(kh, kw, C, O).transpose(3, 2, 0, 1)
        if x.requires_grad:
            gcols = g2 @ wmat.T
            if kh == 1 and kw == 1 and stride == 1:
                gxh = gcols.reshape(B, H, W, C)
            else:
                gcols = gcols.reshape(B, Ho, Wo, kh, kw, C)
                gxh = np.zeros((B,) + xh.shape[1:], dtype=gcols.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxh[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, :, :, i, j]
            gx = gxh.transpose(0, 3, 1, 2)[:, :, ph[0]:ph[0] + H, pw[0]:pw[0] + W]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, parents, backward, "conv2d")


def depthwise_conv2d(x, kernel, stride=1, padding="same"):
    """Per-channel spatial correlation; ``kernel`` has shape (C, kh, kw)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 3 or x.ndim != 4 or kernel.shape[0] != x.shape[1]:
        raise ValueError(f"depthwise_conv2d: need one kernel per channel, got {kernel.shape} for {x.shape}")
    C, kh, kw = kernel.shape
    B, _, H, W = x.shape
    Ho = conv_output_size(H, kh, stride, padding)
    Wo = conv_output_size(W, kw, stride, padding)
    xp, ph, pw = _pad_input(x.data, kh, kw, stride, padding)
    k = kernel.data
    out = np.zeros((B, C, Ho, Wo), dtype=np.result_type(xp, k))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] * k[None, :, i, j, None, None]

    def backward(g):
        gk = np.empty_like(k) if kernel.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None), slice(i, i + stride * Ho, stride), slice(j, j + stride * Wo, stride))
                if gk is not None:
                    gk[:, i, j] = np.einsum("bchw,bchw->c", g, xp[sl])
                if gxp is not None:
                    gxp[sl] += g * k[None, :, i, j, None, None]
        gx = None if gxp is None else gxp[:, :, ph[0]:ph[0] + H, pw[0]:pw[0] + W]
        return gx, gk

    return _make(out, (x, kernel), backward, "depthwise_conv2d")


def max_pool2d(x, size=2):
    """Non-overlapping max pooling; spatial dims must divide by ``size``."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    if H % size or W % size:
        raise ValueError(f"max_pool2d: {H}x{W} not divisible by {size}")
    blocks = x.data.reshape(B, C, H // size, size, W // size, size).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(B, C, H // size, W // size, size * size)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(B, C, H // size, W // size, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(B, C, H, W),)

    return _make(out, (x,), backward, "max_pool2d", check=False)


def upsample_nearest(x, factor=2):
    x = as_tensor(x)
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return _make(out, (x,), backward, "upsample_nearest", check=False)


def batch_norm(x, gamma, beta, mean=None, var=None, eps=1e-5):
    """Per-channel normalisation of NCHW input.

    With ``mean``/``var`` given the statistics are treated as constants
    (inference); otherwise batch statistics are used and differentiated
    through.  Returns ``(out, batch_mean, batch_var)``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = (0, 2, 3)
    training = mean is None
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
    g4 = gamma.data.reshape(1, -1, 1, 1)
    out = xhat * g4 + beta.data.reshape(1, -1, 1, 1)
    m = x.data.size // x.shape[1]

    def backward(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * g4
        if training:
            gx = (inv.reshape(1, -1, 1, 1) / m) * (
                m * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * inv.reshape(1, -1, 1, 1)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward, "batch_norm"), mean, var


# -- gradient checking -------------------------------------------------------

def finite_difference_check(f, x, h=1e-6, indices=None):
    """Max relative error between autodiff and central differences.

    ``f`` maps ``x`` to a scalar Tensor.  ``x`` must be a float64 leaf; its
    data is perturbed in place and restored.  ``indices`` optionally limits
    the check to a subset of flat element positions.  The error for one
    element is ``|a - n| / max(1, |a|, |n|)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.size != 1:
        raise ValueError("f must return a scalar")
    out.backward()
    analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()
    flat = x.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    worst = 0.0
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        numeric = (fp - fm) / (2 * h)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError("non-finite value during finite differences")
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]), abs(numeric))
        worst = max(worst, err)
    x.grad = None
    return worst
