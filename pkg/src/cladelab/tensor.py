"""Dense float tensors with reverse-mode autodiff over a small, fixed op set.

Values are stored as 32-bit floats by default. Moment accumulations (sums,
means, variances) always run in 64-bit before being cast back to the
storage dtype; matrix products run at the operand dtype, so building a
graph from float64 tensors gives 64-bit accumulation everywhere, which the
tighter gradient checks rely on. ``finite_diff_check`` always evaluates its
numeric probes in float64 regardless of the graph dtype.

Ops record onto a thread-local :class:`Tape` (define-by-run). With no tape
active, ops are plain numpy computations and retain nothing.
"""

import threading

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "backward",
    "add", "sub", "mul", "div", "neg",
    "relu", "leaky_relu", "tanh", "sqrt",
    "tsum", "tmean", "reshape", "concat", "affine",
    "linear", "conv2d", "upsample_nearest2x",
    "finite_diff_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A dense numpy array plus a gradient slot of identical shape."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # arithmetic sugar; scalars / arrays are promoted to constant tensors
    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    def __radd__(self, other):
        return add(_lift(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self.dtype))

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    def __rmul__(self, other):
        return mul(_lift(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _lift(other, self.dtype))

    def __neg__(self):
        return neg(self)


def _lift(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


_ACTIVE = threading.local()


def _tape_stack():
    stack = getattr(_ACTIVE, "stack", None)
    if stack is None:
        stack = []
        _ACTIVE.stack = stack
    return stack


class Tape:
    """Ordered record of ops from one forward pass, confined to one thread.

    Recording order is topological by construction: an op can only run after
    its inputs exist. ``backward`` walks the list once, in reverse.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()
        return False


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _record(out, inputs, backward_fn):
    """Register a backward closure if a tape is active and grads can flow."""
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape = _active_tape()
        if tape is not None:
            tape.nodes.append(_Node(out, inputs, backward_fn))
    return out


def backward(tape, loss):
    """Backpropagate from a scalar loss through every node on the tape.

    Gradient accumulation is additive, so a value feeding several ops
    receives the sum of all path contributions. Leaves marked trainable but
    unreachable from the loss end up with zero gradients. The tape is
    cleared afterwards.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    loss.grad = np.ones_like(loss.data)
    produced = set()
    leaves = []
    for node in tape.nodes:
        produced.add(id(node.out))
        for t in node.inputs:
            if t.requires_grad:
                leaves.append(t)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        grads = node.backward_fn(g)
        for t, dt in zip(node.inputs, grads):
            if dt is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += dt.astype(t.data.dtype, copy=False)
    for t in leaves:
        if id(t) not in produced and t.grad is None:
            t.grad = np.zeros_like(t.data)
    tape.nodes.clear()


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.data.shape} and {b.data.shape} do not broadcast")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), bwd)


def sub(a, b):
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(out, (a, b), bwd)


def mul(a, b):
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), bwd)


def div(a, b):
    _check_broadcast(a, b, "div")
    out = Tensor(a.data / b.data)

    def bwd(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _record(out, (a, b), bwd)


def neg(x):
    out = Tensor(-x.data)
    return _record(out, (x,), lambda g: (-g,))


def relu(x):
    out = Tensor(np.maximum(x.data, 0))
    mask = x.data > 0  # subgradient at 0 defined as 0

    def bwd(g):
        return (g * mask,)

    return _record(out, (x,), bwd)


def leaky_relu(x, slope=0.2):
    out = Tensor(np.where(x.data > 0, x.data, slope * x.data))
    factor = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)

    def bwd(g):
        return (g * factor,)

    return _record(out, (x,), bwd)


def tanh(x):
    y = np.tanh(x.data)
    out = Tensor(y)

    def bwd(g):
        return (g * (1.0 - y * y),)

    return _record(out, (x,), bwd)


def sqrt(x):
    y = np.sqrt(x.data)
    out = Tensor(y)

    def bwd(g):
        return (g * (0.5 / y),)

    return _record(out, (x,), bwd)


def affine(x, scale, shift):
    """Modulation step ``scale * x + shift``.

    Scale/shift broadcast either per channel ``(1, C, 1, 1)`` or with the
    full tensor shape.
    """
    return add(mul(x, scale), shift)


# ---------------------------------------------------------------------------
# reductions and shape ops


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis,)
    return tuple(axis)


def tsum(x, axis=None, keepdims=False):
    """Sum over ``axis`` with 64-bit accumulation."""
    axes = _axis_tuple(axis, x.data.ndim)
    val = x.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64)
    out = Tensor(np.asarray(val).astype(x.data.dtype))

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.data.shape).astype(x.data.dtype),)

    return _record(out, (x,), bwd)


def tmean(x, axis=None, keepdims=False):
    """Mean over ``axis`` with 64-bit accumulation."""
    axes = _axis_tuple(axis, x.data.ndim)
    n = 1
    for ax in axes:
        n *= x.data.shape[ax]
    val = x.data.mean(axis=axes, keepdims=keepdims, dtype=np.float64)
    out = Tensor(np.asarray(val).astype(x.data.dtype))

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.data.shape).astype(x.data.dtype),)

    return _record(out, (x,), bwd)


def reshape(x, shape):
    out = Tensor(x.data.reshape(shape))

    def bwd(g):
        return (g.reshape(x.data.shape),)

    return _record(out, (x,), bwd)


def concat(tensors, axis=1):
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record(out, tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# dense / spatial ops


def linear(x, weight, bias):
    """``x @ weight.T + bias`` for x of shape (N, D), weight (D_out, D)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[1]:
        raise ShapeError(
            f"linear: input {x.data.shape} incompatible with weight {weight.data.shape}")
    out = Tensor(x.data @ weight.data.T + bias.data)

    def bwd(g):
        dx = g @ weight.data
        dw = g.T @ x.data
        db = g.sum(axis=0)
        return dx, dw, db

    return _record(out, (x, weight, bias), bwd)


def _im2col(xd, k, stride, pad):
    n, c, h, w = xd.shape
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: {h}x{w} input too small for k={k}, pad={pad}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]             # (N, C, OH, OW, k, k)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k)
    return cols, oh, ow


def _corr(xd, wd, pad):
    """Stride-1 cross-correlation of xd (N,C,H,W) with wd (C_out,C,k,k)."""
    n, c, h, w = xd.shape
    c_out, _, k, _ = wd.shape
    cols, oh, ow = _im2col(xd, k, 1, pad)
    out = cols @ wd.reshape(c_out, c * k * k).T
    return np.ascontiguousarray(out.reshape(n, oh, ow, c_out).transpose(0, 3, 1, 2))


def conv2d(x, weight, bias=None, stride=1, pad=None):
    """2-D convolution in NCHW layout, odd kernel, stride 1 or 2.

    ``pad`` defaults to (k-1)//2 ("same" at stride 1, zero padding).
    Differentiable w.r.t. x, weight and bias. The input gradient at stride 1
    is computed as a correlation with the channel-swapped, spatially flipped
    kernel, so both directions run through the same im2col matmul.
    """
    n, c, h, w = x.data.shape
    c_out, c_in, kh, kw = weight.data.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {kh}x{kw}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    if c != c_in:
        raise ShapeError(
            f"conv2d: input has {c} channels but weight expects {c_in}")
    k = kh
    if pad is None:
        pad = (k - 1) // 2
    cols, oh, ow = _im2col(x.data, k, stride, pad)
    wmat = weight.data.reshape(c_out, c * k * k)
    out_mat = cols @ wmat.T
    if bias is not None:
        out_mat += bias.data
    out_data = out_mat.reshape(n, oh, ow, c_out).transpose(0, 3, 1, 2)
    out = Tensor(np.ascontiguousarray(out_data))

    def bwd(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, c_out)
        dw = (gmat.T @ cols).reshape(weight.data.shape)
        db = gmat.sum(axis=0, dtype=np.float64).astype(g.dtype) if bias is not None else None
        if stride == 1 and k - 1 - pad >= 0:
            w_flip = weight.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
            dx = _corr(np.ascontiguousarray(g), np.ascontiguousarray(w_flip), k - 1 - pad)
        else:
            dcols = gmat @ wmat                      # (N*OH*OW, C*k*k)
            dcols = dcols.reshape(n, oh, ow, c, k, k)
            dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
            for ki in range(k):
                for kj in range(k):
                    dxp[:, :, ki:ki + stride * oh:stride,
                        kj:kj + stride * ow:stride] += dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
        if bias is not None:
            return dx, dw, db
        return dx, dw

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, inputs, bwd)


def upsample_nearest2x(x):
    """Double H and W by replicating each pixel into a 2x2 block."""
    n, c, h, w = x.data.shape
    out = Tensor(x.data.repeat(2, axis=2).repeat(2, axis=3))

    def bwd(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5), dtype=np.float64)
                .astype(x.data.dtype),)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(f, x, eps=1e-3):
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic function mapping ``x`` to a scalar Tensor.
    The analytic gradient is taken at the tensor's own precision; the
    central-difference probes are evaluated in float64 so the numeric side
    stays an oracle rather than a noise source. The relative error at each
    coordinate is ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    with Tape() as tape:
        x.requires_grad = True
        x.grad = None
        loss = f(x)
        backward(tape, loss)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    base = x.data.astype(np.float64)
    numeric = np.zeros(base.size, dtype=np.float64)
    for i in range(base.size):
        orig = base.flat[i]
        base.flat[i] = orig + eps
        hi = float(f(Tensor(base.copy(), dtype=np.float64)).data)
        base.flat[i] = orig - eps
        lo = float(f(Tensor(base.copy(), dtype=np.float64)).data)
        base.flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * eps)
    a = analytic.astype(np.float64).reshape(-1)
    denom = np.maximum(1e-8, np.abs(a) + np.abs(numeric))
    return float(np.max(np.abs(a - numeric) / denom)) if base.size else 0.0
