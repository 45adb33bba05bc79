"""Dense N-d tensors with reverse-mode automatic differentiation.

Everything the network needs is implemented as a small set of primitive
operations recorded on a tape.  Convolutions are evaluated by shifting
padded views and accumulating per-tap matrix products, which keeps the
inner loops inside numpy.
"""

from contextlib import contextmanager

import numpy as np

DEFAULT_DTYPE = np.float64

# Toggle for the NaN/Inf guard applied to every forward result.
FINITE_CHECKS = True


class Tape:
    """Ordered record of operations; creation order is topological order."""

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def clear(self):
        self.nodes.clear()
        self.consumed = False

    def __len__(self):
        return len(self.nodes)


_current_tape = None


def current_tape():
    return _current_tape


@contextmanager
def record(tape=None):
    """Record operations onto `tape` (a fresh one by default)."""
    global _current_tape
    if tape is None:
        tape = Tape()
    prev = _current_tape
    _current_tape = tape
    try:
        yield tape
    finally:
        _current_tape = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward", "_tape")

    _next_id = 0

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        if arr.ndim > 5:
            raise ValueError(f"rank {arr.ndim} tensor not supported (max rank 5)")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = Tensor._next_id
        Tensor._next_id += 1
        self._parents = ()
        self._backward = None
        self._tape = None

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
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=False, dtype=dtype)


def _check_finite(arr, opname):
    if FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {opname}")


def _accum(t, g):
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g


def _result(data, opname, parents, backward):
    _check_finite(data, opname)
    req = any(p.requires_grad for p in parents)
    out = Tensor(data)
    if req and _current_tape is not None:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._tape = _current_tape
        _current_tape.nodes.append(out)
    return out


def backward(loss):
    """Reverse-topological gradient accumulation from a scalar tape root."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.size != 1:
        raise ValueError(f"backward root must be a scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ValueError("backward on a detached tensor (nothing was recorded)")
    if tape.consumed:
        raise RuntimeError("backward already ran on this tape; reset it first")
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.grad is not None and node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _result(a.data + b.data, "add", (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch: {a.shape} vs {b.shape}")

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _result(a.data - b.data, "sub", (a, b), bw)


def multiply(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"multiply shape mismatch: {a.shape} vs {b.shape}")

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _result(a.data * b.data, "multiply", (a, b), bw)


def divide(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"divide shape mismatch: {a.shape} vs {b.shape}")

    def bw(g):
        _accum(a, g / b.data)
        _accum(b, -g * a.data / (b.data * b.data))

    return _result(a.data / b.data, "divide", (a, b), bw)


def mul_const(x, c):
    """x * c where c is a non-differentiated constant, broadcastable to x."""
    x = as_tensor(x)
    c = np.asarray(c, dtype=x.dtype)
    data = x.data * c
    if data.shape != x.shape:
        raise ValueError(f"constant {c.shape} does not broadcast into {x.shape}")

    def bw(g):
        _accum(x, g * c)

    return _result(data, "mul_const", (x,), bw)


def add_const(x, c):
    x = as_tensor(x)
    c = np.asarray(c, dtype=x.dtype)
    data = x.data + c
    if data.shape != x.shape:
        raise ValueError(f"constant {c.shape} does not broadcast into {x.shape}")

    def bw(g):
        _accum(x, g)

    return _result(data, "add_const", (x,), bw)


def rsub_const(c, x):
    """c - x with constant c."""
    return add_const(mul_const(x, -1.0), c)


def leaky_relu(x, alpha=0.3):
    x = as_tensor(x)
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"leaky_relu alpha must lie in (0,1), got {alpha}")
    data = np.where(x.data >= 0, x.data, alpha * x.data)
    # slope 1 at exactly zero, by convention
    slope = np.where(x.data >= 0, 1.0, alpha)

    def bw(g):
        _accum(x, g * slope)

    return _result(data, "leaky_relu", (x,), bw)


def sigmoid(x):
    x = as_tensor(x)
    data = 1.0 / (1.0 + np.exp(-x.data))

    def bw(g):
        _accum(x, g * data * (1.0 - data))

    return _result(data, "sigmoid", (x,), bw)


def tanh(x):
    x = as_tensor(x)
    data = np.tanh(x.data)

    def bw(g):
        _accum(x, g * (1.0 - data * data))

    return _result(data, "tanh", (x,), bw)


def softmax_channels(x):
    """Per-pixel softmax over the trailing (channel/class) axis."""
    x = as_tensor(x)
    if x.shape[-1] < 2:
        raise ValueError("softmax_channels needs at least 2 channels")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        _accum(x, data * (g - dot))

    return _result(data, "softmax_channels", (x,), bw)


# ---------------------------------------------------------------------------
# shape ops

def concat_channels(tensors):
    """Concatenate along the trailing axis; backward slices the gradient."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat_channels of an empty list")
    lead = ts[0].shape[:-1]
    for t in ts:
        if t.shape[:-1] != lead:
            raise ValueError(f"concat_channels leading-shape mismatch: {t.shape} vs {lead + ('*',)}")
    widths = [t.shape[-1] for t in ts]
    data = np.concatenate([t.data for t in ts], axis=-1)

    def bw(g):
        off = 0
        for t, w in zip(ts, widths):
            _accum(t, g[..., off:off + w])
            off += w

    return _result(data, "concat_channels", ts, bw)


def slice_channels(x, start, stop):
    x = as_tensor(x)
    if not (0 <= start < stop <= x.shape[-1]):
        raise ValueError(f"invalid channel slice [{start}:{stop}] for width {x.shape[-1]}")

    def bw(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[..., start:stop] += g

    return _result(x.data[..., start:stop].copy(), "slice_channels", (x,), bw)


def transpose_axes(x, perm):
    x = as_tensor(x)
    perm = tuple(perm)
    if sorted(perm) != list(range(x.ndim)):
        raise ValueError(f"perm {perm} is not a permutation of axes of a rank-{x.ndim} tensor")
    inv = np.argsort(perm)

    def bw(g):
        _accum(x, np.transpose(g, inv))

    return _result(np.ascontiguousarray(np.transpose(x.data, perm)), "transpose_axes", (x,), bw)


def expand_last_dim(x):
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        _accum(x, g.reshape(shape))

    return _result(x.data.reshape(shape + (1,)), "expand_last_dim", (x,), bw)


def sum_last_dim(x):
    x = as_tensor(x)

    def bw(g):
        _accum(x, np.broadcast_to(g[..., None], x.shape))

    return _result(x.data.sum(axis=-1), "sum_last_dim", (x,), bw)


def sum_axes(x, axes, keepdims=False):
    x = as_tensor(x)
    axes = tuple(axes) if not isinstance(axes, int) else (axes,)
    data = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axes)
        _accum(x, np.broadcast_to(gg, x.shape))

    return _result(data, "sum_axes", (x,), bw)


def tsum(x):
    """Sum of all elements, as a scalar tensor."""
    x = as_tensor(x)

    def bw(g):
        _accum(x, np.broadcast_to(g, x.shape))

    return _result(np.asarray(x.data.sum()), "tsum", (x,), bw)


def slice_axis1(x, t):
    """Take index t along axis 1 (the time axis of a rank-5 sequence)."""
    x = as_tensor(x)
    if not (0 <= t < x.shape[1]):
        raise ValueError(f"index {t} out of range for axis-1 extent {x.shape[1]}")

    def bw(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[:, t] += g

    return _result(x.data[:, t].copy(), "slice_axis1", (x,), bw)


def stack_axis1(tensors):
    """Stack equal-shape tensors along a new axis 1."""
    ts = [as_tensor(t) for t in tensors]
    shape = ts[0].shape
    for t in ts:
        if t.shape != shape:
            raise ValueError(f"stack_axis1 shape mismatch: {t.shape} vs {shape}")
    data = np.stack([t.data for t in ts], axis=1)

    def bw(g):
        for i, t in enumerate(ts):
            _accum(t, g[:, i])

    return _result(data, "stack_axis1", ts, bw)


# ---------------------------------------------------------------------------
# convolutions

def _conv_checks(x, kh, kw, dilation):
    if x.ndim != 4:
        raise ValueError(f"conv input must be rank 4 [B,H,W,C], got rank {x.ndim}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel spatial dims must be odd, got {kh}x{kw}")
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")


def conv2d(x, kernel, bias=None, dilation=1, padding="same"):
    """Dilated 2-D convolution, zero-padded so spatial dims are preserved."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if padding != "same":
        raise ValueError("only 'same' padding is supported")
    if kernel.ndim != 4:
        raise ValueError(f"conv2d kernel must be rank 4 [kh,kw,Cin,Cout], got rank {kernel.ndim}")
    kh, kw, kcin, cout = kernel.shape
    _conv_checks(x, kh, kw, dilation)
    b, h, w, cin = x.shape
    if cin != kcin:
        raise ValueError(f"conv2d channel mismatch: input has {cin}, kernel expects {kcin}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ValueError(f"bias shape {bias.shape} != ({cout},)")

    d = dilation
    ph, pw = d * (kh // 2), d * (kw // 2)
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    kd = kernel.data
    out = np.zeros((b, h, w, cout), dtype=x.dtype)
    out2 = out.reshape(-1, cout)
    for u in range(kh):
        for v in range(kw):
            xs = xp[:, u * d:u * d + h, v * d:v * d + w, :]
            out2 += xs.reshape(-1, cin) @ kd[u, v]
    if bias is not None:
        out += bias.data

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gk = np.zeros_like(kd) if kernel.requires_grad else None
        for u in range(kh):
            for v in range(kw):
                xs = xp[:, u * d:u * d + h, v * d:v * d + w, :]
                if gk is not None:
                    gk[u, v] += xs.reshape(-1, cin).T @ g2
                if gxp is not None:
                    gxp[:, u * d:u * d + h, v * d:v * d + w, :] += (g2 @ kd[u, v].T).reshape(b, h, w, cin)
        if gk is not None:
            _accum(kernel, gk)
        if gxp is not None:
            _accum(x, gxp[:, ph:ph + h, pw:pw + w, :])
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 1, 2)))

    return _result(out, "conv2d", parents, bw)


def depthwise_conv2d(x, kernel, dilation=1):
    """Each input channel convolved with its own spatial kernel [kh,kw,C]."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 3:
        raise ValueError(f"depthwise kernel must be rank 3 [kh,kw,C], got rank {kernel.ndim}")
    kh, kw, kc = kernel.shape
    _conv_checks(x, kh, kw, dilation)
    b, h, w, c = x.shape
    if c != kc:
        raise ValueError(f"depthwise channel mismatch: input has {c}, kernel expects {kc}")

    d = dilation
    ph, pw = d * (kh // 2), d * (kw // 2)
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    kd = kernel.data
    out = np.zeros_like(x.data)
    for u in range(kh):
        for v in range(kw):
            out += xp[:, u * d:u * d + h, v * d:v * d + w, :] * kd[u, v]

    def bw(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gk = np.zeros_like(kd) if kernel.requires_grad else None
        for u in range(kh):
            for v in range(kw):
                xs = xp[:, u * d:u * d + h, v * d:v * d + w, :]
                if gk is not None:
                    gk[u, v] += (xs * g).sum(axis=(0, 1, 2))
                if gxp is not None:
                    gxp[:, u * d:u * d + h, v * d:v * d + w, :] += g * kd[u, v]
        if gk is not None:
            _accum(kernel, gk)
        if gxp is not None:
            _accum(x, gxp[:, ph:ph + h, pw:pw + w, :])

    return _result(out, "depthwise_conv2d", (x, kernel), bw)


def pointwise_conv(x, weight, bias=None):
    """1x1 cross-channel convolution: a matmul over the channel axis."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2:
        raise ValueError(f"pointwise weight must be rank 2 [Cin,Cout], got rank {weight.ndim}")
    cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise ValueError(f"pointwise channel mismatch: input has {x.shape[-1]}, weight expects {cin}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ValueError(f"bias shape {bias.shape} != ({cout},)")

    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, cin)
    out = x2 @ weight.data
    if bias is not None:
        out += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, cout)
        if weight.requires_grad:
            _accum(weight, x2.T @ g2)
        if x.requires_grad:
            _accum(x, (g2 @ weight.data.T).reshape(x.shape))
        if bias is not None:
            _accum(bias, g2.sum(axis=0))

    return _result(out.reshape(lead + (cout,)), "pointwise_conv", parents, bw)


def separable_atrous_conv(x, depthwise_kernel, pointwise_kernel, bias=None, dilation=1):
    """Depthwise dilated convolution followed by a 1x1 pointwise convolution."""
    dw = as_tensor(depthwise_kernel)
    pw = as_tensor(pointwise_kernel)
    if dw.shape[-1] != pw.shape[0]:
        raise ValueError(
            f"separable stage mismatch: depthwise emits {dw.shape[-1]} channels, "
            f"pointwise expects {pw.shape[0]}")
    return pointwise_conv(depthwise_conv2d(x, dw, dilation=dilation), pw, bias=bias)


def spatial_dropout(x, rate, training, rng=None):
    """Channel-wise dropout: whole feature maps are zeroed per batch item."""
    x = as_tensor(x)
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"dropout rate must lie in [0,1), got {rate}")
    if x.ndim != 4:
        raise ValueError(f"spatial_dropout expects a rank-4 tensor, got rank {x.ndim}")
    if not training or rate == 0.0:
        def bw_id(g):
            _accum(x, g)
        return _result(x.data.copy(), "spatial_dropout", (x,), bw_id)

    if rng is None:
        raise ValueError("spatial_dropout in training mode needs an rng")
    b, _, _, c = x.shape
    keep = rng.random((b, 1, 1, c)) >= rate
    mask = keep.astype(x.dtype) / (1.0 - rate)

    def bw(g):
        _accum(x, g * mask)

    return _result(x.data * mask, "spatial_dropout", (x,), bw)
