"""Dense tensors with reverse-mode automatic differentiation.

Everything the network layers need is built from the primitives in this
module: a :class:`Tensor` wraps one numpy value buffer together with a
gradient slot and a backward rule pointing at the tensors it was computed
from.  Calling :meth:`Tensor.backward` on a scalar walks the graph once in
reverse topological order and accumulates gradients into every reachable
leaf that requires them.

Rank-4 activations always use the layout (batch, channels, frames, joints).
Training paths run in float32; tests that compare against finite
differences build their graphs in float64.  There is no broadcasting beyond
the handful of patterns the primitives implement themselves.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .errors import (
    DegenerateBatchError,
    DimensionError,
    ConfigurationError,
    InputError,
    StateError,
    UsageError,
)

DEFAULT_DTYPE = np.float32


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in (np.float32, np.float64):
        return arr.astype(DEFAULT_DTYPE)
    return arr


class Tensor:
    """A node in the differentiation graph.

    ``data`` is a numpy array (row-major, last dim contiguous).  ``grad``
    stays ``None`` until a backward pass reaches this tensor; leaves
    accumulate across backward calls and are only cleared explicitly.
    ``_backward`` maps the incoming gradient to one contribution per
    parent; it is ``None`` for leaves.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @classmethod
    def _from_op(cls, data, parents, backward):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

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

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic sugar (same-shape tensors or python scalars) --------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        out_data = self.data + other
        return Tensor._from_op(out_data, (self,), lambda g: (g,))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        c = float(other)
        out_data = self.data * c
        return Tensor._from_op(out_data, (self,), lambda g: (g * c,))

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def backward(self):
        """Fill gradients of all reachable ``requires_grad`` leaves.

        Must be called on a one-element tensor.  Interior accumulation
        uses per-call buffers, so calling backward twice adds the true
        gradient twice instead of compounding stale interior state.
        """
        if self.size != 1:
            raise UsageError(
                f"backward requires a scalar root, got shape {self.shape}"
            )
        if not self.requires_grad:
            return

        topo = _toposort(self)
        buf = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = buf.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: record the accumulated contribution persistently
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            contributions = node._backward(g)
            for parent, pg in zip(node._parents, contributions):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                acc = buf.get(key)
                buf[key] = pg if acc is None else acc + pg


def _toposort(root):
    """Post-order over the requires_grad subgraph, leaves first."""
    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return topo


class Parameter:
    """A trainable tensor plus the momentum state the weight optimizer owns.

    The momentum buffer is allocated on first use by
    :func:`sgd_momentum_step`; architecture parameters take plain gradient
    steps and therefore never grow one.
    """

    __slots__ = ("tensor", "name", "momentum_buffer")

    def __init__(self, data, name, dtype=None):
        self.tensor = Tensor(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.momentum_buffer = None

    @property
    def data(self):
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.tensor.shape})"


def sgd_momentum_step(params, lr, momentum):
    """v <- momentum*v + g; w <- w - lr*v; then zero the gradients."""
    if lr < 0:
        raise ConfigurationError(f"learning rate must be >= 0, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ConfigurationError(f"momentum must be in [0, 1), got {momentum}")
    for p in params:
        if p.tensor.grad is None:
            raise StateError(f"parameter {p.name} has no gradient to step with")
    for p in params:
        g = p.tensor.grad
        if p.momentum_buffer is None:
            p.momentum_buffer = np.zeros_like(p.tensor.data)
        buf = p.momentum_buffer
        buf *= momentum
        buf += g
        p.tensor.data -= lr * buf
        p.tensor.grad = None


def zero_grads(params):
    for p in params:
        p.tensor.grad = None


# ---------------------------------------------------------------------
# elementwise and reduction primitives
# ---------------------------------------------------------------------


def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


def add(a, b):
    _check_same_shape(a, b, "add")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    _check_same_shape(a, b, "sub")
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    _check_same_shape(a, b, "mul")

    def backward(g):
        return (
            g * b.data if a.requires_grad else None,
            g * a.data if b.requires_grad else None,
        )

    return Tensor._from_op(a.data * b.data, (a, b), backward)


def add_n(tensors):
    """Sum of same-shaped tensors in one graph node."""
    tensors = list(tensors)
    if not tensors:
        raise UsageError("add_n needs at least one tensor")
    for t in tensors[1:]:
        _check_same_shape(tensors[0], t, "add_n")
    acc = tensors[0].data.copy()
    for t in tensors[1:]:
        acc += t.data
    return Tensor._from_op(acc, tensors, lambda g: tuple(g for _ in tensors))


def tensor_sum(x):
    """Total sum over all elements, returned as a 0-d scalar tensor."""
    out_data = np.asarray(x.data.sum())
    return Tensor._from_op(
        out_data, (x,), lambda g: (np.broadcast_to(g, x.shape),)
    )


def relu(x):
    out_data = np.maximum(x.data, 0)
    # subgradient at exactly 0 is 0
    return Tensor._from_op(out_data, (x,), lambda g: (g * (x.data > 0),))


def sigmoid(x):
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    return Tensor._from_op(
        out_data, (x,), lambda g: (g * out_data * (1.0 - out_data),)
    )


def pointwise(x, kind):
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ConfigurationError(f"unknown pointwise kind {kind!r}")


# ---------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------


def conv_out_len(length, kernel, stride, pad, dilation=1):
    """Closed-form output length of a strided, padded, dilated window."""
    span = dilation * (kernel - 1) + 1
    if length + 2 * pad < span:
        raise DimensionError(
            f"kernel span {span} exceeds padded length {length + 2 * pad}"
        )
    return (length + 2 * pad - span) // stride + 1


def _pad2d(arr, ph, pw, fill=0.0):
    """Zero (or constant) padding of the two spatial axes, no np.pad overhead."""
    if not (ph or pw):
        return arr
    B, C, H, W = arr.shape
    if fill == 0.0:
        out = np.zeros((B, C, H + 2 * ph, W + 2 * pw), dtype=arr.dtype)
    else:
        out = np.full((B, C, H + 2 * ph, W + 2 * pw), fill, dtype=arr.dtype)
    out[:, :, ph : ph + H, pw : pw + W] = arr
    return out


def _windows(xp, kh, kw, sh, sw, dh, dw):
    """Strided view of all kernel windows: (B, C, Ho, Wo, kh, kw)."""
    span_h = dh * (kh - 1) + 1
    span_w = dw * (kw - 1) + 1
    view = np.lib.stride_tricks.sliding_window_view(xp, (span_h, span_w), axis=(2, 3))
    return view[:, :, ::sh, ::sw, ::dh, ::dw]


def conv2d(x, weight, stride=(1, 1), padding=(0, 0), dilation=(1, 1), groups=1):
    """2-D cross-correlation over the (frames, joints) axes.

    ``x`` is (B, Cin, T, N), ``weight`` is (Cout, Cin/groups, kh, kw).
    Zero padding; output spatial dims follow :func:`conv_out_len`.
    """
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be rank 4, got shape {x.shape}")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d weight must be rank 4, got shape {weight.shape}")
    B, cin, H, W = x.shape
    cout, cin_g, kh, kw = weight.shape
    sh, sw = stride
    ph, pw = padding
    dh, dw = dilation
    if cin % groups != 0 or cout % groups != 0:
        raise ConfigurationError(
            f"groups {groups} must divide input channels {cin} and output channels {cout}"
        )
    if cin_g != cin // groups:
        raise DimensionError(
            f"conv2d weight expects {cin_g} channels per group on axis 1, "
            f"input provides {cin // groups}"
        )
    Ho = conv_out_len(H, kh, sh, ph, dh)
    Wo = conv_out_len(W, kw, sw, pw, dw)

    xp = _pad2d(x.data, ph, pw)
    w = weight.data
    L = Ho * Wo

    def tap(arr, k, l):
        return arr[
            :, :, k * dh : k * dh + sh * Ho : sh, l * dw : l * dw + sw * Wo : sw
        ]

    if groups == cin and cout == cin:
        # depthwise: stack the taps once, then batched per-channel matmuls
        cols = np.empty((B, cin, kh * kw, L), dtype=xp.dtype)
        taps = cols.reshape(B, cin, kh * kw, Ho, Wo)
        for k in range(kh):
            for l in range(kw):
                taps[:, :, k * kw + l] = tap(xp, k, l)
        w9 = w.reshape(cin, kh * kw)
        out_data = np.matmul(w9[None, :, None, :], cols).reshape(B, cout, Ho, Wo)

        def backward(g):
            dweight = None
            dx = None
            if weight.requires_grad:
                dweight = np.matmul(cols, g.reshape(B, cin, L, 1)).sum(axis=0)
                dweight = dweight.reshape(cout, 1, kh, kw)
            if x.requires_grad:
                dx = _kernels.depthwise_input_grad(
                    np.ascontiguousarray(g), w9, H, W, kh, kw, sh, sw, ph, pw, dh, dw
                )
            return (dx, dweight)

        return Tensor._from_op(out_data, (x, weight), backward)

    cg = cin // groups
    cog = cout // groups

    if kh == 1 and kw == 1 and groups == 1:
        # pointwise: a plain channel matmul, no window machinery
        sub = xp[:, :, ::sh, ::sw]
        cols3 = sub.reshape(B, cin, L) if sub.flags.c_contiguous else (
            np.ascontiguousarray(sub).reshape(B, cin, L)
        )
        w2 = w.reshape(cout, cin)
        out_data = np.matmul(w2, cols3).reshape(B, cout, Ho, Wo)

        def backward(g):
            gg = g.reshape(B, cout, L)
            dweight = None
            dx = None
            if weight.requires_grad:
                dweight = np.matmul(gg, cols3.transpose(0, 2, 1)).sum(axis=0)
                dweight = dweight.reshape(cout, cin, 1, 1)
            if x.requires_grad:
                dsub = np.matmul(w2.T, gg).reshape(B, cin, Ho, Wo)
                if sh == 1 and sw == 1 and not (ph or pw):
                    dx = dsub
                else:
                    dxp = np.zeros((B, cin, H + 2 * ph, W + 2 * pw), dtype=xp.dtype)
                    dxp[:, :, ::sh, ::sw] = dsub
                    dx = dxp[:, :, ph : ph + H, pw : pw + W] if (ph or pw) else dxp
            return (dx, dweight)

        return Tensor._from_op(out_data, (x, weight), backward)

    # general im2col: contiguous (B, groups, Cg*kh*kw, Ho*Wo) columns feed matmul
    view = _windows(xp, kh, kw, sh, sw, dh, dw)
    cols = np.ascontiguousarray(view.transpose(0, 1, 4, 5, 2, 3))
    cols_g = cols.reshape(B, groups, cg * kh * kw, L)
    w_g = w.reshape(groups, cog, cg * kh * kw)
    if groups == 1:
        out_data = np.matmul(w_g[0], cols_g[:, 0]).reshape(B, cout, Ho, Wo)
    else:
        out2 = np.empty((B, groups, cog, L), dtype=xp.dtype)
        for gi in range(groups):
            np.matmul(w_g[gi], cols_g[:, gi], out=out2[:, gi])
        out_data = out2.reshape(B, cout, Ho, Wo)

    def backward(g):
        gg = g.reshape(B, groups, cog, L)
        dweight = None
        dx = None
        if weight.requires_grad:
            if groups == 1:
                dw2 = np.matmul(gg[:, 0], cols_g[:, 0].transpose(0, 2, 1)).sum(axis=0)
            else:
                dw2 = np.empty((groups, cog, cg * kh * kw), dtype=w.dtype)
                for gi in range(groups):
                    dw2[gi] = np.matmul(
                        gg[:, gi], cols_g[:, gi].transpose(0, 2, 1)
                    ).sum(axis=0)
            dweight = dw2.reshape(cout, cg, kh, kw)
        if x.requires_grad:
            if groups == 1:
                dcols = np.matmul(w_g[0].T, gg[:, 0])
            else:
                dcols = np.empty((B, groups, cg * kh * kw, L), dtype=xp.dtype)
                for gi in range(groups):
                    np.matmul(w_g[gi].T, gg[:, gi], out=dcols[:, gi])
            dcols = np.ascontiguousarray(dcols).reshape(B, cin, kh * kw, Ho, Wo)
            dx = _kernels.scatter_windows(dcols, H, W, kh, kw, sh, sw, ph, pw, dh, dw)
        return (dx, dweight)

    return Tensor._from_op(out_data, (x, weight), backward)


def pool2d(x, mode, kernel=(3, 3), stride=(1, 1), padding=(1, 1)):
    """Max or average pooling with zero-aware semantics.

    Max mode routes gradient to the first maximum in row-major window
    order; average mode divides by the number of unpadded cells only.
    """
    if mode not in ("max", "average"):
        raise ConfigurationError(f"unknown pool mode {mode!r}")
    if x.ndim != 4:
        raise DimensionError(f"pool2d input must be rank 4, got shape {x.shape}")
    B, C, H, W = x.shape
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    if sh not in (1, 2) or sw not in (1, 2):
        raise ConfigurationError(f"pool stride must be 1 or 2, got {stride}")
    Ho = conv_out_len(H, kh, sh, ph)
    Wo = conv_out_len(W, kw, sw, pw)

    if mode == "max":
        xp = _pad2d(x.data, ph, pw, fill=-np.inf)
        flat = np.ascontiguousarray(_windows(xp, kh, kw, sh, sw, 1, 1)).reshape(
            B, C, Ho, Wo, kh * kw
        )
        idx = flat.argmax(axis=-1)
        out_data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

        def backward(g):
            dcols = np.zeros((B, C, kh * kw, Ho, Wo), dtype=g.dtype)
            np.put_along_axis(dcols, idx[:, :, None], g[:, :, None], axis=2)
            return (
                _kernels.scatter_windows(dcols, H, W, kh, kw, sh, sw, ph, pw, 1, 1),
            )

        return Tensor._from_op(out_data, (x,), backward)

    xp = _pad2d(x.data, ph, pw)
    counts = _avg_pool_counts(H, W, kernel, stride, padding, x.data.dtype)
    out_data = np.zeros((B, C, Ho, Wo), dtype=x.data.dtype)
    for k in range(kh):
        for l in range(kw):
            out_data += xp[:, :, k : k + sh * Ho : sh, l : l + sw * Wo : sw]
    out_data /= counts

    def backward(g):
        return (
            _kernels.uniform_window_grad(g / counts, H, W, kh, kw, sh, sw, ph, pw),
        )

    return Tensor._from_op(out_data, (x,), backward)


_COUNTS_CACHE = {}


def _avg_pool_counts(H, W, kernel, stride, padding, dtype):
    """Unpadded-cell count per window, memoized by geometry."""
    key = (H, W, kernel, stride, padding, np.dtype(dtype).str)
    cached = _COUNTS_CACHE.get(key)
    if cached is None:
        kh, kw = kernel
        sh, sw = stride
        ph, pw = padding
        Ho = conv_out_len(H, kh, sh, ph)
        Wo = conv_out_len(W, kw, sw, pw)
        ones = np.pad(np.ones((H, W), dtype=dtype), ((ph, ph), (pw, pw)))
        counts = np.zeros((Ho, Wo), dtype=dtype)
        for k in range(kh):
            for l in range(kw):
                counts += ones[k : k + sh * Ho : sh, l : l + sw * Wo : sw]
        cached = _COUNTS_CACHE[key] = counts
    return cached




# ---------------------------------------------------------------------
# normalization, affine maps, reductions
# ---------------------------------------------------------------------


def batchnorm2d(
    x, scale, shift, running_mean, running_var, training, momentum=0.1, eps=1e-5
):
    """Per-channel normalization over (batch, frames, joints).

    Train mode normalizes by batch statistics and folds them into the
    running buffers with an exponential moving average; eval mode uses the
    running buffers.  ``running_mean``/``running_var`` are plain numpy
    arrays mutated in place, outside the differentiation graph.
    """
    if x.ndim != 4:
        raise DimensionError(f"batchnorm input must be rank 4, got shape {x.shape}")
    B, C, T, N = x.shape
    if scale.shape != (C,) or shift.shape != (C,):
        raise DimensionError(
            f"batchnorm scale/shift must have shape ({C},) to match channel axis 1"
        )
    M = B * T * N
    if training:
        if M < 2:
            raise DegenerateBatchError(
                f"train-mode batchnorm needs B*T*N >= 2, got {M}"
            )
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean[None, :, None, None]
        var = np.mean(centered * centered, axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean
        var = running_var
        centered = x.data - mean[None, :, None, None]

    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv[None, :, None, None]
    out_data = scale.data[None, :, None, None] * xhat + shift.data[None, :, None, None]

    def backward(g):
        dscale = (g * xhat).sum(axis=(0, 2, 3)) if scale.requires_grad else None
        dshift = g.sum(axis=(0, 2, 3)) if shift.requires_grad else None
        if not x.requires_grad:
            return (None, dscale, dshift)
        dxhat = g * scale.data[None, :, None, None]
        if training:
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (inv[None, :, None, None] / M) * (M * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * inv[None, :, None, None]
        return (dx, dscale, dshift)

    return Tensor._from_op(out_data, (x, scale, shift), backward)


def linear(x, weight, bias):
    """Affine map (B, F) @ (G, F)^T + (G,) -> (B, G)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError(
            f"linear expects rank-2 input and weight, got {x.shape} and {weight.shape}"
        )
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"linear inner dims disagree on axis 1: input {x.shape[1]} vs weight {weight.shape[1]}"
        )
    if bias.shape != (weight.shape[0],):
        raise DimensionError(
            f"linear bias shape {bias.shape} must be ({weight.shape[0]},)"
        )
    out_data = x.data @ weight.data.T + bias.data

    def backward(g):
        return (
            g @ weight.data if x.requires_grad else None,
            g.T @ x.data if weight.requires_grad else None,
            g.sum(axis=0) if bias.requires_grad else None,
        )

    return Tensor._from_op(out_data, (x, weight, bias), backward)


def global_avg_spatial(x):
    """(B, C, T, N) -> (B, C) mean over the spatial axes."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_spatial needs rank 4, got {x.shape}")
    B, C, T, N = x.shape
    out_data = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to((g / (T * N))[:, :, None, None], x.shape),)

    return Tensor._from_op(out_data, (x,), backward)


def channel_concat(tensors):
    """Concatenate along the channel axis; gradient routes back by slice."""
    tensors = list(tensors)
    if not tensors:
        raise UsageError("channel_concat needs at least one tensor")
    first = tensors[0]
    for t in tensors[1:]:
        for axis in (0, 2, 3):
            if t.shape[axis] != first.shape[axis]:
                raise DimensionError(
                    f"channel_concat inputs disagree on axis {axis}: "
                    f"{first.shape} vs {t.shape}"
                )
    out_data = np.concatenate([t.data for t in tensors], axis=1)
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=1))

    return Tensor._from_op(out_data, tensors, backward)


def scale_channels(x, gate):
    """Multiply every (frame, joint) plane of x by its (B, C) gate entry."""
    if gate.shape != x.shape[:2]:
        raise DimensionError(
            f"gate shape {gate.shape} must equal input batch/channel dims {x.shape[:2]}"
        )
    out_data = x.data * gate.data[:, :, None, None]

    def backward(g):
        return (
            g * gate.data[:, :, None, None] if x.requires_grad else None,
            (g * x.data).sum(axis=(2, 3)) if gate.requires_grad else None,
        )

    return Tensor._from_op(out_data, (x, gate), backward)


def shift_spatial(x):
    """Shift both spatial axes by one toward the origin, zero-filling the far edge.

    Feeds the offset path of the factorized reduce so its strided 1x1
    convolution sees odd-index positions and matches the even path's
    output size for any input length.
    """
    out_data = np.zeros_like(x.data)
    out_data[:, :, :-1, :-1] = x.data[:, :, 1:, 1:]

    def backward(g):
        dx = np.zeros_like(g)
        dx[:, :, 1:, 1:] = g[:, :, :-1, :-1]
        return (dx,)

    return Tensor._from_op(out_data, (x,), backward)


def reduce(x, kind, tensors=None):
    """Dispatch for the reduction family: global_avg_spatial, sum, channel_concat."""
    if kind == "global_avg_spatial":
        return global_avg_spatial(x)
    if kind == "sum":
        return tensor_sum(x)
    if kind == "channel_concat":
        return channel_concat(tensors if tensors is not None else x)
    raise ConfigurationError(f"unknown reduce kind {kind!r}")


# ---------------------------------------------------------------------
# loss and mixture machinery
# ---------------------------------------------------------------------


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood plus the row-normalized probabilities.

    Returns ``(loss, probs)`` where ``loss`` is a 0-d tensor and ``probs``
    is a plain (B, K) array.  Gradient is (p - onehot) / B.
    """
    if logits.ndim != 2:
        raise DimensionError(f"logits must be rank 2, got shape {logits.shape}")
    B, K = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (B,):
        raise DimensionError(f"labels must have shape ({B},), got {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= K:
        raise InputError(f"labels must lie in [0, {K})")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    probs = ez / denom
    log_probs = z - np.log(denom)
    loss_data = np.asarray(-log_probs[np.arange(B), labels].mean())

    def backward(g):
        d = probs.copy()
        d[np.arange(B), labels] -= 1.0
        return (d * (g / B),)

    return Tensor._from_op(loss_data, (logits,), backward), probs


def softmax_rows(a):
    """Row-wise softmax of a rank-2 tensor."""
    if a.ndim != 2:
        raise DimensionError(f"softmax_rows needs rank 2, got shape {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    y = ez / ez.sum(axis=1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return Tensor._from_op(y, (a,), backward)


def softmax_vec(v):
    """Softmax of a 1-D tensor."""
    if v.ndim != 1:
        raise DimensionError(f"softmax_vec needs rank 1, got shape {v.shape}")
    z = v.data - v.data.max()
    ez = np.exp(z)
    y = ez / ez.sum()

    def backward(g):
        return (y * (g - np.dot(g, y)),)

    return Tensor._from_op(y, (v,), backward)


def row(x, index):
    """Extract one row of a rank-2 tensor as a 1-D tape node."""
    if x.ndim != 2:
        raise DimensionError(f"row needs rank 2, got shape {x.shape}")
    out_data = x.data[index]

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[index] = g
        return (dx,)

    return Tensor._from_op(out_data, (x,), backward)


def weighted_sum(weights, tensors):
    """sum_k weights[k] * tensors[k] in a single graph node.

    ``weights`` is a 1-D tensor; all ``tensors`` share one shape.  The
    gradient w.r.t. weight k is the inner product of tensor k with the
    upstream gradient.
    """
    tensors = list(tensors)
    if weights.ndim != 1 or len(tensors) != weights.shape[0]:
        raise DimensionError(
            f"need exactly {weights.shape} summands, got {len(tensors)}"
        )
    for t in tensors[1:]:
        _check_same_shape(tensors[0], t, "weighted_sum")
    w = weights.data
    out_data = w[0] * tensors[0].data
    for k in range(1, len(tensors)):
        out_data += w[k] * tensors[k].data

    def backward(g):
        grads = []
        if weights.requires_grad:
            dw = np.array([np.vdot(t.data, g) for t in tensors], dtype=w.dtype)
            grads.append(dw)
        else:
            grads.append(None)
        for k, t in enumerate(tensors):
            grads.append(w[k] * g if t.requires_grad else None)
        return tuple(grads)

    return Tensor._from_op(out_data, [weights] + tensors, backward)


def zeros_like_strided(x, stride):
    """Constant all-zeros output at the stride-adjusted spatial shape."""
    B, C, T, N = x.shape
    if stride == 1:
        shape = (B, C, T, N)
    else:
        shape = (B, C, conv_out_len(T, 3, stride, 1), conv_out_len(N, 3, stride, 1))
    return Tensor(np.zeros(shape, dtype=x.data.dtype))
