"""Dense float32 tensors with reverse-mode automatic differentiation.

Every differentiable computation in the framework (policy network, VAE,
mixture-density RNN, bilinear warping, attack loss) is expressed through
the operations in this module.  Operations execute eagerly on numpy
arrays; when a ``Tape`` is active and an input requires gradients, the
operation also records a backward rule.  ``Tape.backward`` then walks the
recorded operations once, in reverse execution order, accumulating
gradients into ``Tensor.grad``.

Scope is deliberately small: CPU only, float32 only, valid (unpadded)
convolution only, broadcasting limited to scalars plus a few explicit
bias/expand ops.
"""

from __future__ import annotations

import threading

import numpy as np

_tls = threading.local()


def _tape_stack():
    if not hasattr(_tls, "stack"):
        _tls.stack = []
    return _tls.stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense float32 array plus gradient bookkeeping.

    ``grad`` is lazily allocated (same shape as ``data``) the first time a
    backward pass reaches this tensor.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def detach(self) -> "Tensor":
        """A constant view of this tensor's current values."""
        return Tensor(self.data.copy(), requires_grad=False)

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; python scalars are promoted to constant tensors.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad=requires_grad)


class Tape:
    """Ordered record of executed operations for one backward pass.

    Execution order is topological by construction: an operation is
    appended only after its inputs exist.  Use as a context manager;
    nested tapes record onto the innermost one only.
    """

    def __init__(self):
        self.entries = []  # (out, inputs, backward_fn)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def record(self, out: Tensor, inputs, backward_fn):
        self.entries.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape.

        ``loss`` must be a scalar (one element).  Repeated calls without
        zeroing gradients accumulate.
        """
        if loss.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        grads = {id(loss): np.ones_like(loss.data)}
        for out, inputs, backward_fn in reversed(self.entries):
            gout = grads.get(id(out))
            if gout is None:
                continue
            gins = backward_fn(gout)
            for inp, gin in zip(inputs, gins):
                if gin is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] += gin
                else:
                    grads[key] = gin.copy() if gin.base is not None else gin
        # Flush into .grad buffers so callers (optimizers) see accumulation.
        seen = set()
        for out, inputs, _ in self.entries:
            for t in (out, *inputs):
                if id(t) in seen or not t.requires_grad:
                    continue
                seen.add(id(t))
                g = grads.get(id(t))
                if g is not None:
                    t.accumulate_grad(g)
        if id(loss) not in seen and loss.requires_grad:
            loss.accumulate_grad(grads[id(loss)])


def backward(loss: Tensor, tape: Tape | None = None):
    """Run the backward pass on ``tape`` (or the innermost active tape)."""
    tape = tape or _active_tape()
    if tape is None:
        raise RuntimeError("backward called with no active tape")
    tape.backward(loss)


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()


def _record(out_data, inputs, backward_fn) -> Tensor:
    tape = _active_tape()
    out = Tensor(out_data)
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn)
    return out


def _check_binary_shapes(a: Tensor, b: Tensor, name: str):
    # Equal shapes, or one side is a scalar (single element).
    if a.data.shape == b.data.shape or a.data.size == 1 or b.data.size == 1:
        return
    raise ValueError(f"{name}: shape mismatch {a.data.shape} vs {b.data.shape}")


def _reduce_to(g, shape):
    # Collapse a full-shape gradient back to a scalar operand's shape.
    if g.shape == shape:
        return g
    return np.sum(g, dtype=np.float32).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary_shapes(a, b, "add")

    def bwd(g):
        return _reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape)

    return _record(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary_shapes(a, b, "sub")

    def bwd(g):
        return _reduce_to(g, a.data.shape), _reduce_to(-g, b.data.shape)

    return _record(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary_shapes(a, b, "mul")

    def bwd(g):
        return _reduce_to(g * b.data, a.data.shape), _reduce_to(g * a.data, b.data.shape)

    return _record(a.data * b.data, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_binary_shapes(a, b, "div")
    out = a.data / b.data

    def bwd(g):
        ga = _reduce_to(g / b.data, a.data.shape)
        gb = _reduce_to(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bwd(g):
        return (g * (1.0 - y * y),)

    return _record(y, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g):
        return (g * y * (1.0 - y),)

    return _record(y, (x,), bwd)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def bwd(g):
        return (g * y,)

    return _record(y, (x,), bwd)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise ValueError("log requires strictly positive inputs")
    inv = 1.0 / x.data

    def bwd(g):
        return (g * inv,)

    return _record(np.log(x.data), (x,), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0

    def bwd(g):
        return (g * mask,)

    return _record(np.where(mask, x.data, 0.0), (x,), bwd)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    # Straight-through-style subgradient: 1 inside [lo, hi], 0 outside.
    inside = (x.data >= lo) & (x.data <= hi)

    def bwd(g):
        return (g * inside,)

    return _record(np.clip(x.data, lo, hi), (x,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul: inner dimensions differ, {a.data.shape} @ {b.data.shape}"
        )

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _record(a.data @ b.data, (a, b), bwd)


def _normalize_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    norm = tuple(ax % ndim if -ndim <= ax < ndim else ax for ax in axes)
    for ax in norm:
        if not 0 <= ax < ndim:
            raise ValueError(f"reduce: axis {ax} invalid for ndim {ndim}")
    if len(set(norm)) != len(norm):
        raise ValueError("reduce: duplicate axes")
    return norm


def reduce_sum(x: Tensor, axes=None) -> Tensor:
    axes = _normalize_axes(axes, x.data.ndim)
    out = np.sum(x.data, axis=axes, dtype=np.float32)
    keep_shape = tuple(
        1 if i in axes else d for i, d in enumerate(x.data.shape)
    )

    def bwd(g):
        return (np.broadcast_to(g.reshape(keep_shape), x.data.shape).astype(np.float32),)

    return _record(out, (x,), bwd)


def reduce_mean(x: Tensor, axes=None) -> Tensor:
    axes = _normalize_axes(axes, x.data.ndim)
    count = 1
    for ax in axes:
        count *= x.data.shape[ax]
    out = np.mean(x.data, axis=axes, dtype=np.float32)
    keep_shape = tuple(
        1 if i in axes else d for i, d in enumerate(x.data.shape)
    )
    scale = np.float32(1.0 / count)

    def bwd(g):
        return (
            np.broadcast_to(g.reshape(keep_shape), x.data.shape).astype(np.float32)
            * scale,
        )

    return _record(out, (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bwd(g):
        return (g.reshape(x.data.shape),)

    return _record(x.data.reshape(shape), (x,), bwd)


def concat_last(parts) -> Tensor:
    """Concatenate tensors along the last axis."""
    parts = list(parts)
    widths = [p.data.shape[-1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=-1)
    offsets = np.cumsum([0] + widths)

    def bwd(g):
        return tuple(
            g[..., offsets[i] : offsets[i + 1]] for i in range(len(parts))
        )

    return _record(out, tuple(parts), bwd)


def narrow_last(x: Tensor, start: int, length: int) -> Tensor:
    """Slice ``length`` entries along the last axis starting at ``start``."""
    if start < 0 or start + length > x.data.shape[-1]:
        raise ValueError(
            f"narrow_last: [{start}, {start + length}) outside last dim "
            f"{x.data.shape[-1]}"
        )
    out = x.data[..., start : start + length].copy()

    def bwd(g):
        full = np.zeros_like(x.data)
        full[..., start : start + length] = g
        return (full,)

    return _record(out, (x,), bwd)


def expand_last(x: Tensor, n: int) -> Tensor:
    """Repeat a trailing singleton axis ``n`` times; backward sums it back."""
    if x.data.shape[-1] != 1:
        raise ValueError("expand_last requires a trailing axis of size 1")
    out = np.repeat(x.data, n, axis=-1)

    def bwd(g):
        return (np.sum(g, axis=-1, keepdims=True, dtype=np.float32),)

    return _record(out, (x,), bwd)


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """Add a vector ``v`` across the last axis of ``x`` (dense-layer bias)."""
    if v.data.ndim != 1 or x.data.shape[-1] != v.data.shape[0]:
        raise ValueError(
            f"add_rowvec: last dim {x.data.shape} incompatible with {v.data.shape}"
        )
    lead_axes = tuple(range(x.data.ndim - 1))

    def bwd(g):
        return g, np.sum(g, axis=lead_axes, dtype=np.float32)

    return _record(x.data + v.data, (x, v), bwd)


def add_channel(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias to (C,H,W) or (N,C,H,W) feature maps."""
    if b.data.ndim != 1:
        raise ValueError("add_channel: bias must be 1-D")
    if x.data.ndim == 3:
        c_axis, sum_axes = 0, (1, 2)
    elif x.data.ndim == 4:
        c_axis, sum_axes = 1, (0, 2, 3)
    else:
        raise ValueError("add_channel expects 3-D or 4-D input")
    if x.data.shape[c_axis] != b.data.shape[0]:
        raise ValueError(
            f"add_channel: {b.data.shape[0]} biases for "
            f"{x.data.shape[c_axis]} channels"
        )
    bshape = [1] * x.data.ndim
    bshape[c_axis] = b.data.shape[0]

    def bwd(g):
        return g, np.sum(g, axis=sum_axes, dtype=np.float32)

    return _record(x.data + b.data.reshape(bshape), (x, b), bwd)


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1) -> Tensor:
    """Valid cross-correlation of (C,H,W) or (N,C,H,W) input with
    (C_out,C_in,kh,kw) kernels."""
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernels.data.ndim != 4:
        raise ValueError("conv2d expects (N,C,H,W) input and (O,C,kh,kw) kernels")
    n, c, h, w = xd.shape
    o, ck, kh, kw = kernels.data.shape
    if ck != c:
        raise ValueError(f"conv2d: input has {c} channels, kernels expect {ck}")
    if kh > h or kw > w:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{w}")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1

    sn, sc, sh, sw = xd.strides
    cols = np.lib.stride_tricks.as_strided(
        xd,
        shape=(n, ho, wo, c, kh, kw),
        strides=(sn, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    cols2 = np.ascontiguousarray(cols).reshape(n * ho * wo, c * kh * kw)
    wmat = kernels.data.reshape(o, c * kh * kw)
    out = (cols2 @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def bwd(g):
        if squeeze:
            g = g[None]
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, o)
        dk = (g2.T @ cols2).reshape(o, c, kh, kw)
        dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
        dx = np.zeros_like(xd)
        for ih in range(kh):
            for iw in range(kw):
                dx[
                    :, :, ih : ih + stride * ho : stride, iw : iw + stride * wo : stride
                ] += dcols[:, :, :, :, ih, iw].transpose(0, 3, 1, 2)
        return (dx[0] if squeeze else dx), dk

    return _record(out[0] if squeeze else out, (x, kernels), bwd)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the trailing two axes."""
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)
    h, w = x.data.shape[-2:]

    def bwd(g):
        gshape = g.shape[:-2] + (h, 2, w, 2)
        return (np.sum(g.reshape(gshape), axis=(-1, -3), dtype=np.float32),)

    return _record(out, (x,), bwd)


def weighted_gather(src: Tensor, indices, weights, out_shape) -> Tensor:
    """Fixed-weight linear gather: ``out.flat[j] = sum_k w[j,k] * src.flat[i[j,k]]``.

    ``indices`` and ``weights`` are plain integer/float arrays of shape
    (prod(out_shape), k) and are treated as constants, which makes the op
    exactly linear in ``src`` — this is the primitive behind bilinear
    warping.
    """
    indices = np.asarray(indices)
    weights = np.asarray(weights, dtype=np.float32)
    flat = src.data.reshape(-1)
    out = (flat[indices] * weights).sum(axis=1).reshape(out_shape)

    def bwd(g):
        ds = np.zeros_like(flat)
        np.add.at(ds, indices.reshape(-1), (weights * g.reshape(-1, 1)).reshape(-1))
        return (ds.reshape(src.data.shape),)

    return _record(out.astype(np.float32), (src,), bwd)


class Adam:
    """Adam with bias correction over a fixed parameter list.

    ``step`` applies the update and then zeroes the gradients, giving the
    outer optimization loop a clean slate each iteration.
    """

    def __init__(self, params, lr: float = 0.001, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1 = np.float32(self.beta1)
        b2 = np.float32(self.beta2)
        bc1 = np.float32(1.0 - self.beta1**self.t)
        bc2 = np.float32(1.0 - self.beta2**self.t)
        lr = np.float32(self.lr)
        eps = np.float32(self.eps)
        one = np.float32(1.0)
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError(f"Adam.step: parameter {i} has no gradient")
            g = p.grad
            self.m[i] = b1 * self.m[i] + (one - b1) * g
            self.v[i] = b2 * self.v[i] + (one - b2) * (g * g)
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            p.data -= lr * mhat / (np.sqrt(vhat) + eps)
        self.zero_grad()

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
