"""Minimal reverse-mode differentiation over float64 numpy arrays.

Covers exactly the primitive set the denoiser and the classifier need:
dense/conv/attention blocks, the usual activations and reductions, and shape
plumbing.  Every op validates shapes (reporting both sides on mismatch) and
raises NonFiniteError if a result contains NaN or Inf.  Gradients accumulate
into `.grad` of requires_grad leaves; calling backward twice without an
explicit reset doubles them.

Values are float64 end to end; single precision is out of scope.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction; ops return constants (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def frozen(params):
    """Treat the given parameter Values as constants inside the block.

    Input gradients still flow; parameter gradients are skipped.  Used by the
    guidance path, which differentiates w.r.t. the image only.
    """
    params = list(params.values()) if isinstance(params, dict) else list(params)
    prev = [(p, p.requires_grad, p._needs_grad) for p in params]
    for p in params:
        p.requires_grad = False
        p._needs_grad = False
    try:
        yield
    finally:
        for p, req, needs in prev:
            p.requires_grad = req
            p._needs_grad = needs


def _check_finite(arr: np.ndarray, op: str) -> None:
    # cheap screen first: NaN/Inf propagate through the sum; a non-finite sum
    # can also mean mere overflow of finite entries, so confirm before raising
    with np.errstate(over="ignore"):
        total = float(np.sum(arr))
    if not math.isfinite(total) and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


class Value:
    """Node in the computation graph: data, optional grad, and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_needs_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data, "Value")
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Value, ...] = ()
        self._backward_fn = None
        self._needs_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Value":
        return Value(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Value(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar (all routed through the primitives below)
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Value) else -np.asarray(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Value):
            raise TypeError("division only supported by constants")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        return matmul(self, other)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _make(data: np.ndarray, op: str, parents: tuple[Value, ...], backward_fn, check: bool = True) -> Value:
    """Wrap an op result; prune the graph when no parent needs gradients.

    Pure data-movement ops (reshape, concat, pooling, lookups) cannot create
    non-finite values from finite inputs and pass check=False.
    """
    if check:
        _check_finite(data, op)
    out = Value.__new__(Value)
    out.data = data
    out.grad = None
    out.requires_grad = False
    if _grad_enabled and any(p._needs_grad for p in parents):
        out._parents = parents
        out._backward_fn = backward_fn
        out._needs_grad = True
    else:
        out._parents = ()
        out._backward_fn = None
        out._needs_grad = False
    return out


def backward(loss: Value) -> None:
    """Reverse-topological accumulation of d(loss)/d(leaf) into leaf.grad.

    Each call computes the full gradient and adds it, so repeated calls
    without zero_grad double the stored gradients.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    # post-order DFS; nodes are marked visited when first expanded (not when
    # pushed), otherwise unequal-depth fan-in would break the ordering
    topo: list[Value] = []
    visited: set[int] = set()
    stack: list[tuple[Value, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p._needs_grad and id(p) not in visited:
                stack.append((p, False))
    # per-call gradient buffers: (array, owned) — unowned arrays may alias a
    # child's gradient or be views, so the first fan-in reallocates
    grads: dict[int, tuple[np.ndarray, bool]] = {id(loss): (np.ones_like(loss.data), True)}

    def send(node: Value, g: np.ndarray) -> None:
        entry = grads.get(id(node))
        if entry is None:
            grads[id(node)] = (g, False)
        else:
            arr, owned = entry
            if owned:
                arr += g
            else:
                grads[id(node)] = (arr + g, True)

    for node in reversed(topo):
        entry = grads.pop(id(node), None)
        if entry is None:
            continue
        g = entry[0]
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        if node._backward_fn is not None:
            node._backward_fn(g, send)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ValueError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bwd(g, send):
        if a._needs_grad:
            send(a, _unbroadcast(g, a.data.shape))
        if b._needs_grad:
            send(b, _unbroadcast(g, b.data.shape))

    return _make(data, "add", (a, b), bwd)


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ValueError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bwd(g, send):
        if a._needs_grad:
            send(a, _unbroadcast(g * b.data, a.data.shape))
        if b._needs_grad:
            send(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, "mul", (a, b), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >= 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims of {a.shape} and {b.shape} differ")
    data = a.data @ b.data

    def bwd(g, send):
        if a._needs_grad:
            send(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b._needs_grad:
            send(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _make(data, "matmul", (a, b), bwd)


def dense(x, w, b=None) -> Value:
    """Affine map over the last axis: (..., in) @ (in, out) + (out,)."""
    x, w = as_value(x), as_value(w)
    b = as_value(b) if b is not None else None
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"dense: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ValueError(f"dense: bias {b.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    y2 = x2 @ w.data
    if b is not None:
        y2 += b.data
    data = y2.reshape(*lead, w.shape[1])
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g, send):
        g2 = g.reshape(-1, w.shape[1])
        if x._needs_grad:
            send(x, (g2 @ w.data.T).reshape(x.data.shape))
        if w._needs_grad:
            send(w, x2.T @ g2)
        if b is not None and b._needs_grad:
            send(b, g2.sum(axis=0))

    return _make(data, "dense", parents, bwd)


# ---------------------------------------------------------------------------
# convolution and spatial resampling (NHWC layout)


def _conv_taps(xp: np.ndarray, w: np.ndarray, stride: int, ho: int, wo: int, keep_taps: bool):
    """Convolution as a sum of per-tap GEMMs over contiguous window slices.

    Much faster than materializing a full im2col matrix on this engine's
    typical shapes; optionally returns the tap slices for the weight gradient.
    """
    kh, kw, cin, cout = w.shape
    n = xp.shape[0]
    y = None
    taps = [] if keep_taps else None
    for i in range(kh):
        for j in range(kw):
            xs = np.ascontiguousarray(
                xp[:, i : i + (ho - 1) * stride + 1 : stride,
                   j : j + (wo - 1) * stride + 1 : stride, :]
            ).reshape(n * ho * wo, cin)
            if keep_taps:
                taps.append(xs)
            contrib = xs @ w[i, j]
            if y is None:
                y = contrib
            else:
                y += contrib
    return y, taps


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Value:
    """2-d convolution, NHWC input, (kh, kw, cin, cout) kernel."""
    x, w = as_value(x), as_value(w)
    b = as_value(b) if b is not None else None
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    n, h, wd, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if cin != wcin:
        raise ValueError(f"conv2d: input channels {x.shape} do not match kernel {w.shape}")
    if b is not None and b.shape != (cout,):
        raise ValueError(f"conv2d: bias {b.shape} does not match kernel {w.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: invalid stride={stride} pad={pad}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {w.shape} too large for input {x.shape} with pad={pad}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    keep_taps = bool(_grad_enabled and w._needs_grad)
    y, taps = _conv_taps(xp, w.data, stride, ho, wo, keep_taps)
    if b is not None:
        y += b.data
    data = y.reshape(n, ho, wo, cout)
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g, send):
        g2 = g.reshape(-1, cout)
        if w._needs_grad:
            dw = np.empty_like(w.data)
            for tap, (i, j) in zip(taps, ((i, j) for i in range(kh) for j in range(kw))):
                dw[i, j] = tap.T @ g2
            send(w, dw)
        if b is not None and b._needs_grad:
            send(b, g2.sum(axis=0))
        if x._needs_grad:
            if stride == 1:
                # input gradient is itself a convolution: full-correlate the
                # upstream gradient with the spatially flipped, channel-swapped kernel
                gp = np.pad(g, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
                w_flip = w.data[::-1, ::-1].transpose(0, 1, 3, 2).copy()
                dxp, _ = _conv_taps(gp, w_flip, 1, h + 2 * pad, wd + 2 * pad, False)
                dxp = dxp.reshape(n, h + 2 * pad, wd + 2 * pad, cin)
            else:
                dcols = (g2 @ w.data.reshape(-1, cout).T).reshape(n, ho, wo, kh, kw, cin)
                dxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, cin), dtype=np.float64)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, i : i + (ho - 1) * stride + 1 : stride,
                            j : j + (wo - 1) * stride + 1 : stride, :] += dcols[:, :, :, i, j, :]
            send(x, dxp[:, pad : pad + h, pad : pad + wd, :] if pad else dxp)

    return _make(data, "conv2d", parents, bwd)


def avg_pool2d(x, k: int = 2) -> Value:
    x = as_value(x)
    if x.ndim != 4:
        raise ValueError(f"avg_pool2d expects 4-d input, got {x.shape}")
    n, h, w, c = x.shape
    if h % k or w % k:
        raise ValueError(f"avg_pool2d: spatial dims of {x.shape} not divisible by {k}")
    data = x.data.reshape(n, h // k, k, w // k, k, c).mean(axis=(2, 4))

    def bwd(g, send):
        if x._needs_grad:
            send(x, np.repeat(np.repeat(g, k, axis=1), k, axis=2) / (k * k))

    return _make(data, "avg_pool2d", (x,), bwd, check=False)


def upsample_nearest2d(x, k: int = 2) -> Value:
    x = as_value(x)
    if x.ndim != 4:
        raise ValueError(f"upsample_nearest2d expects 4-d input, got {x.shape}")
    n, h, w, c = x.shape
    data = np.repeat(np.repeat(x.data, k, axis=1), k, axis=2)

    def bwd(g, send):
        if x._needs_grad:
            send(x, g.reshape(n, h, k, w, k, c).sum(axis=(2, 4)))

    return _make(data, "upsample_nearest2d", (x,), bwd, check=False)


# ---------------------------------------------------------------------------
# normalization, activations, attention


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Value:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = as_value(x), as_value(gain), as_value(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = np.einsum("...d,...d->...", centered, centered)[..., None] / d
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = xhat * gain.data
    data += bias.data

    def bwd(g, send):
        if gain._needs_grad:
            send(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias._needs_grad:
            send(bias, g.reshape(-1, d).sum(axis=0))
        if x._needs_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            send(x, inv_std * (dxhat - m1 - xhat * m2))

    return _make(data, "layer_norm", (x, gain, bias), bwd)


# activations and softmaxes below map finite inputs to finite outputs by
# construction, so they skip the output finite-check


def softmax(x) -> Value:
    """Softmax over the last axis (numerically stable)."""
    x = as_value(x)
    data = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(data, out=data)
    data /= data.sum(axis=-1, keepdims=True)

    def bwd(g, send):
        if x._needs_grad:
            send(x, data * (g - (g * data).sum(axis=-1, keepdims=True)))

    return _make(data, "softmax", (x,), bwd, check=False)


def log_softmax(x) -> Value:
    x = as_value(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    probs = np.exp(shifted)
    norm = probs.sum(axis=-1, keepdims=True)
    probs /= norm
    data = shifted - np.log(norm)

    def bwd(g, send):
        if x._needs_grad:
            send(x, g - probs * g.sum(axis=-1, keepdims=True))

    return _make(data, "log_softmax", (x,), bwd, check=False)


def silu(x) -> Value:
    x = as_value(x)
    with np.errstate(over="ignore"):  # exp overflow resolves to the correct 0/x limits
        sig = 1.0 / (1.0 + np.exp(-x.data))
    data = x.data * sig

    def bwd(g, send):
        if x._needs_grad:
            send(x, g * sig * (1.0 + x.data * (1.0 - sig)))

    return _make(data, "silu", (x,), bwd, check=False)


def gelu(x) -> Value:
    """Exact Gaussian-error-linear unit: x * Phi(x)."""
    x = as_value(x)
    phi_cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    data = x.data * phi_cdf

    def bwd(g, send):
        if x._needs_grad:
            pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
            send(x, g * (phi_cdf + x.data * pdf))

    return _make(data, "gelu", (x,), bwd, check=False)


def multi_head_attention(q, k, v, heads: int) -> Value:
    """Scaled dot-product attention over (N, T, d) tensors, d split across heads.

    Built from the primitives above, so its backward is exact by composition.
    """
    q, k, v = as_value(q), as_value(k), as_value(v)
    if not (q.shape == k.shape == v.shape) or q.ndim != 3:
        raise ValueError(f"attention expects matching (N, T, d) inputs, got {q.shape}, {k.shape}, {v.shape}")
    n, t, d = q.shape
    if d % heads:
        raise ValueError(f"model dim {d} not divisible by {heads} heads")
    hd = d // heads

    def split(x):
        return transpose(reshape(x, (n, t, heads, hd)), (0, 2, 1, 3))

    qh, kh, vh = split(q), split(k), split(v)
    scores = mul(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    attn = softmax(scores)
    out = matmul(attn, vh)
    return reshape(transpose(out, (0, 2, 1, 3)), (n, t, d))


# ---------------------------------------------------------------------------
# reductions, shape plumbing, indexing


def mean(x, axis=None) -> Value:
    x = as_value(x)
    data = x.data.mean(axis=axis)
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.data.shape[a] for a in axes]))

    def bwd(g, send):
        if not x._needs_grad:
            return
        if axis is None:
            send(x, np.full(x.data.shape, float(g) / count))
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            send(x, np.broadcast_to(np.expand_dims(g, axes), x.data.shape) / count)

    return _make(np.asarray(data, dtype=np.float64), "mean", (x,), bwd, check=False)


def reshape(x, shape) -> Value:
    x = as_value(x)
    data = x.data.reshape(shape)

    def bwd(g, send):
        if x._needs_grad:
            send(x, g.reshape(x.data.shape))

    return _make(data, "reshape", (x,), bwd, check=False)


def transpose(x, axes) -> Value:
    x = as_value(x)
    data = x.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g, send):
        if x._needs_grad:
            send(x, g.transpose(inverse))

    return _make(data, "transpose", (x,), bwd, check=False)


def concat(values, axis: int = -1) -> Value:
    values = [as_value(v) for v in values]
    if not values:
        raise ValueError("concat of no values")
    data = np.concatenate([v.data for v in values], axis=axis)
    sizes = [v.data.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def bwd(g, send):
        for v, start, stop in zip(values, offsets[:-1], offsets[1:]):
            if v._needs_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, stop)
                send(v, g[tuple(idx)])

    return _make(data, "concat", tuple(values), bwd, check=False)


def embedding_lookup(table, ids) -> Value:
    """Row lookup into a (V, d) table; gradients scatter-add back."""
    table = as_value(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ValueError(f"embedding table must be 2-d, got {table.shape}")
    if np.any(ids < 0) or np.any(ids >= table.shape[0]):
        raise ValueError(f"ids out of range for table with {table.shape[0]} rows")
    data = table.data[ids]

    def bwd(g, send):
        if table._needs_grad:
            dt = np.zeros_like(table.data)
            np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            send(table, dt)

    return _make(data, "embedding_lookup", (table,), bwd, check=False)


def take_per_row(x, idx) -> Value:
    """Pick one column per row: (N, K) indexed by (N,) -> (N,)."""
    x = as_value(x)
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ValueError(f"take_per_row: input {x.shape} does not match index {idx.shape}")
    if np.any(idx < 0) or np.any(idx >= x.shape[1]):
        raise ValueError(f"take_per_row: index out of range for {x.shape[1]} columns")
    rows = np.arange(x.shape[0])
    data = x.data[rows, idx]

    def bwd(g, send):
        if x._needs_grad:
            dx = np.zeros_like(x.data)
            dx[rows, idx] = g
            send(x, dx)

    return _make(data, "take_per_row", (x,), bwd, check=False)
