"""Reverse-mode automatic differentiation over numpy arrays.

Every operation builds a graph node holding a backward closure; calling
``backward()`` on a scalar loss walks the recorded graph once in reverse
topological order and accumulates gradients into the leaves. Convolutions run
as im2col matrix products, which keeps the heavy lifting inside BLAS.
"""

from __future__ import annotations

import numpy as np

from ..geometry import VoiError

_DEFAULT_DTYPE = np.dtype(np.float32)
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in _FLOAT_DTYPES:
        raise VoiError("default dtype must be float32 or float64")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """Node in the recorded operation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and data.dtype in _FLOAT_DTYPES:
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def backward(self):
        """Accumulate gradients of this scalar into every reachable leaf.

        The recorded graph is walked exactly once per node, children before
        parents (reverse topological order).
        """
        if self.data.size != 1:
            raise VoiError("backward() requires a scalar")
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar; the functions below do the real work
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={'set' if self.grad is not None else 'none'})"


def _make(data, parents, backward):
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _acc(t: Tensor, g):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = np.array(np.broadcast_to(g, t.data.shape))
    else:
        t.grad += g


def _unbroadcast(grad, shape):
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a, b):
    if not isinstance(b, Tensor):
        a_t = a
        out = a_t.data + b
        return _make(out, (a_t,), lambda g: _acc(a_t, g))
    out = a.data + b.data

    def bw(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), bw)


def mul(a, b):
    if not isinstance(b, Tensor):
        a_t = a
        out = a_t.data * b
        return _make(out, (a_t,), lambda g: _acc(a_t, g * b))
    out = a.data * b.data

    def bw(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), bw)


def matmul(a: Tensor, b: Tensor):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise VoiError(f"matmul shape mismatch {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def bw(g):
        _acc(a, g @ b.data.T)
        _acc(b, a.data.T @ g)

    return _make(out, (a, b), bw)


def relu(x: Tensor):
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: _acc(x, g * mask))


def leaky_relu(x: Tensor, slope=0.2):
    factor = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)
    return _make(x.data * factor, (x,), lambda g: _acc(x, g * factor))


def tanh(x: Tensor):
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: _acc(x, g * (1.0 - out * out)))


def sigmoid(x: Tensor):
    out = 1.0 / (1.0 + np.exp(-x.data))
    return _make(out, (x,), lambda g: _acc(x, g * out * (1.0 - out)))


def abs_(x: Tensor):
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: _acc(x, g * sign))


def pow_const(x: Tensor, p: float):
    out = x.data**p
    return _make(out, (x,), lambda g: _acc(x, g * p * x.data ** (p - 1.0)))


def tsum(x: Tensor, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(x, np.broadcast_to(g, x.data.shape))

    return _make(out, (x,), bw)


def tmean(x: Tensor, axis=None, keepdims=False):
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= x.data.shape[ax]
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(x, np.broadcast_to(g, x.data.shape) / count)

    return _make(out, (x,), bw)


def reshape(x: Tensor, shape):
    old = x.data.shape
    return _make(x.data.reshape(shape), (x,), lambda g: _acc(x, g.reshape(old)))


def transpose(x: Tensor, axes):
    inverse = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: _acc(x, g.transpose(inverse)))


# ---------------------------------------------------------------------------
# spatial ops (NCHW)


def _pad_amounts(kh, kw, padding):
    if padding == "valid":
        return 0, 0
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise VoiError("'same' padding requires odd kernel sizes")
        return (kh - 1) // 2, (kw - 1) // 2
    raise VoiError(f"unknown padding '{padding}'")


def _im2col(x, kh, kw, stride, ph, pw):
    n, c, h, w = x.shape
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    n_, c_, oh, ow = win.shape[:4]
    # reshape of the transposed view materializes one contiguous copy
    col = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return col, oh, ow


def _col2im(dcol, xshape, kh, kw, stride, ph, pw, oh, ow):
    n, c, h, w = xshape
    dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=dcol.dtype)
    # contiguous (kh, kw)-leading layout so each tap is one dense block
    d6 = np.ascontiguousarray(dcol.reshape(n, oh, ow, c, kh, kw).transpose(4, 5, 0, 3, 1, 2))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += d6[i, j]
    if ph or pw:
        return dxp[:, :, ph : ph + h, pw : pw + w]
    return dxp


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: str = "same"):
    """Cross-correlation of NCHW input with OIHW kernels.

    Output spatial size is floor((H + 2p - kh)/stride) + 1.
    """
    n, c, h, wi = x.data.shape
    o, i, kh, kw = w.data.shape
    if c != i:
        raise VoiError(f"conv2d channel mismatch: input {c}, kernel {i}")
    ph, pw = _pad_amounts(kh, kw, padding)
    if h + 2 * ph < kh or wi + 2 * pw < kw:
        raise VoiError("kernel larger than padded input")
    col, oh, ow = _im2col(x.data, kh, kw, stride, ph, pw)
    wmat = w.data.reshape(o, -1)
    out = col @ wmat.T
    if bias is not None:
        out = out + bias.data.reshape(1, o)
    out4 = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        if w.requires_grad:
            _acc(w, (g2.T @ col).reshape(w.data.shape))
        if bias is not None and bias.requires_grad:
            _acc(bias, g2.sum(axis=0).reshape(bias.data.shape))
        if x.requires_grad:
            if stride == 1:
                # backward-data as a correlation with the rotated kernel:
                # one im2col + GEMM instead of scatter-adds
                w_rot = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
                col_g, _, _ = _im2col(g, kh, kw, 1, kh - 1 - ph, kw - 1 - pw)
                dx = (col_g @ w_rot.reshape(c, -1).T).reshape(n, h, wi, c).transpose(0, 3, 1, 2)
                _acc(x, dx)
            else:
                dcol = g2 @ wmat
                _acc(x, _col2im(dcol, x.data.shape, kh, kw, stride, ph, pw, oh, ow))

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out4, parents, bw)


def conv2d_transpose(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0):
    """Transposed convolution (gradient of conv2d w.r.t. its input).

    Kernels are IOHW; output spatial size is (H-1)*stride - 2*padding + kh.
    """
    n, c, h, wi = x.data.shape
    ci, o, kh, kw = w.data.shape
    if c != ci:
        raise VoiError(f"conv2d_transpose channel mismatch: input {c}, kernel {ci}")
    oh = (h - 1) * stride - 2 * padding + kh
    ow = (wi - 1) * stride - 2 * padding + kw
    if oh <= 0 or ow <= 0:
        raise VoiError("conv2d_transpose output would be empty")
    x2 = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(-1, c)
    wmat = w.data.reshape(c, -1)  # (C, O*kh*kw)
    dcol = x2 @ wmat
    out = _col2im(dcol, (n, o, oh, ow), kh, kw, stride, padding, padding, h, wi)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)

    def bw(g):
        col_g, _, _ = _im2col(g, kh, kw, stride, padding, padding)
        if x.requires_grad:
            dx = (col_g @ wmat.T).reshape(n, h, wi, c).transpose(0, 3, 1, 2)
            _acc(x, dx)
        if w.requires_grad:
            _acc(w, (x2.T @ col_g).reshape(w.data.shape))
        if bias is not None and bias.requires_grad:
            _acc(bias, g.sum(axis=(0, 2, 3)).reshape(bias.data.shape))

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, bw)


def maxpool2d(x: Tensor, k: int = 2):
    """Non-overlapping k*k max pooling; ties route the gradient to the first
    maximum in window scan order."""
    n, c, h, w = x.data.shape
    if h % k or w % k:
        raise VoiError(f"maxpool2d needs dimensions divisible by {k}")
    oh, ow = h // k, w // k
    x5 = x.data.reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, k * k)
    idx = x5.argmax(axis=-1)
    out = np.take_along_axis(x5, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        d5 = np.zeros_like(x5)
        np.put_along_axis(d5, idx[..., None], g[..., None], axis=-1)
        dx = d5.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        _acc(x, dx)

    return _make(out, (x,), bw)


def upsample_nearest(x: Tensor, factor: int = 2):
    n, c, h, w = x.data.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def bw(g):
        _acc(x, g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)))

    return _make(out, (x,), bw)


def global_avg_pool(x: Tensor):
    """(N,C,H,W) -> (N,C) spatial mean."""
    return tmean(x, axis=(2, 3))


def norm_affine(x: Tensor, gamma, beta, axes, eps=1e-5):
    """Fused normalization: standardize x over `axes`, then scale/shift.

    Returns (out, mean, var) where mean/var are the plain batch moments (used
    by running-average updates). gamma/beta may be None for a bare
    standardization. Single fused backward instead of a dozen temporaries.
    """
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    if gamma is not None:
        out = xhat * gamma.data + beta.data
    else:
        out = xhat

    def bw(g):
        if gamma is not None:
            if gamma.requires_grad:
                _acc(gamma, _unbroadcast(g * xhat, gamma.data.shape))
            if beta.requires_grad:
                _acc(beta, _unbroadcast(g, beta.data.shape))
            gx = g * gamma.data
        else:
            gx = g
        if x.requires_grad:
            m1 = gx.mean(axis=axes, keepdims=True)
            m2 = (gx * xhat).mean(axis=axes, keepdims=True)
            _acc(x, inv * (gx - m1 - xhat * m2))

    parents = (x,) if gamma is None else (x, gamma, beta)
    return _make(out, parents, bw), mu, var


# ---------------------------------------------------------------------------
# classification heads


def softmax(x: Tensor, axis: int = -1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        _acc(x, s * (g - dot))

    return _make(s, (x,), bw)


def softmax_xent(logits: Tensor, labels):
    """Mean negative log likelihood of integer labels under row softmax."""
    labels = np.asarray(labels)
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise VoiError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise VoiError("label out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    denom = e.sum(axis=1, keepdims=True)
    log_probs = z - np.log(denom)
    loss = -log_probs[np.arange(n), labels].mean()

    def bw(g):
        probs = e / denom
        probs[np.arange(n), labels] -= 1.0
        _acc(logits, (float(g) / n) * probs)

    return _make(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw)
