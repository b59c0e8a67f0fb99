"""Minimal dense-tensor engine with reverse-mode differentiation.

Tensors wrap a numpy array (float32 by default, float64 for gradient
checking) together with an optional gradient slot. Operations build a
computation graph of closures; calling ``backward`` on a scalar walks the
graph once in reverse topological order and accumulates gradients into
every node that requires them. A graph is single-use: building a fresh
forward pass is required before differentiating again.
"""

from __future__ import annotations

import numpy as np

# Layer wrappers validate their outputs when this is set; raw ops do not.
CHECK_FINITE = True


class GraphError(RuntimeError):
    """Raised on misuse of the computation graph (re-backward, non-scalar loss)."""


class NumericsError(ArithmeticError):
    """Raised when a forward or backward pass produces non-finite values."""


def _as_array(x, dtype=None):
    arr = np.asarray(x, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_spent")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self._spent = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype})"

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad = self.grad + g

    def backward(self):
        """Reverse-mode sweep from a scalar; consumes the graph."""
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar, got shape {self.shape}")
        if self._spent:
            raise GraphError("graph already consumed; re-run the forward pass")

        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node._spent and node._parents:
                raise GraphError("graph already consumed; re-run the forward pass")
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            node._spent = True

    # -- convenience arithmetic used by model heads and losses --

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __radd__ = __add__
    __rmul__ = __mul__

    def reshape(self, *shape):
        return reshape(self, shape)


def _needs_grad(*tensors):
    return any(isinstance(t, Tensor) and t.requires_grad or
               (isinstance(t, Tensor) and t._parents) for t in tensors)


def _wrap_const(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    b = _wrap_const(b, a)
    out = Tensor(a.data + b.data, _parents=(a, b))

    def bwd(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    out._backward = bwd
    return out


def mul(a, b):
    b = _wrap_const(b, a)
    out = Tensor(a.data * b.data, _parents=(a, b))

    def bwd(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    out._backward = bwd
    return out


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape), _parents=(a,))

    def bwd(g):
        a._accumulate(g.reshape(a.data.shape))

    out._backward = bwd
    return out


def concat(tensors, axis=1):
    datas = [t.data for t in tensors]
    out = Tensor(np.concatenate(datas, axis=axis), _parents=tuple(tensors))
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(piece)

    out._backward = bwd
    return out


def relu(x):
    out = Tensor(np.maximum(x.data, 0), _parents=(x,))

    def bwd(g):
        x._accumulate(g * (x.data > 0))

    out._backward = bwd
    return out


def sigmoid(x):
    y = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(y, _parents=(x,))

    def bwd(g):
        x._accumulate(g * y * (1.0 - y))

    out._backward = bwd
    return out


def softmax(x, axis=1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, _parents=(x,))

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        x._accumulate((g - dot) * y)

    out._backward = bwd
    return out


def mean_all(x):
    out = Tensor(np.asarray(x.data.mean(), dtype=x.dtype), _parents=(x,))
    n = x.data.size

    def bwd(g):
        x._accumulate(np.full_like(x.data, float(g) / n))

    out._backward = bwd
    return out


def sum_all(x):
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype), _parents=(x,))

    def bwd(g):
        x._accumulate(np.full_like(x.data, float(g)))

    out._backward = bwd
    return out


def linear(x, w, b=None):
    """x: (N, F) or (F,); w: (O, F); b: (O,)."""
    squeeze = x.data.ndim == 1
    xd = x.data[None, :] if squeeze else x.data
    y = xd @ w.data.T
    if b is not None:
        y = y + b.data
    out = Tensor(y[0] if squeeze else y, _parents=(x, w) + ((b,) if b is not None else ()))

    def bwd(g):
        g2 = g[None, :] if squeeze else g
        w._accumulate(g2.T @ xd)
        if b is not None:
            b._accumulate(g2.sum(axis=0))
        gx = g2 @ w.data
        x._accumulate(gx[0] if squeeze else gx)

    out._backward = bwd
    return out


# -- spatial ops; all take (N, C, H, W) --

def conv2d_shape(extent, kernel, stride, padding):
    out = (extent + 2 * padding - kernel) // stride + 1
    if out <= 0:
        raise ValueError(
            f"conv2d output extent {out} not positive "
            f"(in={extent}, k={kernel}, s={stride}, p={padding})")
    return out


def _wants_grad(t):
    return t.requires_grad or bool(t._parents)


def _im2col_nhwc(xc, kh, kw, sh, sw):
    """Column matrix (N*Ho*Wo, kh*kw*C) from a channels-last padded array.

    Row layout is (kh, kw, C) with channels innermost, so the gather copies
    contiguous C-sized runs.
    """
    win = np.lib.stride_tricks.sliding_window_view(xc, (kh, kw), axis=(1, 2))
    win = win[:, ::sh, ::sw]                       # (N, Ho, Wo, C, kh, kw)
    n, ho, wo = win.shape[:3]
    win = win.transpose(0, 1, 2, 4, 5, 3)          # (N, Ho, Wo, kh, kw, C)
    return win.reshape(n * ho * wo, kh * kw * win.shape[5]), ho, wo


def conv2d(x, w, stride=1, padding=0):
    """Cross-correlation of x:(N,C,H,W) with w:(Cout,C,kh,kw).

    Internally channels-last; the kernel is reordered to a (kh*kw*C, Cout)
    matrix so forward is a single column-matrix product. The input gradient
    is built tap by tap with strided scatter-adds, and gradients into
    non-differentiable leaves (raw image batches) are skipped entirely.
    """
    sh, sw = (stride, stride) if np.isscalar(stride) else stride
    ph, pw = (padding, padding) if np.isscalar(padding) else padding
    n, c, h, wdt = x.data.shape
    cout, cin, kh, kw = w.data.shape
    if cin != c:
        raise ValueError(f"conv2d channel mismatch: input {c}, kernel {cin}")
    ho = conv2d_shape(h, kh, sh, ph)
    wo = conv2d_shape(wdt, kw, sw, pw)

    xc = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))  # NHWC
    if ph or pw:
        xc = np.pad(xc, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    cols, _, _ = _im2col_nhwc(xc, kh, kw, sh, sw)
    wmat = np.ascontiguousarray(
        w.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, cout))
    y = (cols @ wmat).reshape(n, ho, wo, cout)
    out = Tensor(np.ascontiguousarray(y.transpose(0, 3, 1, 2)),
                 _parents=(x, w))

    def bwd(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)) \
            .reshape(n * ho * wo, cout)
        if _wants_grad(w):
            cols_b, _, _ = _im2col_nhwc(xc, kh, kw, sh, sw)
            dw = (cols_b.T @ gmat).reshape(kh, kw, c, cout)
            w._accumulate(np.ascontiguousarray(dw.transpose(3, 2, 0, 1)))
        if _wants_grad(x):
            dxp = np.zeros(xc.shape, dtype=g.dtype)
            taps = wmat.reshape(kh, kw, c, cout)
            for i in range(kh):
                for j in range(kw):
                    contrib = (gmat @ taps[i, j].T).reshape(n, ho, wo, c)
                    dxp[:, i:i + sh * ho:sh, j:j + sw * wo:sw, :] += contrib
            dx = dxp[:, ph:ph + h, pw:pw + wdt, :]
            x._accumulate(np.ascontiguousarray(dx.transpose(0, 3, 1, 2)))

    out._backward = bwd
    return out


def batchnorm2d(x, gamma, beta, running_mean, running_var, training,
                momentum=0.1, eps=1e-5):
    """Per-channel normalization; batch statistics in training, running in eval.

    ``running_mean``/``running_var`` are plain arrays mutated in place during
    training (biased variance convention throughout).
    """
    xd = x.data
    if training:
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu
        running_var *= (1.0 - momentum)
        running_var += momentum * var
    else:
        mu = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    out = Tensor(y.astype(xd.dtype, copy=False), _parents=(x, gamma, beta))

    def bwd(g):
        gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        beta._accumulate(g.sum(axis=(0, 2, 3)))
        gi = gamma.data[None, :, None, None] * inv[None, :, None, None]
        if training:
            m = g.mean(axis=(0, 2, 3), keepdims=True)
            mx = (g * xhat).mean(axis=(0, 2, 3), keepdims=True)
            x._accumulate(gi * (g - m - xhat * mx))
        else:
            x._accumulate(gi * g)

    out._backward = bwd
    return out


def _pool_prepare(x, kernel, stride):
    kh, kw = (kernel, kernel) if np.isscalar(kernel) else kernel
    sh, sw = (kh, kw) if stride is None else ((stride, stride) if np.isscalar(stride) else stride)
    n, c, h, w = x.data.shape
    ho = conv2d_shape(h, kh, sh, 0)
    wo = conv2d_shape(w, kw, sw, 0)
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw, :, :].reshape(n, c, ho, wo, kh * kw)
    return win, (n, c, h, w), (ho, wo), (kh, kw), (sh, sw)


def _pool_scatter(shape, idx_or_none, g, dims, kernel, stride, avg):
    n, c, h, w = shape
    ho, wo = dims
    kh, kw = kernel
    sh, sw = stride
    dx = np.zeros(shape, dtype=g.dtype)
    oy, ox = np.meshgrid(np.arange(ho) * sh, np.arange(wo) * sw, indexing="ij")
    if avg:
        gshare = g / (kh * kw)
        for dy in range(kh):
            for dxx in range(kw):
                np.add.at(dx, (slice(None), slice(None), oy + dy, ox + dxx), gshare)
    else:
        ky = idx_or_none // kw
        kx = idx_or_none % kw
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(dx, (ni, ci, oy[None, None] + ky, ox[None, None] + kx), g)
    return dx


def maxpool2d(x, kernel, stride=None):
    win, shape, dims, k, s = _pool_prepare(x, kernel, stride)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    out = Tensor(np.ascontiguousarray(y), _parents=(x,))

    def bwd(g):
        x._accumulate(_pool_scatter(shape, idx, g, dims, k, s, avg=False))

    out._backward = bwd
    return out


def avgpool2d(x, kernel, stride=None):
    win, shape, dims, k, s = _pool_prepare(x, kernel, stride)
    out = Tensor(np.ascontiguousarray(win.mean(axis=-1)), _parents=(x,))

    def bwd(g):
        x._accumulate(_pool_scatter(shape, None, g, dims, k, s, avg=True))

    out._backward = bwd
    return out


def global_avgpool2d(x):
    n, c, h, w = x.data.shape
    out = Tensor(x.data.mean(axis=(2, 3)), _parents=(x,))

    def bwd(g):
        x._accumulate(np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape))

    out._backward = bwd
    return out


def check_finite(arr, context=""):
    if not np.isfinite(arr).all():
        raise NumericsError(f"non-finite values produced{': ' + context if context else ''}")


def collect_gradients(loss, params):
    """Run backward from ``loss`` and return one gradient per parameter."""
    for p in params:
        p.zero_grad()
    loss.backward()
    grads = []
    for p in params:
        if p.grad is None:
            grads.append(np.zeros_like(p.data))
        else:
            grads.append(p.grad)
    return grads
