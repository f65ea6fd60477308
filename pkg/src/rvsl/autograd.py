"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

Provides exactly the primitives the domain-transformation / ReID networks and
their losses need: 2d convolution and its exact adjoint, batch norm, relu,
global average pooling, dense layers, channel concat, elementwise arithmetic,
reductions, min-reductions (for the dark channel), and gradient stopping.

Conventions:
  * images and feature maps are NCHW, embeddings/logits are (N, D)
  * all data is float64, row-major
  * tensors are immutable once produced; ops return fresh tensors
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    """A dense float64 array plus the graph edge needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- light operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))


def tensor(data):
    """Constant (non-trainable) tensor."""
    return Tensor(data, requires_grad=False)


def parameter(data):
    """Trainable tensor; receives gradients on backward."""
    return Tensor(data, requires_grad=True)


def _make(data, parents, backward_fn):
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs,
                  _parents=parents if needs else (),
                  _backward=backward_fn if needs else None)


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's shape rule."""


def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# -- elementwise / arithmetic -------------------------------------------------

def add(a, b):
    _check_same_shape(a, b, "add")
    out = _make(a.data + b.data, (a, b), None)

    def bwd(g):
        _accum(a, g)
        _accum(b, g)
    out._backward = bwd
    return out


def sub(a, b):
    _check_same_shape(a, b, "sub")
    out = _make(a.data - b.data, (a, b), None)

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)
    out._backward = bwd
    return out


def mul(a, b):
    _check_same_shape(a, b, "mul")
    out = _make(a.data * b.data, (a, b), None)

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)
    out._backward = bwd
    return out


def div(a, b):
    _check_same_shape(a, b, "div")
    out = _make(a.data / b.data, (a, b), None)

    def bwd(g):
        _accum(a, g / b.data)
        _accum(b, -g * a.data / (b.data * b.data))
    out._backward = bwd
    return out


def scale(a, s):
    s = float(s)
    out = _make(a.data * s, (a,), None)

    def bwd(g):
        _accum(a, g * s)
    out._backward = bwd
    return out


def add_scalar(a, s):
    s = float(s)
    out = _make(a.data + s, (a,), None)

    def bwd(g):
        _accum(a, g)
    out._backward = bwd
    return out


def absolute(a):
    out = _make(np.abs(a.data), (a,), None)

    def bwd(g):
        _accum(a, g * np.sign(a.data))
    out._backward = bwd
    return out


def exp(a):
    val = np.exp(a.data)
    out = _make(val, (a,), None)

    def bwd(g):
        _accum(a, g * val)
    out._backward = bwd
    return out


def log(a):
    out = _make(np.log(a.data), (a,), None)

    def bwd(g):
        _accum(a, g / a.data)
    out._backward = bwd
    return out


def sqrt(a):
    val = np.sqrt(a.data)
    out = _make(val, (a,), None)

    def bwd(g):
        _accum(a, g * 0.5 / val)
    out._backward = bwd
    return out


def sigmoid(a):
    val = 1.0 / (1.0 + np.exp(-a.data))
    out = _make(val, (a,), None)

    def bwd(g):
        _accum(a, g * val * (1.0 - val))
    out._backward = bwd
    return out


def relu(a):
    mask = a.data > 0
    out = _make(np.where(mask, a.data, 0.0), (a,), None)

    def bwd(g):
        _accum(a, g * mask)
    out._backward = bwd
    return out


def clip(a, lo, hi):
    """Clamp values to [lo, hi]; gradient passes only through the interior."""
    inside = (a.data >= lo) & (a.data <= hi)
    out = _make(np.clip(a.data, lo, hi), (a,), None)

    def bwd(g):
        _accum(a, g * inside)
    out._backward = bwd
    return out


def stopgrad(a):
    """Value of ``a`` with zero gradient flow (masks, airlight constants)."""
    return Tensor(a.data.copy(), requires_grad=False)


# -- reductions ---------------------------------------------------------------

def total_sum(a):
    out = _make(np.array(a.data.sum()), (a,), None)

    def bwd(g):
        _accum(a, np.full_like(a.data, float(g)))
    out._backward = bwd
    return out


def total_mean(a):
    n = a.data.size
    out = _make(np.array(a.data.mean()), (a,), None)

    def bwd(g):
        _accum(a, np.full_like(a.data, float(g) / n))
    out._backward = bwd
    return out


def axis_sum(a, axis, keepdims=False):
    out = _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), None)

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape).copy())
    out._backward = bwd
    return out


def axis_min(a, axis):
    """Min along one axis; subgradient routes to the first minimal element."""
    idx = np.argmin(a.data, axis=axis)
    val = np.min(a.data, axis=axis)
    out = _make(val, (a,), None)

    def bwd(g):
        da = np.zeros_like(a.data)
        gi = list(np.indices(val.shape))
        gi.insert(axis if axis >= 0 else a.data.ndim + axis, idx)
        np.add.at(da, tuple(gi), g)
        _accum(a, da)
    out._backward = bwd
    return out


def channel_min(a):
    """Per-pixel minimum over channels: (N,C,H,W) -> (N,H,W)."""
    if a.data.ndim != 4:
        raise ShapeError(f"channel_min expects NCHW, got {a.data.shape}")
    return axis_min(a, axis=1)


def window_min(a, patch):
    """Spatial min over a patch x patch window, valid sub-windows at borders.

    (N,H,W) -> (N,H,W). Gradient routes to the argmin (first in scan order).
    """
    if patch < 1 or patch % 2 == 0:
        raise ValueError(f"window_min patch must be odd and >= 1, got {patch}")
    n, h, w = a.data.shape
    if patch > h and patch > w:
        raise ShapeError(f"patch {patch} larger than both image dims {h}x{w}")
    half = patch // 2
    padded = np.pad(a.data, ((0, 0), (half, half), (half, half)),
                    constant_values=np.inf)
    win = sliding_window_view(padded, (patch, patch), axis=(1, 2))
    flat = win.reshape(n, h, w, patch * patch)
    idx = np.argmin(flat, axis=-1)
    val = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out = _make(val, (a,), None)

    def bwd(g):
        da = np.zeros_like(a.data)
        wi, wj = idx // patch, idx % patch
        ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        ti = ii[None, :, :] + wi - half
        tj = jj[None, :, :] + wj - half
        nn = np.broadcast_to(np.arange(n)[:, None, None], (n, h, w))
        np.add.at(da, (nn.ravel(), ti.ravel(), tj.ravel()), g.ravel())
        _accum(a, da)
    out._backward = bwd
    return out


def global_avg_pool(a):
    """(N,C,H,W) -> (N,C), mean over the spatial dims."""
    if a.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {a.data.shape}")
    n, c, h, w = a.data.shape
    out = _make(a.data.mean(axis=(2, 3)), (a,), None)

    def bwd(g):
        _accum(a, np.broadcast_to(g[:, :, None, None] / (h * w), a.data.shape).copy())
    out._backward = bwd
    return out


def l2_normalize(a, axis=-1, eps=1e-12):
    s = np.sum(a.data * a.data, axis=axis, keepdims=True)
    r = 1.0 / np.sqrt(s + eps)
    val = a.data * r
    out = _make(val, (a,), None)

    def bwd(g):
        dot = np.sum(g * a.data, axis=axis, keepdims=True)
        _accum(a, g * r - a.data * dot * r ** 3)
    out._backward = bwd
    return out


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    val = e / e.sum(axis=axis, keepdims=True)
    out = _make(val, (a,), None)

    def bwd(g):
        dot = np.sum(g * val, axis=axis, keepdims=True)
        _accum(a, val * (g - dot))
    out._backward = bwd
    return out


def log_softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    val = shifted - lse
    sm = np.exp(val)
    out = _make(val, (a,), None)

    def bwd(g):
        _accum(a, g - sm * g.sum(axis=axis, keepdims=True))
    out._backward = bwd
    return out


def concat_channels(parts):
    """Concatenate NCHW tensors along the channel dim."""
    shapes = [p.data.shape for p in parts]
    for s in shapes:
        if len(s) != 4 or (s[0],) + s[2:] != (shapes[0][0],) + shapes[0][2:]:
            raise ShapeError(f"concat_channels: incompatible shapes {shapes}")
    out = _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), None)
    splits = np.cumsum([s[1] for s in shapes])[:-1]

    def bwd(g):
        for p, gp in zip(parts, np.split(g, splits, axis=1)):
            _accum(p, gp)
    out._backward = bwd
    return out


def narrow(a, axis, start, length):
    """Contiguous slice along one axis; backward pads zeros."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = _make(a.data[idx], (a,), None)

    def bwd(g):
        da = np.zeros_like(a.data)
        da[idx] = g
        _accum(a, da)
    out._backward = bwd
    return out


def take_rows(a, indices):
    """Row gather along axis 0; backward scatter-adds (rows may repeat)."""
    indices = np.asarray(indices, dtype=np.intp)
    out = _make(a.data[indices], (a,), None)

    def bwd(g):
        da = np.zeros_like(a.data)
        np.add.at(da, indices, g)
        _accum(a, da)
    out._backward = bwd
    return out


# -- convolution and friends --------------------------------------------------

def _conv_out_dim(size, k, s, p):
    return (size + 2 * p - k) // s + 1


def _im2col(x, k, s, p):
    n, c, h, w = x.shape
    ho, wo = _conv_out_dim(h, k, s, p), _conv_out_dim(w, k, s, p)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    # (N, C, Ho, Wo, k, k) -> (N, Ho*Wo, C*k*k)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * k * k)
    return cols, ho, wo


def _conv_forward(x, w, s, p):
    n = x.shape[0]
    cout, cin, k, _ = w.shape
    cols, ho, wo = _im2col(x, k, s, p)
    y = cols @ w.reshape(cout, -1).T
    return y.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)


def _conv_input_grad(dy, w, in_hw, s, p):
    """Adjoint of _conv_forward w.r.t. the input (also the transpose-conv map)."""
    n, cout, ho, wo = dy.shape
    _, cin, k, _ = w.shape
    h, wdt = in_hw
    dxp = np.zeros((n, cin, h + 2 * p, wdt + 2 * p))
    for di in range(k):
        for dj in range(k):
            contrib = np.einsum("nohw,oc->nchw", dy, w[:, :, di, dj])
            dxp[:, :, di:di + ho * s:s, dj:dj + wo * s:s] += contrib
    return dxp[:, :, p:p + h, p:p + wdt]


def _conv_weight_grad(x, dy, w_shape, s, p):
    cout, cin, k, _ = w_shape
    cols, ho, wo = _im2col(x, k, s, p)
    dy_cols = dy.transpose(0, 2, 3, 1).reshape(x.shape[0], ho * wo, cout)
    dw = np.einsum("nlo,nlc->oc", dy_cols, cols)
    return dw.reshape(w_shape)


def conv2d(x, w, b=None, stride=1, padding=0):
    """2d convolution (cross-correlation). x: NCHW, w: (Cout,Cin,k,k)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4d tensors, got {x.data.shape}, {w.data.shape}")
    if w.data.shape[2] <= 0 or stride <= 0:
        raise ValueError(f"conv2d: non-positive kernel/stride (k={w.data.shape[2]}, s={stride})")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"conv2d: channel mismatch {x.data.shape[1]} vs {w.data.shape[1]}")
    k = w.data.shape[2]
    if x.data.shape[2] + 2 * padding < k or x.data.shape[3] + 2 * padding < k:
        raise ShapeError(f"conv2d: kernel {k} exceeds padded input {x.data.shape}")
    val = _conv_forward(x.data, w.data, stride, padding)
    if b is not None:
        val = val + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)
    out = _make(val, parents, None)

    def bwd(g):
        _accum(x, _conv_input_grad(g, w.data, x.data.shape[2:], stride, padding))
        _accum(w, _conv_weight_grad(x.data, g, w.data.shape, stride, padding))
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3)))
    out._backward = bwd
    return out


def conv2d_transpose(x, w, b=None, stride=1, padding=0, out_hw=None):
    """Exact adjoint of conv2d. x: (N,Cx,H,W), w: (Cx,Cout,k,k) -> (N,Cout,Ho,Wo).

    ``w`` plays the role of the forward conv's weight with Cout=Cx; the output
    spatial size defaults to stride*(H-1) + k - 2*padding.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d_transpose: expected 4d tensors, got {x.data.shape}, {w.data.shape}")
    if w.data.shape[2] <= 0 or stride <= 0:
        raise ValueError(f"conv2d_transpose: non-positive kernel/stride")
    if x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"conv2d_transpose: channel mismatch {x.data.shape[1]} vs {w.data.shape[0]}")
    k = w.data.shape[2]
    n, cx, h, wdt = x.data.shape
    if out_hw is None:
        out_hw = (stride * (h - 1) + k - 2 * padding,
                  stride * (wdt - 1) + k - 2 * padding)
    if (_conv_out_dim(out_hw[0], k, stride, padding) != h
            or _conv_out_dim(out_hw[1], k, stride, padding) != wdt):
        raise ShapeError(f"conv2d_transpose: out_hw {out_hw} not adjoint-compatible "
                         f"with input {x.data.shape} (k={k}, s={stride}, p={padding})")
    val = _conv_input_grad(x.data, w.data, out_hw, stride, padding)
    if b is not None:
        val = val + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)
    out = _make(val, parents, None)

    def bwd(g):
        _accum(x, _conv_forward(g, w.data, stride, padding))
        _accum(w, _conv_weight_grad(g, x.data, w.data.shape, stride, padding))
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3)))
    out._backward = bwd
    return out


def dense(x, w, b=None):
    """Affine map: x (N,Din) @ w (Din,Dout) + b (Dout,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"dense: incompatible shapes {x.data.shape} @ {w.data.shape}")
    val = x.data @ w.data
    if b is not None:
        val = val + b.data[None, :]
    parents = (x, w) if b is None else (x, w, b)
    out = _make(val, parents, None)

    def bwd(g):
        _accum(x, g @ w.data.T)
        _accum(w, x.data.T @ g)
        if b is not None:
            _accum(b, g.sum(axis=0))
    out._backward = bwd
    return out


def batch_norm(x, gamma, beta, running_mean, running_var,
               eps=1e-5, momentum=0.9, training=True):
    """Batch normalization over the channel dim.

    x is (N,C,H,W) (stats over N,H,W) or (N,C) (stats over N). In training
    mode batch statistics are used and the running buffers (plain ndarrays)
    are updated in place; in eval mode the running buffers are used.
    """
    if x.data.ndim == 4:
        axes = (0, 2, 3)
        expand = (None, slice(None), None, None)
    elif x.data.ndim == 2:
        axes = (0,)
        expand = (None, slice(None))
    else:
        raise ShapeError(f"batch_norm expects 2d or 4d input, got {x.data.shape}")

    def ex(v):
        return v[expand]

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu, var = running_mean, running_var

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - ex(mu)) * ex(inv)
    val = xhat * ex(gamma.data) + ex(beta.data)
    out = _make(val, (x, gamma, beta), None)

    if training:
        m = x.data.size // x.data.shape[1]

        def bwd(g):
            dxhat = g * ex(gamma.data)
            sum_d = dxhat.sum(axis=axes)
            sum_dx = (dxhat * xhat).sum(axis=axes)
            _accum(x, ex(inv) * (dxhat - ex(sum_d) / m - xhat * ex(sum_dx) / m))
            _accum(gamma, (g * xhat).sum(axis=axes))
            _accum(beta, g.sum(axis=axes))
    else:
        def bwd(g):
            _accum(x, g * ex(gamma.data) * ex(inv))
            _accum(gamma, (g * xhat).sum(axis=axes))
            _accum(beta, g.sum(axis=axes))
    out._backward = bwd
    return out


# -- backward & verification --------------------------------------------------

def backward(root):
    """Reverse-topological gradient accumulation from a scalar root."""
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.data.shape}")
    topo, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad.reshape(node.data.shape))


def zero_grads(params):
    for p in params:
        p.grad = None


def finite_difference_grads(build, params, h=1e-5):
    """Central finite differences of the scalar ``build()`` w.r.t. ``params``.

    ``build`` must rebuild the graph from the current parameter data each call.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.ravel()
        gf = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = float(build().data)
            flat[i] = orig - h
            lo = float(build().data)
            flat[i] = orig
            gf[i] = (hi - lo) / (2.0 * h)
        grads.append(g)
    return grads


def grad_check(build, params, h=1e-5, tolerance=1e-4):
    """Compare analytic gradients against central finite differences.

    Returns (passed, max_rel_err). Relative error is measured per parameter as
    ||g_a - g_fd||_inf / max(1, ||g_fd||_inf).
    """
    zero_grads(params)
    loss = build()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("non-finite loss during gradient check")
    backward(loss)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data)
                for p in params]
    numeric = finite_difference_grads(build, params, h=h)
    max_err = 0.0
    for ga, gn in zip(analytic, numeric):
        denom = max(1.0, float(np.abs(gn).max()))
        max_err = max(max_err, float(np.abs(ga - gn).max()) / denom)
    return max_err <= tolerance, max_err
