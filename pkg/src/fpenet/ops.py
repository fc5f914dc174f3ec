"""Differentiable primitives over NCHW tensors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Tensor, as_tensor, check_rank4, record


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3)
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self):
        if isinstance(self.kernel, int):
            object.__setattr__(self, "kernel", (self.kernel, self.kernel))
        for field in ("in_channels", "out_channels", "stride", "dilation", "groups"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be positive, got {getattr(self, field)}")
        if min(self.kernel) < 1:
            raise ConfigError(f"kernel extents must be positive, got {self.kernel}")
        if self.padding < 0:
            raise ConfigError(f"padding must be non-negative, got {self.padding}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels // self.groups) + tuple(self.kernel)

    @property
    def depthwise(self):
        return self.groups == self.in_channels == self.out_channels

    def output_hw(self, h, w):
        kh, kw = self.kernel
        oh = (h + 2 * self.padding - self.dilation * (kh - 1) - 1) // self.stride + 1
        ow = (w + 2 * self.padding - self.dilation * (kw - 1) - 1) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ConfigError(f"convolution output extent {oh}x{ow} is not positive for input {h}x{w}")
        return oh, ow


def _pad_hw(a, p):
    if p == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p)))


def _tap_slices(spec, ky, kx, oh, ow):
    s, d = spec.stride, spec.dilation
    y0, x0 = ky * d, kx * d
    return slice(y0, y0 + s * (oh - 1) + 1, s), slice(x0, x0 + s * (ow - 1) + 1, s)


def conv2d(x, weight, bias=None, spec=None):
    x = as_tensor(x)
    check_rank4(x)
    if x.shape[1] != spec.in_channels:
        raise DimensionError(
            f"conv2d expects {spec.in_channels} input channels, got {x.shape[1]}", axis="channels"
        )
    if weight.shape != spec.weight_shape:
        raise DimensionError(
            f"conv2d weight shape {weight.shape} does not match {spec.weight_shape}", axis="channels"
        )
    if spec.has_bias and bias is None:
        raise DimensionError("conv2d spec requires a bias vector", axis="channels")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise DimensionError(f"bias shape {bias.shape} != ({spec.out_channels},)", axis="channels")

    n, cin, h, w = x.shape
    oh, ow = spec.output_hw(h, w)
    kh, kw = spec.kernel
    G = spec.groups
    cout = spec.out_channels
    cin_g, cout_g = cin // G, cout // G
    dtype = np.result_type(x.data, weight.data)
    xp = _pad_hw(x.data.astype(dtype, copy=False), spec.padding)
    W = weight.data.astype(dtype, copy=False)
    L = oh * ow
    out = np.zeros((n, cout, oh, ow), dtype=dtype)

    for ky in range(kh):
        for kx in range(kw):
            sy, sx = _tap_slices(spec, ky, kx, oh, ow)
            patch = xp[:, :, sy, sx]
            wk = W[:, :, ky, kx]
            if spec.depthwise:
                out += patch * wk[:, 0][None, :, None, None]
            elif G == 1:
                out += np.matmul(wk, patch.reshape(n, cin, L)).reshape(n, cout, oh, ow)
            else:
                pg = patch.reshape(n, G, cin_g, L)
                wg = wk.reshape(G, cout_g, cin_g)
                out += np.matmul(wg[None], pg).reshape(n, cout, oh, ow)
    if bias is not None:
        out += bias.data.astype(dtype, copy=False)[None, :, None, None]

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        gxp = np.zeros_like(xp)
        gW = np.zeros_like(W)
        for ky in range(kh):
            for kx in range(kw):
                sy, sx = _tap_slices(spec, ky, kx, oh, ow)
                patch = xp[:, :, sy, sx]
                wk = W[:, :, ky, kx]
                if spec.depthwise:
                    gW[:, 0, ky, kx] = np.einsum("nchw,nchw->c", g, patch)
                    gxp[:, :, sy, sx] += g * wk[:, 0][None, :, None, None]
                elif G == 1:
                    g2 = g.reshape(n, cout, L)
                    p2 = patch.reshape(n, cin, L)
                    gW[:, :, ky, kx] = np.matmul(g2, p2.transpose(0, 2, 1)).sum(axis=0)
                    gxp[:, :, sy, sx] += np.matmul(wk.T, g2).reshape(n, cin, oh, ow)
                else:
                    gg = g.reshape(n, G, cout_g, L)
                    pg = patch.reshape(n, G, cin_g, L)
                    wg = wk.reshape(G, cout_g, cin_g)
                    gW[:, :, ky, kx] = np.matmul(gg, pg.transpose(0, 1, 3, 2)).sum(axis=0).reshape(cout, cin_g)
                    gxp[:, :, sy, sx] += np.matmul(wg.transpose(0, 2, 1)[None], gg).reshape(n, cin, oh, ow)
        p = spec.padding
        gx = gxp[:, :, p : p + h, p : p + w] if p else gxp
        grads = [gx.astype(x.dtype, copy=False), gW.astype(weight.dtype, copy=False)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)).astype(bias.dtype, copy=False))
        return grads

    return record(Tensor(out), inputs, grad_fn, "conv2d")


class BatchNormState:
    """Learnable affine pair plus running statistics for one BN layer."""

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32, name=""):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum
        self.mode = "train"

    @property
    def channels(self):
        return self.gamma.shape[0]


def batch_norm(x, s, mode=None):
    x = as_tensor(x)
    check_rank4(x)
    if x.shape[1] != s.channels:
        raise DimensionError(f"batch_norm expects {s.channels} channels, got {x.shape[1]}", axis="channels")
    mode = mode or s.mode
    X = x.data
    gamma = s.gamma.data.astype(X.dtype, copy=False)[None, :, None, None]
    beta = s.beta.data.astype(X.dtype, copy=False)[None, :, None, None]

    if mode == "train":
        m = X.shape[0] * X.shape[2] * X.shape[3]
        mean = X.mean(axis=(0, 2, 3))
        xc = X - mean[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + s.eps)
        xhat = xc * inv[None, :, None, None]
        unbiased = var * (m / (m - 1)) if m > 1 else var
        mom = s.momentum
        s.running_mean = ((1 - mom) * s.running_mean + mom * mean).astype(s.running_mean.dtype)
        s.running_var = ((1 - mom) * s.running_var + mom * unbiased).astype(s.running_var.dtype)
    elif mode == "infer":
        inv = 1.0 / np.sqrt(s.running_var.astype(X.dtype) + s.eps)
        xhat = (X - s.running_mean.astype(X.dtype)[None, :, None, None]) * inv[None, :, None, None]
    else:
        raise ValueError(f"unknown batch-norm mode {mode!r}")
    out = xhat * gamma + beta

    def grad_fn(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma
        if mode == "train":
            gx = inv[None, :, None, None] * (
                gxhat
                - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = gxhat * inv[None, :, None, None]
        return gx, ggamma.astype(s.gamma.dtype), gbeta.astype(s.beta.dtype)

    return record(Tensor(out), (x, s.gamma, s.beta), grad_fn, "batch_norm")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)
    return record(Tensor(out), (x,), lambda g: (g * mask,), "relu")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        axis = _first_diff_axis(a.shape, b.shape)
        raise DimensionError(f"add needs identical shapes, got {a.shape} and {b.shape}", axis=axis)
    return record(Tensor(a.data + b.data), (a, b), lambda g: (g, g), "add")


def _first_diff_axis(sa, sb):
    if len(sa) != len(sb):
        return "rank"
    for name, ea, eb in zip(_AXIS_NAMES, sa, sb):
        if ea != eb:
            return name
    return None


_AXIS_NAMES = ("batch", "channels", "height", "width")


def mul_broadcast(a, b):
    """``a * b`` where ``b`` is ``a``'s shape, ``(n,c,1,1)`` or ``(n,1,h,w)``."""
    a, b = as_tensor(a), as_tensor(b)
    check_rank4(a)
    check_rank4(b, "multiplier")
    n, c, h, w = a.shape
    if b.shape not in ((n, c, h, w), (n, c, 1, 1), (n, 1, h, w)):
        raise DimensionError(
            f"cannot broadcast multiplier {b.shape} against {a.shape}",
            axis=_first_diff_axis(a.shape, b.shape),
        )
    A, B = a.data, b.data
    out = A * B

    def grad_fn(g):
        gb = g * A
        if b.shape[1] == 1:
            gb = gb.sum(axis=1, keepdims=True)
        if b.shape[2] == 1:
            gb = gb.sum(axis=(2, 3), keepdims=True)
        return g * B, gb

    return record(Tensor(out), (a, b), grad_fn, "mul_broadcast")


def concat_channels(tensors):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ConfigError("concat_channels needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        check_rank4(t)
        if (t.shape[0],) + t.shape[2:] != (ref[0],) + ref[2:]:
            axis = "batch" if t.shape[0] != ref[0] else ("height" if t.shape[2] != ref[2] else "width")
            raise DimensionError(f"concat_channels shape mismatch {t.shape} vs {ref}", axis=axis)
    out = np.concatenate([t.data for t in tensors], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def grad_fn(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return record(Tensor(out), tensors, grad_fn, "concat_channels")


def split_channels(x, parts):
    x = as_tensor(x)
    check_rank4(x)
    c = x.shape[1]
    if parts < 1 or c % parts:
        raise ConfigError(f"cannot split {c} channels into {parts} equal parts")
    step = c // parts
    outs = []
    for i in range(parts):
        lo, hi = i * step, (i + 1) * step

        def grad_fn(g, lo=lo, hi=hi):
            full = np.zeros_like(x.data)
            full[:, lo:hi] = g
            return (full,)

        outs.append(record(Tensor(x.data[:, lo:hi].copy()), (x,), grad_fn, "split_channels"))
    return outs


def global_avg_pool(x):
    x = as_tensor(x)
    check_rank4(x)
    h, w = x.shape[2:]
    out = x.data.mean(axis=(2, 3), keepdims=True)
    scale = 1.0 / (h * w)
    return record(
        Tensor(out), (x,), lambda g: (np.broadcast_to(g * scale, x.shape).astype(x.dtype),), "global_avg_pool"
    )


def channel_mean(x):
    x = as_tensor(x)
    check_rank4(x)
    c = x.shape[1]
    out = x.data.mean(axis=1, keepdims=True)
    scale = 1.0 / c
    return record(
        Tensor(out), (x,), lambda g: (np.broadcast_to(g * scale, x.shape).astype(x.dtype),), "channel_mean"
    )


def upsample_coords(n_in, factor=2):
    """Source indices and lerp weights for half-pixel aligned resampling."""
    dst = np.arange(n_in * factor)
    src = (dst + 0.5) / factor - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def _interp_matrix(n_in, factor=2):
    i0, i1, t = upsample_coords(n_in, factor)
    m = np.zeros((n_in * factor, n_in))
    rows = np.arange(n_in * factor)
    np.add.at(m, (rows, i0), 1 - t)
    np.add.at(m, (rows, i1), t)
    return m


def bilinear_upsample_x2(x):
    x = as_tensor(x)
    check_rank4(x)
    h, w = x.shape[2:]
    X = x.data
    y0, y1, ty = upsample_coords(h)
    x0, x1, tx = upsample_coords(w)
    ty = ty.astype(X.dtype)[:, None]
    tx = tx.astype(X.dtype)
    # lerp form keeps constant inputs exactly constant
    rows = X[:, :, y0, :] + ty * (X[:, :, y1, :] - X[:, :, y0, :])
    out = rows[:, :, :, x0] + tx * (rows[:, :, :, x1] - rows[:, :, :, x0])
    mh = _interp_matrix(h).astype(X.dtype)
    mw = _interp_matrix(w).astype(X.dtype)

    def grad_fn(g):
        return (np.matmul(np.matmul(mh.T, g), mw),)

    return record(Tensor(out), (x,), grad_fn, "bilinear_upsample_x2")


def total(x):
    """Sum of all elements as a scalar tensor."""
    x = as_tensor(x)
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return record(Tensor(out), (x,), lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),), "total")


def weighted_total(x, weights):
    """``sum(x * weights)`` with a constant weight array."""
    x = as_tensor(x)
    wts = np.asarray(weights, dtype=x.dtype)
    out = np.asarray((x.data * wts).sum(), dtype=x.dtype)
    return record(Tensor(out), (x,), lambda g: (g * wts,), "weighted_total")
