"""Convolution, batch normalization and bilinear resizing on the tape."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError, Tensor, as_tensor, make_result

__all__ = [
    "ConvSpec",
    "conv2d",
    "conv2d_loops",
    "BatchNormState",
    "batch_norm",
    "bilinear_resize",
    "resize_array",
    "conv_output_size",
]


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    dilation: int = 1
    padding: tuple[int, int] = (0, 0)
    groups: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "padding", _pair(self.padding))
        if self.dilation < 1:
            raise ValueError(f"dilation must be positive, got {self.dilation}")
        if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"channels ({self.in_channels}->{self.out_channels}) not divisible by groups={self.groups}"
            )

    @classmethod
    def same(cls, cin: int, cout: int, k: int = 3, stride: int = 1, dilation: int = 1,
             groups: int = 1) -> "ConvSpec":
        """Padding chosen so stride-1 outputs keep the input spatial size."""
        pad = dilation * (k - 1) // 2
        return cls(cin, cout, (k, k), (stride, stride), dilation, (pad, pad), groups)

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_channels and self.groups > 1

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        return (
            conv_output_size(h, self.kernel[0], self.stride[0], self.padding[0], self.dilation, "H"),
            conv_output_size(w, self.kernel[1], self.stride[1], self.padding[1], self.dilation, "W"),
        )


def conv_output_size(n: int, k: int, s: int, p: int, r: int, axis: str = "") -> int:
    extent = (k - 1) * r + 1
    if extent > n + 2 * p:
        raise DimensionError(
            f"effective kernel extent {extent} exceeds padded input {n + 2 * p} along {axis}",
            axis=axis,
        )
    return (n + 2 * p - extent) // s + 1


def _check_conv_inputs(x: Tensor, w: Tensor, spec: ConvSpec) -> None:
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects N,C,H,W input, got {x.shape}", axis="rank")
    if x.shape[1] != spec.in_channels:
        raise DimensionError(
            f"conv2d: input has {x.shape[1]} channels, spec expects {spec.in_channels}", axis="C"
        )
    if w.shape != spec.weight_shape:
        raise DimensionError(f"conv2d: weight {w.shape} != expected {spec.weight_shape}", axis="weight")


def _tap_slices(spec: ConvSpec, ho: int, wo: int):
    sh, sw = spec.stride
    r = spec.dilation
    for i in range(spec.kernel[0]):
        for j in range(spec.kernel[1]):
            ys = slice(i * r, i * r + sh * (ho - 1) + 1, sh)
            xs = slice(j * r, j * r + sw * (wo - 1) + 1, sw)
            yield i, j, ys, xs


def conv2d(x, w, b=None, spec: ConvSpec | None = None) -> Tensor:
    """2-D cross-correlation with stride, padding, dilation and groups.

    Computed as a sum over kernel taps of strided views of the padded input,
    so each tap is one batched matmul (dense) or one broadcast multiply
    (depthwise). ``conv2d_loops`` is the scalar reference path.
    """
    x, w = as_tensor(x), as_tensor(w)
    if spec is None:
        raise ValueError("conv2d needs a ConvSpec")
    _check_conv_inputs(x, w, spec)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (spec.out_channels,):
            raise DimensionError(f"conv2d: bias {b.shape} != ({spec.out_channels},)", axis="bias")

    n, c, h, wd = x.shape
    ho, wo = spec.output_size(h, wd)
    ph, pw = spec.padding
    g = spec.groups
    cin_g = c // g
    cout_g = spec.out_channels // g
    xd, wdat = x.data, w.data
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    taps = list(_tap_slices(spec, ho, wo))
    pointwise = spec.kernel == (1, 1) and spec.stride == (1, 1) and not (ph or pw)
    dw = spec.groups == c and cout_g == 1

    if pointwise and g == 1:
        w2 = wdat[:, :, 0, 0]
        out = np.matmul(w2, xd.reshape(n, c, h * wd)).reshape(n, spec.out_channels, ho, wo)
    elif dw:
        out = np.zeros((n, c, ho, wo), dtype=xd.dtype)
        for i, j, ys, xs in taps:
            out += xp[:, :, ys, xs] * wdat[:, 0, i, j][None, :, None, None]
    else:
        out = np.zeros((n, g, cout_g, ho * wo), dtype=xd.dtype)
        wg = wdat.reshape(g, cout_g, cin_g, *spec.kernel)
        for i, j, ys, xs in taps:
            patch = np.ascontiguousarray(xp[:, :, ys, xs]).reshape(n, g, cin_g, ho * wo)
            out += np.matmul(wg[:, :, :, i, j], patch)
        out = out.reshape(n, spec.out_channels, ho, wo)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def backward(gout):
        gx = gw = gb = None
        if b is not None and b.requires_grad:
            gb = gout.sum(axis=(0, 2, 3))
        if pointwise and g == 1:
            g3 = gout.reshape(n, spec.out_channels, ho * wo)
            x3 = xd.reshape(n, c, h * wd)
            if w.requires_grad:
                gw = np.einsum("nop,ncp->oc", g3, x3, optimize=True)[:, :, None, None]
            if x.requires_grad:
                gx = np.matmul(wdat[:, :, 0, 0].T, g3).reshape(xd.shape)
            return gx, gw, gb
        gxp = np.zeros(xp.shape, dtype=xd.dtype) if x.requires_grad else None
        gw = np.zeros(wdat.shape, dtype=wdat.dtype) if w.requires_grad else None
        if dw:
            for i, j, ys, xs in taps:
                if gw is not None:
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", gout, xp[:, :, ys, xs])
                if gxp is not None:
                    gxp[:, :, ys, xs] += gout * wdat[:, 0, i, j][None, :, None, None]
        else:
            gg = gout.reshape(n, g, cout_g, ho * wo)
            wg = wdat.reshape(g, cout_g, cin_g, *spec.kernel)
            gwg = gw.reshape(g, cout_g, cin_g, *spec.kernel) if gw is not None else None
            for i, j, ys, xs in taps:
                if gwg is not None:
                    patch = np.ascontiguousarray(xp[:, :, ys, xs]).reshape(n, g, cin_g, ho * wo)
                    gwg[:, :, :, i, j] = np.einsum("ngop,ngcp->goc", gg, patch, optimize=True)
                if gxp is not None:
                    contrib = np.matmul(np.swapaxes(wg[:, :, :, i, j], 1, 2), gg)
                    gxp[:, :, ys, xs] += contrib.reshape(n, c, ho, wo)
        if gxp is not None:
            gx = gxp[:, :, ph:ph + h, pw:pw + wd] if (ph or pw) else gxp
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, backward)


def conv2d_loops(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, spec: ConvSpec) -> np.ndarray:
    """Scalar-loop reference convolution; slow, used as a correctness oracle."""
    n, c, h, wd = x.shape
    ho, wo = spec.output_size(h, wd)
    ph, pw = spec.padding
    sh, sw = spec.stride
    r = spec.dilation
    kh, kw = spec.kernel
    cin_g = c // spec.groups
    cout_g = spec.out_channels // spec.groups
    out = np.zeros((n, spec.out_channels, ho, wo), dtype=np.float64)
    for bi in range(n):
        for o in range(spec.out_channels):
            grp = o // cout_g
            for y in range(ho):
                for xo in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for ci in range(cin_g):
                        cc = grp * cin_g + ci
                        for i in range(kh):
                            yy = y * sh + i * r - ph
                            if yy < 0 or yy >= h:
                                continue
                            for j in range(kw):
                                xx = xo * sw + j * r - pw
                                if 0 <= xx < wd:
                                    acc += x[bi, cc, yy, xx] * w[o, ci, i, j]
                    out[bi, o, y, xo] = acc
    return out


@dataclass
class BatchNormState:
    """Running statistics; momentum is the weight kept on the old value."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(x, gamma, beta, state: BatchNormState, training: bool) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or state.running_mean.shape != (c,):
        raise DimensionError(f"batch_norm: {c} channels vs params {gamma.shape}", axis="C")
    xd = x.data
    eps = state.eps
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    if training:
        mu = np.mean(xd, axis=(0, 2, 3), dtype=np.float64)
        var = np.mean((xd - mu[None, :, None, None].astype(xd.dtype)) ** 2, axis=(0, 2, 3),
                      dtype=np.float64)
        unbiased = var * m / (m - 1) if m > 1 else var
        state.running_mean[:] = state.momentum * state.running_mean + (1 - state.momentum) * mu
        state.running_var[:] = state.momentum * state.running_var + (1 - state.momentum) * unbiased
    else:
        mu = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.astype(xd.dtype)[None, :, None, None]) * inv[None, :, None, None]
    gd = gamma.data
    out = xhat * gd[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        gbeta = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype)
        ggamma = np.einsum("nchw,nchw->c", g, xhat).astype(g.dtype)
        gxhat = g * gd[None, :, None, None]
        if training:
            s1 = gxhat.mean(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype)
            s2 = np.mean(gxhat * xhat, axis=(0, 2, 3), dtype=np.float64).astype(g.dtype)
            gx = (gxhat - s1[None, :, None, None] - xhat * s2[None, :, None, None]) * inv[None, :, None, None]
        else:
            gx = gxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward)


def _interp_indices(n_in: int, n_out: int):
    """Source indices/weights for align-corners=false bilinear sampling."""
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    lo, hi, frac = _interp_indices(n_in, n_out)
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_array(a: np.ndarray, out_h: int, out_w: int, axes: tuple[int, int] = (-2, -1)) -> np.ndarray:
    """Bilinear (align-corners=false) resize of two axes of a plain array."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"resize target must be at least 1x1, got {out_h}x{out_w}")
    ay, ax = (ax % a.ndim for ax in axes)
    h, w = a.shape[ay], a.shape[ax]
    out = a.astype(np.float64, copy=False)
    if out_h != h:
        lo, hi, f = _interp_indices(h, out_h)
        shape = [1] * a.ndim
        shape[ay] = out_h
        f = f.reshape(shape)
        out = np.take(out, lo, axis=ay) * (1.0 - f) + np.take(out, hi, axis=ay) * f
    if out_w != w:
        lo, hi, f = _interp_indices(w, out_w)
        shape = [1] * a.ndim
        shape[ax] = out_w
        f = f.reshape(shape)
        out = np.take(out, lo, axis=ax) * (1.0 - f) + np.take(out, hi, axis=ax) * f
    return out


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    """Differentiable bilinear resize of an N,C,H,W tensor (align-corners=false)."""
    x = as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"resize target must be at least 1x1, got {out_h}x{out_w}")
    if x.ndim != 4:
        raise DimensionError(f"bilinear_resize expects N,C,H,W, got {x.shape}", axis="rank")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return make_result(x.data.copy(), (x,), lambda g: (g,))
    out = resize_array(x.data, out_h, out_w).astype(x.dtype)

    def backward(g):
        ry = _interp_matrix(h, out_h).astype(g.dtype)
        rx = _interp_matrix(w, out_w).astype(g.dtype)
        return (np.matmul(np.matmul(ry.T, g), rx),)

    return make_result(out, (x,), backward)
