#!/usr/bin/env python3
"""
Spatial operators for the U-Net and the GDC block

All ops take NCHW tensors. conv2d follows the cross-correlation convention
(no kernel flip) with zero padding and is computed as im2col + matmul.
Brute-force loop oracles for every op live in lib/verify.py.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import Function, Tensor


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a static convolution"""
    kernel_h: int
    kernel_w: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if min(self.kernel_h, self.kernel_w, self.stride, self.in_channels, self.out_channels) < 1:
            raise ShapeError(f"Kernel, stride and channel counts must be positive: {self}")
        if self.padding < 0:
            raise ShapeError(f"Padding must be non-negative: {self.padding}")

    @classmethod
    def same(cls, kernel: int, in_channels: int, out_channels: int) -> 'ConvSpec':
        """Odd square kernel, stride 1, padding that keeps the spatial size"""
        return cls(kernel, kernel, in_channels, out_channels, stride=1, padding=kernel // 2)

    def output_size(self, height: int, width: int) -> Tuple[int, int]:
        span_h = height + 2 * self.padding - self.kernel_h
        span_w = width + 2 * self.padding - self.kernel_w
        if span_h < 0 or span_w < 0:
            raise ShapeError(
                f"Kernel {self.kernel_h}x{self.kernel_w} does not fit input {height}x{width} "
                f"with padding {self.padding}"
            )
        return span_h // self.stride + 1, span_w // self.stride + 1

    def macs(self, height: int, width: int) -> int:
        """Multiply-accumulates of one sample at the given input size"""
        out_h, out_w = self.output_size(height, width)
        return out_h * out_w * self.in_channels * self.out_channels * self.kernel_h * self.kernel_w


def conv_param_count(spec: ConvSpec) -> int:
    """Weights plus one bias per output channel"""
    return spec.kernel_h * spec.kernel_w * spec.in_channels * spec.out_channels + spec.out_channels


class Conv2d(Function):
    def __init__(self, spec: ConvSpec = None):
        self.spec = spec

    def forward(self, x, w, b):
        spec = self.spec
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d needs NCHW input and OCkk weight, got {list(x.shape)}, {list(w.shape)}")
        n, c, h, width = x.shape
        o = w.shape[0]
        if (c != spec.in_channels or w.shape[1] != c or o != spec.out_channels
                or w.shape[2:] != (spec.kernel_h, spec.kernel_w) or b.shape != (o,)):
            raise ShapeError(
                f"conv2d channels inconsistent: x {list(x.shape)}, w {list(w.shape)}, "
                f"b {list(b.shape)}, spec {spec}"
            )
        out_h, out_w = spec.output_size(h, width)
        p, s, kh, kw = spec.padding, spec.stride, spec.kernel_h, spec.kernel_w

        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :out_h, :out_w]
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, c * kh * kw)
        w_mat = w.reshape(o, -1)

        self.cols = cols
        self.w_mat = w_mat
        self.geometry = (n, c, h, width, out_h, out_w, xp.shape)
        out = cols @ w_mat.T + b
        return np.ascontiguousarray(out.reshape(n, out_h, out_w, o).transpose(0, 3, 1, 2))

    def backward(self, g):
        n, c, h, width, out_h, out_w, padded_shape = self.geometry
        p, s, kh, kw = self.spec.padding, self.spec.stride, self.spec.kernel_h, self.spec.kernel_w
        o = self.w_mat.shape[0]

        g_mat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = (g_mat.T @ self.cols).reshape(o, c, kh, kw)
        db = g_mat.sum(axis=0)

        dcols = (g_mat @ self.w_mat).reshape(n, out_h, out_w, c, kh, kw)
        dxp = np.zeros(padded_shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + s * out_h:s, j:j + s * out_w:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p:p + h, p:p + width] if p else dxp
        return np.ascontiguousarray(dx), dw, db


class Conv2dDynamic(Function):
    """out[n,s,h,w] = sum_e kernels[n,s,e] * x[n,e,h,w]"""

    def forward(self, x, kernels):
        if x.ndim != 4 or kernels.ndim != 3:
            raise ShapeError(
                f"conv2d_dynamic needs x [N,E,H,W] and kernels [N,S,E], got "
                f"{list(x.shape)}, {list(kernels.shape)}"
            )
        n, e, h, w = x.shape
        if kernels.shape[0] != n or kernels.shape[2] != e:
            raise ShapeError(f"conv2d_dynamic: kernels {list(kernels.shape)} do not match x {list(x.shape)}")
        self.x_flat = x.reshape(n, e, h * w)
        self.kernels = kernels
        self.x_shape = x.shape
        out = np.matmul(kernels, self.x_flat)
        return out.reshape(n, kernels.shape[1], h, w)

    def backward(self, g):
        n, s = self.kernels.shape[:2]
        g_flat = g.reshape(n, s, -1)
        d_kernels = np.matmul(g_flat, self.x_flat.transpose(0, 2, 1))
        dx = np.matmul(self.kernels.transpose(0, 2, 1), g_flat).reshape(self.x_shape)
        return dx, d_kernels


def pool_bounds(extent: int, cells: int):
    """Half-open windows [floor(i*extent/cells), floor((i+1)*extent/cells))"""
    return [((i * extent) // cells, ((i + 1) * extent) // cells) for i in range(cells)]


class PatchPool(Function):
    """Adaptive average pooling to a fixed (S_h, S_w) grid"""

    def __init__(self, grid: Tuple[int, int] = (1, 1)):
        self.grid = grid

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"patch_pool needs NCHW input, got {list(x.shape)}")
        n, c, h, w = x.shape
        s_h, s_w = self.grid
        if s_h < 1 or s_w < 1:
            raise ShapeError(f"Grid must be positive: {self.grid}")
        if h < s_h or w < s_w:
            raise ShapeError(f"Grid {s_h}x{s_w} is larger than input {h}x{w}")
        self.rows = pool_bounds(h, s_h)
        self.columns = pool_bounds(w, s_w)
        self.x_shape = x.shape
        out = np.empty((n, c, s_h, s_w), dtype=x.dtype)
        for i, (r0, r1) in enumerate(self.rows):
            for j, (c0, c1) in enumerate(self.columns):
                out[:, :, i, j] = x[:, :, r0:r1, c0:c1].mean(axis=(2, 3))
        return out

    def backward(self, g):
        dx = np.zeros(self.x_shape, dtype=g.dtype)
        for i, (r0, r1) in enumerate(self.rows):
            for j, (c0, c1) in enumerate(self.columns):
                count = (r1 - r0) * (c1 - c0)
                dx[:, :, r0:r1, c0:c1] = (g[:, :, i, j] / count)[:, :, None, None]
        return (dx,)


class Downsample2x(Function):
    def forward(self, x):
        if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"downsample2x needs even H and W, got {list(x.shape)}")
        # pairwise sums keep down(up(x)) == x exactly
        top = x[:, :, 0::2, 0::2] + x[:, :, 0::2, 1::2]
        bottom = x[:, :, 1::2, 0::2] + x[:, :, 1::2, 1::2]
        return (top + bottom) * x.dtype.type(0.25)

    def backward(self, g):
        quarter = g * g.dtype.type(0.25)
        return (np.repeat(np.repeat(quarter, 2, axis=2), 2, axis=3),)


class Upsample2x(Function):
    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"upsample2x needs NCHW input, got {list(x.shape)}")
        return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)

    def backward(self, g):
        n, c, h, w = g.shape
        return (g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)),)


def conv2d(x: Tensor, w: Tensor, b: Tensor, spec: ConvSpec) -> Tensor:
    return Conv2d.apply(x, w, b, spec=spec)


def conv2d_dynamic(x: Tensor, kernels: Tensor) -> Tensor:
    return Conv2dDynamic.apply(x, kernels)


def patch_pool(x: Tensor, grid: Tuple[int, int]) -> Tensor:
    return PatchPool.apply(x, grid=tuple(grid))


def downsample2x(x: Tensor) -> Tensor:
    return Downsample2x.apply(x)


def upsample2x(x: Tensor) -> Tensor:
    return Upsample2x.apply(x)
