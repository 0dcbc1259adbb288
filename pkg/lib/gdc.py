#!/usr/bin/env python3
"""
Global Dynamic Convolution block and the self-attention reference it imitates

Self-attention builds the S x S map A = Q K^T. GDC gets the same correlation
structure from convolutions: Q reshaped to a feature map Q' convolved with the rows
of K used as S 1x1xE kernels gives exactly Q K^T (attention_map_via_conv). In the
GDC block the kernels are computed from a fixed grid of pooled patches of the input,
so the cost stays linear in the number of pixels:

    K' = Conv(Patch(X)) + diff
    Q' = Conv(X)
    A' = Conv_K'(Q')
    Y  = Conv(A')
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Tuple

from .conv import ConvSpec, conv2d, conv2d_dynamic, conv_param_count, patch_pool
from .errors import ShapeError
from .tensor import (
    Rng, Tensor, add, expand_batch, matmul, reshape, scalar_mul, softmax, transpose, zeros,
)


@dataclass(frozen=True)
class GDCConfig:
    """Hyperparameters of one GDC block"""
    in_channels: int = 16
    out_channels: int = 16
    grid: Tuple[int, int] = (8, 8)
    embed_dim: int = 32
    key_kernel: int = 1
    query_kernel: int = 3
    out_kernel: int = 1

    def __post_init__(self):
        if self.grid[0] < 1 or self.grid[1] < 1:
            raise ShapeError(f"GDC grid must be positive, got {self.grid}")
        if self.embed_dim < 1:
            raise ShapeError(f"GDC embed_dim must be positive, got {self.embed_dim}")
        for name in ('key_kernel', 'query_kernel', 'out_kernel'):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ShapeError(f"GDC {name} must be a positive odd size, got {k}")

    @property
    def tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    def key_spec(self) -> ConvSpec:
        return ConvSpec.same(self.key_kernel, self.in_channels, self.embed_dim)

    def query_spec(self) -> ConvSpec:
        return ConvSpec.same(self.query_kernel, self.in_channels, self.embed_dim)

    def out_spec(self) -> ConvSpec:
        return ConvSpec.same(self.out_kernel, self.tokens, self.out_channels)


GDC_PARAM_NAMES = ('key.weight', 'key.bias', 'query.weight', 'query.bias', 'out.weight', 'out.bias', 'diff')


@dataclass
class GDCParams:
    """Weights of the three static convolutions plus the trainable kernel offset"""
    key_weight: Tensor
    key_bias: Tensor
    query_weight: Tensor
    query_bias: Tensor
    out_weight: Tensor
    out_bias: Tensor
    diff: Tensor

    def named(self) -> List[Tuple[str, Tensor]]:
        tensors = (self.key_weight, self.key_bias, self.query_weight, self.query_bias,
                   self.out_weight, self.out_bias, self.diff)
        return list(zip(GDC_PARAM_NAMES, tensors))


def he_uniform(shape, rng: Rng, fan_in: int, alpha: float = 0.2, name: str = None) -> Tensor:
    """U(-b, b) with b = sqrt(6 / ((1 + alpha^2) * fan_in)), matched to leaky-relu gain"""
    bound = math.sqrt(6.0 / ((1.0 + alpha * alpha) * fan_in))
    return Tensor(rng.uniform(shape, -bound, bound), requires_grad=True, name=name)


def conv_weight(spec: ConvSpec, rng: Rng, name: str = None) -> Tensor:
    shape = (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)
    return he_uniform(shape, rng, spec.in_channels * spec.kernel_h * spec.kernel_w, name=name)


def conv_bias(spec: ConvSpec, name: str = None) -> Tensor:
    return zeros((spec.out_channels,), requires_grad=True, name=name)


def init_gdc_params(cfg: GDCConfig, rng: Rng) -> GDCParams:
    """He-uniform static convs, zero biases, zero diff"""
    key, query, out = cfg.key_spec(), cfg.query_spec(), cfg.out_spec()
    return GDCParams(
        key_weight=conv_weight(key, rng.spawn('key')),
        key_bias=conv_bias(key),
        query_weight=conv_weight(query, rng.spawn('query')),
        query_bias=conv_bias(query),
        out_weight=conv_weight(out, rng.spawn('out')),
        out_bias=conv_bias(out),
        diff=zeros((cfg.tokens, cfg.embed_dim), requires_grad=True),
    )


def self_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Y = softmax(Q K^T / sqrt(d_k)) V with row-wise softmax"""
    if q.ndim != 2 or q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(
            f"self_attention needs equal [S,E] operands, got {list(q.shape)}, "
            f"{list(k.shape)}, {list(v.shape)}"
        )
    d_k = q.shape[1]
    scores = scalar_mul(matmul(q, transpose(k)), 1.0 / math.sqrt(d_k))
    return matmul(softmax(scores, axis=-1), v)


def attention_map_via_conv(q: Tensor, k: Tensor, map_shape: Tuple[int, int]) -> Tensor:
    """
    Computes Q K^T as a dynamic 1x1 convolution

    Q [S,E] is laid out as an E-channel H x W feature map (token s at row s // W,
    column s % W); each row of K is one 1x1xE kernel. The S output channels at
    pixel s hold row s of the attention map.
    """
    if q.ndim != 2 or q.shape != k.shape:
        raise ShapeError(f"attention_map_via_conv needs equal [S,E] operands, got {list(q.shape)}, {list(k.shape)}")
    s, e = q.shape
    h, w = map_shape
    if h * w != s:
        raise ShapeError(f"Map shape {h}x{w} does not hold {s} tokens")
    q_map = reshape(transpose(q), (1, e, h, w))
    kernels = reshape(k, (1, s, e))
    a_map = conv2d_dynamic(q_map, kernels)
    return transpose(reshape(a_map, (s, s)))


def gdc_attention_map(x: Tensor, params: GDCParams, cfg: GDCConfig) -> Tensor:
    """K', Q' and A' stages of the block; returns A' [N,S,H,W]"""
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"GDC expects [N,{cfg.in_channels},H,W] input, got {list(x.shape)}")
    n = x.shape[0]

    pooled = patch_pool(x, cfg.grid)
    keys = conv2d(pooled, params.key_weight, params.key_bias, cfg.key_spec())
    keys = transpose(reshape(keys, (n, cfg.embed_dim, cfg.tokens)), (0, 2, 1))
    keys = add(keys, expand_batch(params.diff, n))

    queries = conv2d(x, params.query_weight, params.query_bias, cfg.query_spec())
    return conv2d_dynamic(queries, keys)


def gdc_forward(x: Tensor, params: GDCParams, cfg: GDCConfig) -> Tensor:
    """GDC block: [N,C,H,W] -> [N,O,H,W]"""
    a_map = gdc_attention_map(x, params, cfg)
    return conv2d(a_map, params.out_weight, params.out_bias, cfg.out_spec())


def gdc_flops_breakdown(cfg: GDCConfig, height: int, width: int) -> Dict[str, int]:
    """
    Multiply-accumulates per sample, stage by stage

    Pooling is counted as one accumulation per input element; the diff offset as
    one add per kernel entry. Only 'key' and 'diff' are independent of H*W.
    """
    pixels = height * width
    s, e = cfg.tokens, cfg.embed_dim
    c, o = cfg.in_channels, cfg.out_channels
    return {
        'patch': c * pixels,
        'key': s * e * c * cfg.key_kernel ** 2,
        'diff': s * e,
        'query': pixels * e * c * cfg.query_kernel ** 2,
        'dynamic': s * e * pixels,
        'output': pixels * s * o * cfg.out_kernel ** 2,
    }


def gdc_flops(cfg: GDCConfig, height: int, width: int) -> int:
    """
    Total MACs of the block

    Linear in H*W plus the constant 'key' and 'diff' terms, so doubling the pixel
    count doubles every term except those two.
    """
    return sum(gdc_flops_breakdown(cfg, height, width).values())


def gdc_param_count(cfg: GDCConfig) -> int:
    convs = (cfg.key_spec(), cfg.query_spec(), cfg.out_spec())
    return sum(conv_param_count(spec) for spec in convs) + cfg.tokens * cfg.embed_dim


def attention_flops(tokens: int, dim: int) -> int:
    """MACs of Q K^T and softmax(A) V over n tokens, for comparison with GDC"""
    return 2 * tokens * tokens * dim
