#!/usr/bin/env python3
"""
Verification: brute-force oracles, the finite-difference gradient suite and the
attention-map equivalence check

The oracles are deliberately naive loops over plain numpy arrays; they share no
code with lib/conv.py or lib/tensor.py.
"""

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .conv import ConvSpec, conv2d, conv2d_dynamic, downsample2x, patch_pool, upsample2x
from .errors import ConfigError
from .gdc import GDCConfig, GDCParams, attention_map_via_conv, gdc_forward, init_gdc_params, self_attention
from .pipeline import smooth_l1
from .tensor import (
    Graph, Rng, Tensor, add, clamp, concat_channels, expand_batch, leaky_relu, matmul, mul, precision,
    reduce_mean, reduce_sum, relative_error, relu, reshape, scalar_mul, sigmoid, softmax, sub, tanh,
    transpose,
)
from .ugdc import Model, Role, UGDCConfig, build, forward

GRAD_TOLERANCE = 1e-3
EQUIV_TOLERANCE = 1e-5
CONV_TOLERANCE = 1e-5


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    rows, inner = a.shape
    cols = b.shape[1]
    out = np.zeros((rows, cols), dtype=np.float64)
    for i in range(rows):
        for j in range(cols):
            total = 0.0
            for k in range(inner):
                total += float(a[i, k]) * float(b[k, j])
            out[i, j] = total
    return out


def naive_softmax(x: np.ndarray) -> np.ndarray:
    """exp(x) / sum(exp(x)) along the last axis"""
    e = np.exp(np.asarray(x, dtype=np.float64))
    return e / e.sum(axis=-1, keepdims=True)


def naive_self_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    s, d = q.shape
    out = np.zeros(v.shape, dtype=np.float64)
    for i in range(s):
        scores = np.array([sum(float(q[i, e]) * float(k[j, e]) for e in range(d)) for j in range(s)])
        weights = naive_softmax(scores / math.sqrt(d))
        for j in range(s):
            out[i] += weights[j] * v[j]
    return out


def naive_conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Direct cross-correlation, one output pixel at a time"""
    n, c, h, width = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * padding, width + 2 * padding), dtype=np.float64)
    xp[:, :, padding:padding + h, padding:padding + width] = x
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (width + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, out_h, out_w), dtype=np.float64)
    for i in range(n):
        for oc in range(o):
            for r in range(out_h):
                for col in range(out_w):
                    window = xp[i, :, r * stride:r * stride + kh, col * stride:col * stride + kw]
                    out[i, oc, r, col] = np.sum(window * w[oc]) + b[oc]
    return out


def naive_conv2d_dynamic(x: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    n, e, h, w = x.shape
    s = kernels.shape[1]
    out = np.zeros((n, s, h, w), dtype=np.float64)
    for i in range(n):
        for k in range(s):
            for r in range(h):
                for col in range(w):
                    out[i, k, r, col] = np.dot(kernels[i, k].astype(np.float64), x[i, :, r, col])
    return out


def naive_patch_pool(x: np.ndarray, grid: Tuple[int, int]) -> np.ndarray:
    n, c, h, w = x.shape
    s_h, s_w = grid
    out = np.zeros((n, c, s_h, s_w), dtype=np.float64)
    for i in range(s_h):
        for j in range(s_w):
            rows = range(i * h // s_h, (i + 1) * h // s_h)
            cols = range(j * w // s_w, (j + 1) * w // s_w)
            cell = [x[:, :, r, col] for r in rows for col in cols]
            out[:, :, i, j] = np.mean(cell, axis=0)
    return out


@dataclass
class OracleResult:
    name: str
    cases: int
    max_abs: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_abs <= self.tolerance


def conv_oracle_check(cases: int = 100, rng: Optional[Rng] = None, dtype: str = 'float64',
                      logger=None) -> List[OracleResult]:
    """
    conv2d and conv2d_dynamic against the loop oracles on random geometries:
    batch <= 2, channels <= 8, spatial <= 16x16, k in {1, 3, 5}, stride 1-2
    """
    rng = rng or Rng(0)
    with precision(dtype):
        static_err, dynamic_err = _oracle_cases(cases, rng)

    results = [OracleResult('conv2d', cases, static_err, CONV_TOLERANCE),
               OracleResult('conv2d_dynamic', cases, dynamic_err, CONV_TOLERANCE)]
    if logger:
        for res in results:
            logger.info(f"ORACLE: {res.name} cases={res.cases} dtype={dtype} max_abs={res.max_abs:.3e} passed={res.passed}")
    return results


def _oracle_cases(cases: int, rng: Rng) -> Tuple[float, float]:
    static_err = 0.0
    dynamic_err = 0.0
    for case in range(cases):
        r = rng.spawn(f'conv-oracle-{case}')
        k = int((1, 3, 5)[r.integers(0, 3)])
        n, c, o = int(r.integers(1, 3)), int(r.integers(1, 9)), int(r.integers(1, 9))
        h, w = int(r.integers(k, 17)), int(r.integers(k, 17))
        stride, padding = int(r.integers(1, 3)), int(r.integers(0, k // 2 + 1))
        spec = ConvSpec(k, k, c, o, stride=stride, padding=padding)

        x = Tensor(r.uniform((n, c, h, w), -1.0, 1.0))
        wt = Tensor(r.uniform((o, c, k, k), -1.0, 1.0))
        b = Tensor(r.uniform((o,), -1.0, 1.0))
        got = conv2d(x, wt, b, spec).data
        want = naive_conv2d(x.data, wt.data, b.data, stride, padding)
        static_err = max(static_err, float(np.max(np.abs(got - want))))

        kernels = Tensor(r.uniform((n, o, c), -1.0, 1.0))
        got = conv2d_dynamic(x, kernels).data
        want = naive_conv2d_dynamic(x.data, kernels.data)
        dynamic_err = max(dynamic_err, float(np.max(np.abs(got - want))))
    return static_err, dynamic_err


# ---------------------------------------------------------------------------
# Attention-map equivalence
# ---------------------------------------------------------------------------

def map_shape_for(tokens: int) -> Tuple[int, int]:
    """Most square H x W with H * W == tokens"""
    h = math.isqrt(tokens)
    while tokens % h:
        h -= 1
    return h, tokens // h


@dataclass
class EquivalenceResult:
    tokens: int
    embed_dim: int
    seeds: int
    max_abs: float
    tolerance: float = EQUIV_TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_abs <= self.tolerance


def check_equivalence(token_counts: Sequence[int] = (4, 16, 64), embed_dims: Sequence[int] = (8, 32),
                      seeds: int = 10, rng: Optional[Rng] = None, logger=None) -> List[EquivalenceResult]:
    """attention_map_via_conv(Q, K) against matmul(Q, K^T) on random U(-1, 1) operands"""
    rng = rng or Rng(0)
    results = []
    for s in token_counts:
        for e in embed_dims:
            worst = 0.0
            for seed in range(seeds):
                r = rng.spawn(f'equiv-{s}-{e}-{seed}')
                q = Tensor(r.uniform((s, e), -1.0, 1.0))
                k = Tensor(r.uniform((s, e), -1.0, 1.0))
                via_conv = attention_map_via_conv(q, k, map_shape_for(s)).data
                direct = matmul(q, transpose(k)).data
                worst = max(worst, float(np.max(np.abs(via_conv - direct))))
            results.append(EquivalenceResult(tokens=s, embed_dim=e, seeds=seeds, max_abs=worst))
            if logger:
                logger.info(f"EQUIV: S={s} E={e} seeds={seeds} max_abs={worst:.3e}")
    return results


# ---------------------------------------------------------------------------
# Gradient suite
# ---------------------------------------------------------------------------

@dataclass
class GradCase:
    """
    A scalar-valued function of named inputs

    fn receives one Tensor per input name and may return any shape; the suite
    contracts non-scalar outputs with fixed random weights.
    """
    name: str
    inputs: Dict[str, np.ndarray]
    fn: Callable[[Dict[str, Tensor]], Tensor]
    probes: int = 20


@dataclass
class GradResult:
    name: str
    probes: int
    max_rel_error: float
    tolerance: float = GRAD_TOLERANCE
    worst_input: str = ''

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def _away_from(values: np.ndarray, points: Sequence[float], margin: float) -> np.ndarray:
    """Pushes values out of [p - margin, p + margin] so kinks are not straddled"""
    values = values.copy()
    for p in points:
        near = np.abs(values - p) < margin
        values[near] = p + np.where(values[near] >= p, margin, -margin)
    return values


def _tiny_ugdc() -> UGDCConfig:
    return UGDCConfig(depth=2, base_channels=4, gdc_stages=('mid',),
                      gdc=GDCConfig(grid=(2, 2), embed_dim=4))


def gradient_cases(rng: Rng) -> List[GradCase]:
    """Every differentiable op, the GDC block end-to-end, smooth_l1 and a small UGDC"""
    def normal(tag, shape):
        return rng.spawn(tag).normal(shape)

    def uniform(tag, shape, low, high):
        return rng.spawn(tag).uniform(shape, low, high)

    def signed(tag, shape, low, high):
        r = rng.spawn(tag)
        return r.uniform(shape, low, high) * np.where(r.uniform(shape) < 0.5, -1.0, 1.0)

    cases = [
        GradCase('add', {'a': normal('add-a', (4, 5)), 'b': normal('add-b', (4, 5))},
                 lambda t: add(t['a'], t['b'])),
        GradCase('sub', {'a': normal('sub-a', (4, 5)), 'b': normal('sub-b', (4, 5))},
                 lambda t: sub(t['a'], t['b'])),
        GradCase('mul', {'a': normal('mul-a', (4, 5)), 'b': normal('mul-b', (4, 5))},
                 lambda t: mul(t['a'], t['b'])),
        GradCase('scalar_mul', {'a': normal('smul', (4, 6))}, lambda t: scalar_mul(t['a'], -1.7)),
        GradCase('relu', {'a': _away_from(normal('relu', (5, 6)), [0.0], 1e-3)}, lambda t: relu(t['a'])),
        GradCase('leaky_relu', {'a': _away_from(normal('leaky', (5, 6)), [0.0], 1e-3)},
                 lambda t: leaky_relu(t['a'], 0.2)),
        GradCase('sigmoid', {'a': normal('sigmoid', (5, 6))}, lambda t: sigmoid(t['a'])),
        GradCase('tanh', {'a': normal('tanh', (5, 6))}, lambda t: tanh(t['a'])),
        GradCase('clamp', {'a': _away_from(uniform('clamp', (5, 6), -0.5, 1.5), [0.0, 1.0], 1e-3)},
                 lambda t: clamp(t['a'], 0.0, 1.0)),
        GradCase('matmul', {'a': normal('mm-a', (5, 4)), 'b': normal('mm-b', (4, 3))},
                 lambda t: matmul(t['a'], t['b'])),
        GradCase('reshape', {'a': normal('reshape', (4, 6))}, lambda t: reshape(t['a'], (2, 12))),
        GradCase('transpose', {'a': normal('transpose', (2, 3, 4))}, lambda t: transpose(t['a'], (2, 0, 1))),
        GradCase('concat_channels', {'a': normal('cat-a', (1, 2, 3, 3)), 'b': normal('cat-b', (1, 3, 3, 3))},
                 lambda t: concat_channels([t['a'], t['b']])),
        GradCase('expand_batch', {'a': normal('expand', (4, 5))}, lambda t: expand_batch(t['a'], 3)),
        GradCase('softmax', {'a': normal('softmax', (3, 8))}, lambda t: softmax(t['a'], axis=-1)),
        GradCase('softmax_pick', {'a': normal('softmax-pick', (8,))},
                 lambda t: reduce_sum(mul(softmax(t['a'], axis=-1), Tensor(np.eye(8)[3]))), probes=8),
        GradCase('reduce_sum', {'a': normal('rsum', (4, 6))}, lambda t: reduce_sum(t['a'])),
        GradCase('reduce_mean', {'a': normal('rmean', (4, 6))}, lambda t: reduce_mean(t['a'])),
        GradCase('conv2d', {'x': normal('conv-x', (2, 3, 7, 6)), 'w': normal('conv-w', (4, 3, 3, 3)),
                            'b': normal('conv-b', (4,))},
                 lambda t: conv2d(t['x'], t['w'], t['b'], ConvSpec(3, 3, 3, 4, stride=2, padding=1))),
        GradCase('conv2d_dynamic', {'x': normal('dyn-x', (2, 4, 5, 5)), 'k': normal('dyn-k', (2, 6, 4))},
                 lambda t: conv2d_dynamic(t['x'], t['k'])),
        GradCase('patch_pool', {'x': normal('pool', (2, 3, 7, 9))}, lambda t: patch_pool(t['x'], (3, 4))),
        GradCase('downsample2x', {'x': normal('down', (1, 2, 6, 4))}, lambda t: downsample2x(t['x'])),
        GradCase('upsample2x', {'x': normal('up', (1, 2, 3, 4))}, lambda t: upsample2x(t['x'])),
        GradCase('self_attention', {'q': normal('att-q', (6, 4)), 'k': normal('att-k', (6, 4)),
                                    'v': normal('att-v', (6, 4))},
                 lambda t: self_attention(t['q'], t['k'], t['v'])),
    ]

    pred = uniform('sl1-pred', (4, 6), 0.0, 1.0)
    target = pred + signed('sl1-d', (4, 6), 0.1, 0.8)
    target[::2] = pred[::2] + signed('sl1-far', (2, 6), 1.2, 2.0)
    cases.append(GradCase('smooth_l1', {'pred': pred, 'target': target},
                          lambda t: smooth_l1(t['pred'], t['target'])))

    gdc_cfg = GDCConfig(in_channels=3, out_channels=4, grid=(2, 3), embed_dim=5)
    gdc_inputs = {'x': normal('gdc-x', (2, 3, 6, 9))}
    for name, p in init_gdc_params(gdc_cfg, rng.spawn('gdc-params')).named():
        gdc_inputs[name] = p.data + 0.1 * normal(f'gdc-{name}', p.shape)

    def gdc_fn(t):
        params = GDCParams(t['key.weight'], t['key.bias'], t['query.weight'], t['query.bias'],
                           t['out.weight'], t['out.bias'], t['diff'])
        return gdc_forward(t['x'], params, gdc_cfg)

    cases.append(GradCase('gdc_block', gdc_inputs, gdc_fn, probes=6))

    model_cfg = _tiny_ugdc()
    model = build(Role.PM, model_cfg, rng.spawn('ugdc-params'))
    names = [name for name, _ in model.named_parameters()]
    ugdc_inputs = {'x': uniform('ugdc-x', (1, 3, 16, 16), 0.0, 1.0)}
    for name, p in model.named_parameters():
        # nonzero biases and offsets so every parameter sees a generic operating point
        ugdc_inputs[name] = p.data + 0.05 * normal(f'ugdc-{name}', p.shape)

    def ugdc_fn(t):
        m = Model(Role.PM, model_cfg, OrderedDict((name, t[name]) for name in names))
        return forward(m, t['x'])

    cases.append(GradCase('ugdc_1x3x16x16', ugdc_inputs, ugdc_fn, probes=3))
    return cases


def _contract(out: Tensor, weights: Optional[np.ndarray]) -> Tensor:
    if weights is None:
        return out
    return reduce_sum(mul(out, Tensor(weights)))


def _central(case: GradCase, weights, name: str, index: int, h: float) -> float:
    value = case.inputs[name]
    numeric = []
    for step in (h, -h):
        shifted = value.copy()
        shifted.flat[index] += step
        tensors = {n: Tensor(shifted if n == name else v) for n, v in case.inputs.items()}
        numeric.append(_contract(case.fn(tensors), weights).item())
    return (numeric[0] - numeric[1]) / (2.0 * h)


def check_case(case: GradCase, rng: Rng, h: float = 1e-6) -> GradResult:
    """
    Analytic gradient of every input against central differences at random coordinates

    A probe that misses the tolerance is measured again with a step ten times
    smaller, which steps off leaky-relu kinks.
    """
    probe = case.fn({name: Tensor(value) for name, value in case.inputs.items()})
    weights = None if probe.size == 1 else rng.spawn(f'{case.name}-weights').normal(probe.shape)

    leaves = {name: Tensor(value, requires_grad=True, name=name) for name, value in case.inputs.items()}
    with Graph() as graph:
        loss = _contract(case.fn(leaves), weights)
        graph.backward(loss)

    total_probes = 0
    worst, worst_input = 0.0, ''
    for name, value in case.inputs.items():
        analytic = leaves[name].grad
        if analytic is None:
            analytic = np.zeros(value.shape)
        count = min(value.size, case.probes)
        indices = rng.spawn(f'{case.name}-{name}-probes').permutation(value.size)[:count]
        for index in indices:
            err = relative_error(analytic.flat[index], _central(case, weights, name, index, h))
            if err > GRAD_TOLERANCE:
                err = min(err, relative_error(analytic.flat[index], _central(case, weights, name, index, h / 10)))
            if err > worst:
                worst, worst_input = err, name
        total_probes += count
    return GradResult(name=case.name, probes=total_probes, max_rel_error=worst, worst_input=worst_input)


def check_gradients(rng: Optional[Rng] = None, names: Optional[Sequence[str]] = None, h: float = 1e-6,
                    dtype: str = 'float64', logger=None, progress: bool = False) -> List[GradResult]:
    """
    Runs the gradient suite at the given precision

    float64 with h = 1e-6 keeps truncation and rounding error far below the
    1e-3 relative tolerance.
    """
    rng = rng or Rng(0)
    results = []
    with precision(dtype):
        cases = gradient_cases(rng.spawn('grad-inputs'))
        if names:
            unknown = sorted(set(names) - {c.name for c in cases})
            if unknown:
                raise ConfigError(f"Unknown gradient case(s): {unknown}")
            cases = [c for c in cases if c.name in names]
        for case in tqdm(cases, desc="Gradient suite", unit="op", disable=not progress):
            res = check_case(case, rng.spawn(f'grad-{case.name}'), h=h)
            results.append(res)
            if logger:
                logger.info(f"GRAD_CHECK: {res.name} probes={res.probes} "
                            f"max_rel={res.max_rel_error:.3e} passed={res.passed}")
    return results


def gradient_case_names() -> List[str]:
    with precision('float64'):
        return [c.name for c in gradient_cases(Rng(0))]
