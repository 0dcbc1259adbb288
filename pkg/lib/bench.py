#!/usr/bin/env python3
"""
Empirical complexity benchmark and model complexity report

scaling_bench times one block over a list of pixel counts n. Warmup runs are
discarded, each size keeps the median of the timed repeats, and growth is
reported two ways:

    ratio  time growth per doubling of n between successive sizes,
           (t_i / t_{i-1}) ** (1 / log2(n_i / n_{i-1})); ~2 for O(n), ~4 for O(n^2)
    slope  least-squares slope of log(time) against log(n)

Run it single-threaded (the CLI pins BLAS/OpenMP to one thread before numpy
loads) or the asymptotics are hidden by parallel speedups.
"""

import csv
import math
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError
from .gdc import GDCConfig, gdc_forward, init_gdc_params, self_attention
from .tensor import Rng, Tensor, get_dtype
from .ugdc import Role, build, flops, param_count

BLOCKS = ('gdc', 'self-attention')

# Published full-scale complexity, shown as context only
PUBLISHED_GFLOPS = 58.670
PUBLISHED_PARAMS_M = 4.442
REPORT_SIZE = (400, 640)


@dataclass(frozen=True)
class BenchConfig:
    """Fixed block geometry for the scaling runs; sizes are square sides"""
    gdc_sides: Tuple[int, ...] = (64, 128, 256, 512)
    attention_sides: Tuple[int, ...] = (32, 48, 64, 96)
    repeats: int = 5
    warmup: int = 1
    channels: int = 8
    embed_dim: int = 16
    grid: Tuple[int, int] = (8, 8)
    out_channels: int = 8
    attention_dim: int = 16
    memory_limit_mib: int = 512

    def __post_init__(self):
        if self.repeats < 5:
            raise ConfigError(f"Benchmarks need at least 5 repeats, got {self.repeats}")
        if self.warmup < 0:
            raise ConfigError(f"warmup must be non-negative, got {self.warmup}")

    def gdc_config(self) -> GDCConfig:
        return GDCConfig(in_channels=self.channels, out_channels=self.out_channels, grid=self.grid,
                         embed_dim=self.embed_dim)


@dataclass
class BenchReport:
    block: str
    sizes: List[int]
    medians_ns: List[int]
    repeats: int
    ratios: List[float] = field(default_factory=list)
    slope: Optional[float] = None

    def __post_init__(self):
        if self.repeats < 5:
            raise ConfigError(f"BenchReport needs at least 5 repeats, got {self.repeats}")
        if any(b <= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise ConfigError(f"Benchmark sizes must be strictly increasing: {self.sizes}")

    def rows(self) -> List[Tuple[str, int, int, str]]:
        ratios = [''] + [f"{r:.4f}" for r in self.ratios]
        return [(self.block, n, t, r) for n, t, r in zip(self.sizes, self.medians_ns, ratios)]


def doubling_ratios(sizes: Sequence[int], times: Sequence[float]) -> List[float]:
    ratios = []
    for (n0, t0), (n1, t1) in zip(zip(sizes, times), zip(sizes[1:], times[1:])):
        ratios.append((t1 / t0) ** (1.0 / math.log2(n1 / n0)))
    return ratios


def loglog_slope(sizes: Sequence[int], times: Sequence[float]) -> Optional[float]:
    if len(sizes) < 2:
        return None
    slope, _ = np.polyfit(np.log(np.asarray(sizes, dtype=np.float64)),
                          np.log(np.asarray(times, dtype=np.float64)), 1)
    return float(slope)


def _square(n: int) -> Tuple[int, int]:
    side = math.isqrt(n)
    if side * side != n:
        raise ConfigError(f"GDC benchmark sizes must be square pixel counts, got {n}")
    return side, side


def _time_ns(run, repeats: int, warmup: int) -> int:
    for _ in range(warmup):
        run()
    samples = []
    for _ in range(repeats):
        start = time.perf_counter_ns()
        run()
        samples.append(time.perf_counter_ns() - start)
    return int(np.median(samples))


def attention_map_bytes(tokens: int) -> int:
    return tokens * tokens * np.dtype(get_dtype()).itemsize


def scaling_bench(block: str, sizes: Sequence[int], cfg: BenchConfig = BenchConfig(),
                  rng: Optional[Rng] = None, logger=None) -> BenchReport:
    """
    Times gdc_forward (fixed S, E) or self_attention (tokens = n) over sizes

    Attention sizes whose S x S map would exceed cfg.memory_limit_mib are
    rejected with ConfigError before anything runs.
    """
    if block not in BLOCKS:
        raise ConfigError(f"Unknown benchmark block '{block}'; use one of {BLOCKS}")
    sizes = [int(n) for n in sizes]
    if not sizes:
        raise ConfigError("scaling_bench needs at least one size")
    rng = rng or Rng(0)
    limit = cfg.memory_limit_mib * 2 ** 20

    if block == 'self-attention':
        too_big = [n for n in sizes if attention_map_bytes(n) > limit]
        if too_big:
            raise ConfigError(
                f"Attention map for n={too_big[0]} needs {attention_map_bytes(too_big[0]) / 2 ** 20:.0f} MiB, "
                f"over the {cfg.memory_limit_mib} MiB limit"
            )
    else:
        gdc_cfg = cfg.gdc_config()
        params = init_gdc_params(gdc_cfg, rng.spawn('bench-gdc'))
        for n in sizes:
            height, width = _square(n)
            if height < gdc_cfg.grid[0]:
                raise ConfigError(f"GDC benchmark size {height}x{width} is smaller than the grid {gdc_cfg.grid}")

    medians = []
    for n in sizes:
        data_rng = rng.spawn(f'bench-{block}-{n}')
        if block == 'gdc':
            height, width = _square(n)
            x = Tensor(data_rng.normal((1, cfg.channels, height, width)))

            def run():
                gdc_forward(x, params, gdc_cfg)
        else:
            q, k, v = (Tensor(data_rng.normal((n, cfg.attention_dim))) for _ in range(3))

            def run():
                self_attention(q, k, v)

        median = _time_ns(run, cfg.repeats, cfg.warmup)
        medians.append(median)
        if logger:
            logger.info(f"BENCH_SIZE: {block} n={n} median_ns={median} repeats={cfg.repeats}")

    return BenchReport(block=block, sizes=sizes, medians_ns=medians, repeats=cfg.repeats,
                       ratios=doubling_ratios(sizes, medians), slope=loglog_slope(sizes, medians))


def write_csv(reports: Sequence[BenchReport], path):
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(['block', 'n', 'median_ns', 'ratio'])
        for report in reports:
            writer.writerows(report.rows())


def check_envelopes(gdc: Optional[BenchReport], attention: Optional[BenchReport]) -> List[str]:
    """Acceptance envelope of the paired benchmark; returns the violations"""
    failures = []
    if gdc is not None:
        failures += [f"gdc ratio {r:.3f} outside [1.5, 3.0]" for r in gdc.ratios if not 1.5 <= r <= 3.0]
        if gdc.slope is not None and not 0.8 <= gdc.slope <= 1.3:
            failures.append(f"gdc slope {gdc.slope:.3f} outside [0.8, 1.3]")
    if attention is not None:
        failures += [f"self-attention ratio {r:.3f} below 3.2" for r in attention.ratios if r < 3.2]
        if attention.slope is not None and not 1.7 <= attention.slope <= 2.4:
            failures.append(f"self-attention slope {attention.slope:.3f} outside [1.7, 2.4]")
    if gdc is not None and attention is not None and gdc.slope is not None and attention.slope is not None:
        if gdc.slope >= attention.slope:
            failures.append(f"gdc slope {gdc.slope:.3f} is not below self-attention slope {attention.slope:.3f}")
    return failures


@dataclass
class ModelComplexity:
    role: str
    params: int
    gflops: float


def model_report(configs, size: Tuple[int, int] = REPORT_SIZE) -> List[ModelComplexity]:
    """
    Parameter count and GFLOPs (2 x MACs) of each (role, UGDCConfig) at size

    Pooling, resampling and activations are not counted.
    """
    rows = []
    for role, model_cfg in configs:
        model = build(Role(role), model_cfg, Rng(0))
        rows.append(ModelComplexity(role=Role(role).value, params=param_count(model),
                                    gflops=2 * flops(model, *size) / 1e9))
    return rows
