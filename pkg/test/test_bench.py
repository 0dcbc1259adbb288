import csv

import pytest

from lib.bench import (
    BenchConfig, BenchReport, attention_map_bytes, check_envelopes, doubling_ratios, loglog_slope,
    model_report, scaling_bench, write_csv,
)
from lib.errors import ConfigError
from lib.tensor import precision
from lib.ugdc import UGDCConfig


def report(block, sizes, times):
    return BenchReport(block=block, sizes=sizes, medians_ns=times, repeats=5,
                       ratios=doubling_ratios(sizes, times), slope=loglog_slope(sizes, times))


def test_doubling_ratio_normalises_uneven_steps():
    assert doubling_ratios([100, 200, 800], [10, 20, 80]) == pytest.approx([2.0, 2.0])
    assert doubling_ratios([100, 200], [10, 40]) == pytest.approx([4.0])


def test_loglog_slope():
    sizes = [64, 128, 256, 512]
    assert loglog_slope(sizes, [n ** 2 for n in sizes]) == pytest.approx(2.0)
    assert loglog_slope(sizes, [3 * n for n in sizes]) == pytest.approx(1.0)
    assert loglog_slope([64], [1]) is None


def test_repeats_below_five_rejected():
    with pytest.raises(ConfigError):
        BenchConfig(repeats=4)
    with pytest.raises(ConfigError):
        BenchReport(block='gdc', sizes=[1, 2], medians_ns=[1, 2], repeats=3)
    with pytest.raises(ConfigError):
        BenchReport(block='gdc', sizes=[2, 1], medians_ns=[1, 2], repeats=5)


def test_envelopes_accept_linear_and_quadratic_growth():
    sizes = [1024, 2048, 4096, 8192]
    gdc = report('gdc', sizes, [n * 10 for n in sizes])
    attention = report('self-attention', [32, 64, 128], [n * n for n in (32, 64, 128)])
    assert check_envelopes(gdc, attention) == []


def test_envelopes_flag_superlinear_gdc():
    sizes = [1024, 2048, 4096]
    gdc = report('gdc', sizes, [n ** 3 for n in sizes])
    attention = report('self-attention', [32, 64], [32 * 32, 64 * 64])
    failures = check_envelopes(gdc, attention)
    assert any('gdc ratio' in f for f in failures)
    assert any('not below' in f for f in failures)


def test_attention_memory_limit_checked_before_running():
    with precision('float64'):
        assert attention_map_bytes(1024) == 8 * 2 ** 20
    with pytest.raises(ConfigError, match='MiB limit'):
        scaling_bench('self-attention', [32, 9000], BenchConfig(memory_limit_mib=64))


def test_gdc_sizes_must_be_square_and_fit_the_grid():
    with pytest.raises(ConfigError, match='square'):
        scaling_bench('gdc', [1000])
    with pytest.raises(ConfigError, match='smaller than the grid'):
        scaling_bench('gdc', [16])
    with pytest.raises(ConfigError):
        scaling_bench('convolution', [64])


def test_small_scaling_run_and_csv(tmp_path):
    cfg = BenchConfig(repeats=5, warmup=0, channels=2, out_channels=2, embed_dim=4, grid=(2, 2), attention_dim=4)
    gdc = scaling_bench('gdc', [16, 64], cfg)
    attention = scaling_bench('self-attention', [8, 16], cfg)
    assert gdc.sizes == [16, 64] and len(gdc.medians_ns) == 2 and len(gdc.ratios) == 1
    assert all(t > 0 for t in attention.medians_ns)

    path = tmp_path / 'bench.csv'
    write_csv([gdc, attention], path)
    with open(path, newline='') as f:
        rows = list(csv.reader(f))
    assert rows[0] == ['block', 'n', 'median_ns', 'ratio']
    assert [(r[0], r[1]) for r in rows[1:]] == [('gdc', '16'), ('gdc', '64'), ('self-attention', '8'),
                                                ('self-attention', '16')]
    assert rows[1][3] == '' and rows[2][3] != ''


def test_model_report_counts_every_role():
    cfg = UGDCConfig(depth=1, base_channels=2)
    rows = model_report([('TM', cfg), ('PM', cfg)], size=(32, 32))
    assert [r.role for r in rows] == ['TM', 'PM']
    assert rows[0].params == rows[1].params
    assert rows[0].gflops > 0
