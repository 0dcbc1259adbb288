import numpy as np
import pytest

from lib.errors import ConfigError
from lib.tensor import Function, Rng, mul, precision
from lib.verify import (
    GRAD_TOLERANCE, GradCase, check_case, check_gradients, gradient_case_names, naive_matmul,
    naive_softmax,
)


class WrongSquare(Function):
    """x^2 with the gradient off by a factor of two"""

    def forward(self, a):
        self.a = a
        return a * a

    def backward(self, g):
        return (g * self.a,)


def test_suite_covers_every_op_and_the_composites():
    names = gradient_case_names()
    for expected in ('add', 'matmul', 'softmax', 'conv2d', 'conv2d_dynamic', 'patch_pool', 'self_attention',
                     'smooth_l1', 'gdc_block', 'ugdc_1x3x16x16'):
        assert expected in names
    assert len(names) == len(set(names))


def test_selected_cases_pass():
    results = check_gradients(Rng(0), names=['mul', 'leaky_relu', 'clamp', 'softmax_pick', 'conv2d',
                                             'patch_pool', 'smooth_l1', 'gdc_block'])
    assert [r.name for r in results] == ['mul', 'leaky_relu', 'clamp', 'softmax_pick', 'conv2d',
                                         'patch_pool', 'smooth_l1', 'gdc_block']
    for r in results:
        assert r.passed, f"{r.name}: {r.max_rel_error:.3e} at {r.worst_input}"
        assert r.probes > 0


def test_unknown_case_rejected():
    with pytest.raises(ConfigError, match='Unknown gradient case'):
        check_gradients(Rng(0), names=['matmul', 'cube'])


def test_wrong_backward_is_caught():
    case = GradCase('wrong_square', {'a': Rng(1).uniform((3, 4), 0.5, 1.5)}, lambda t: WrongSquare.apply(t['a']))
    with precision('float64'):
        result = check_case(case, Rng(2))
    assert not result.passed
    assert result.max_rel_error == pytest.approx(0.5, rel=1e-3)
    assert result.max_rel_error > GRAD_TOLERANCE


def test_correct_composite_passes_under_float64():
    case = GradCase('square', {'a': Rng(1).normal((3, 4))}, lambda t: mul(t['a'], t['a']), probes=5)
    with precision('float64'):
        result = check_case(case, Rng(2))
    assert result.passed
    assert result.probes == 5


def test_oracles_on_hand_computed_values():
    np.testing.assert_array_equal(naive_matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])), [[11.0]])
    np.testing.assert_allclose(naive_softmax(np.zeros((1, 4))), 0.25)
