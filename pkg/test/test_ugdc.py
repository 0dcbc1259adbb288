from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from lib.config import load_config
from lib.conv import ConvSpec, conv_param_count
from lib.errors import ConfigError, ShapeError
from lib.gdc import GDCConfig
from lib.optim import AdamWConfig, OptimizerState, optimizer_step
from lib.pipeline import smooth_l1
from lib.tensor import Graph, Rng, Tensor, backward, precision, reduce_mean
from lib.ugdc import (
    EMMode, Role, UGDCConfig, build, em_apply, flops, forward, layer_plan, param_count, parameter_names,
)


def batch(size=16, n=2, seed=0):
    return Tensor(Rng(seed).uniform((n, 3, size, size), 0.0, 1.0))


def test_stage_names_and_validation():
    cfg = UGDCConfig(depth=2)
    assert cfg.stage_names() == ['enc0', 'enc1', 'mid', 'dec0', 'dec1']
    with pytest.raises(ConfigError):
        UGDCConfig(depth=2, gdc_stages=('enc5',))
    with pytest.raises(ConfigError):
        UGDCConfig(base_channels=0)


def test_gdc_stage_replaces_second_conv(tiny_config):
    names = [layer.name for layer in layer_plan(tiny_config)]
    assert 'mid.gdc' in names and 'mid.conv2' not in names
    assert 'enc0.conv2' in names
    assert names[-1] == 'head'
    plain = [layer.name for layer in layer_plan(replace(tiny_config, gdc_stages=()))]
    assert 'mid.conv2' in plain and 'mid.gdc' not in plain


def test_build_is_deterministic_and_names_match_plan(tiny_config):
    a = build(Role.TM, tiny_config, Rng(5))
    b = build(Role.TM, tiny_config, Rng(5))
    assert [n for n, _ in a.named_parameters()] == parameter_names(tiny_config)
    for (name, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(pa.numpy(), pb.numpy(), err_msg=name)
    c = build(Role.TM, tiny_config, Rng(6))
    assert not np.array_equal(a.parameters['enc0.conv1.weight'].numpy(), c.parameters['enc0.conv1.weight'].numpy())


def test_forward_keeps_shape_and_range(tiny_config):
    model = build(Role.PM, tiny_config, Rng(1))
    out = forward(model, batch()).numpy()
    assert out.shape == (2, 3, 16, 16)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_image_size_checks(tiny_config):
    model = build(Role.TM, tiny_config, Rng(0))
    with pytest.raises(ShapeError):
        forward(model, Tensor(np.zeros((1, 3, 18, 16))))
    with pytest.raises(ShapeError):
        forward(model, Tensor(np.zeros((1, 4, 16, 16))))
    wide_grid = replace(tiny_config, gdc=GDCConfig(grid=(8, 8), embed_dim=4))
    with pytest.raises(ShapeError):
        wide_grid.check_image_size(16, 16)
    with pytest.raises(ConfigError):
        build(Role.TM, wide_grid, Rng(0), image_size=(16, 16))


def test_residual_em_is_identity_at_initialisation(tiny_config):
    em = build(Role.EM, tiny_config, Rng(2), em_mode=EMMode.RESIDUAL)
    assert em.em_mode == EMMode.RESIDUAL
    assert not np.any(em.parameters['head.weight'].numpy())
    h_prime = batch(seed=3)
    out, residual = em_apply(em, h_prime, return_residual=True)
    assert not np.any(residual.numpy())
    np.testing.assert_array_equal(out.numpy(), h_prime.numpy())


def test_direct_em_squashes_its_own_output(tiny_config):
    em = build(Role.EM, tiny_config, Rng(2), em_mode=EMMode.DIRECT)
    assert np.any(em.parameters['head.weight'].numpy())
    h_prime = batch(seed=3)
    np.testing.assert_array_equal(em_apply(em, h_prime).numpy(), forward(em, h_prime).numpy())


def test_residual_is_subtracted_from_the_prediction(tiny_config):
    em = build(Role.EM, tiny_config, Rng(2), em_mode=EMMode.RESIDUAL)
    bias = em.parameters['head.bias']
    # zero head weights, so the residual is tanh(bias) everywhere
    bias.data = np.full(bias.shape, np.arctanh(0.1), dtype=bias.data.dtype)
    h_prime = Tensor(np.full((1, 3, 16, 16), 0.5))
    out, residual = em_apply(em, h_prime, return_residual=True)
    np.testing.assert_allclose(residual.numpy(), 0.1, atol=1e-6)
    np.testing.assert_allclose(out.numpy(), 0.4, atol=1e-6)


@pytest.mark.parametrize("mode", [EMMode.DIRECT, EMMode.RESIDUAL])
def test_one_step_reduces_em_loss_on_a_fixed_batch(tiny_config, mode):
    with precision('float64'):
        pm = build(Role.PM, tiny_config, Rng(1))
        pm.freeze()
        em = build(Role.EM, tiny_config, Rng(2), em_mode=mode)
        normal = batch(seed=5)
        h_prime = forward(pm, normal)

        def loss():
            return smooth_l1(em_apply(em, h_prime), normal)

        with Graph():
            before = loss()
            backward(before)
        optimizer_step(em.named_parameters(), OptimizerState(), AdamWConfig(lr=1e-5, weight_decay=0.0))
        after = loss()
    assert after.item() < before.item()


def test_every_parameter_receives_a_gradient(tiny_config):
    model = build(Role.TM, tiny_config, Rng(4))
    with Graph():
        backward(reduce_mean(forward(model, batch(n=1))))
    missing = [name for name, p in model.named_parameters() if p.grad is None]
    assert missing == []
    assert np.any(model.parameters['mid.gdc.diff'].grad)


def test_frozen_model_records_nothing(tiny_config):
    model = build(Role.TM, tiny_config, Rng(4))
    model.freeze()
    assert model.frozen
    with Graph() as graph:
        forward(model, batch(n=1))
    assert graph.nodes == []
    model.unfreeze()
    assert all(p.requires_grad for _, p in model.named_parameters())


def test_config_dict_round_trip(tiny_config):
    assert UGDCConfig.from_dict(tiny_config.to_dict()) == tiny_config


def test_lone_conv_stage_counts_weights_and_biases():
    k, c_in, c_out = 3, 5, 7
    assert conv_param_count(ConvSpec.same(k, c_in, c_out)) == k * k * c_in * c_out + c_out
    # depth 0 without GDC: mid.conv1 (3x3, 3->4), mid.conv2 (3x3, 4->4), head (1x1, 4->3)
    model = build(Role.PM, UGDCConfig(depth=0, base_channels=4, gdc_stages=()), Rng(0))
    assert param_count(model) == (9 * 3 * 4 + 4) + (9 * 4 * 4 + 4) + (4 * 3 + 3)
    for layer in model.plan:
        spec = layer.conv
        size = model.parameters[f'{layer.name}.weight'].size + model.parameters[f'{layer.name}.bias'].size
        assert size == spec.kernel_h * spec.kernel_w * spec.in_channels * spec.out_channels + spec.out_channels


def test_desk_model_parameter_count_is_pinned():
    cfg = load_config(Path(__file__).parent.parent / 'configs' / 'desk.toml', env={})
    for role in (Role.TM, Role.PM, Role.EM):
        model = build(role, cfg.model_config(role.value), Rng(0))
        assert param_count(model) == 124107
        assert param_count(model) == sum(p.size for _, p in model.named_parameters())


def test_param_count_and_flops(tiny_config):
    model = build(Role.TM, tiny_config, Rng(0))
    assert param_count(model) == sum(p.size for _, p in model.named_parameters())
    plain = build(Role.TM, replace(tiny_config, gdc_stages=()), Rng(0))
    # convolution-only cost scales with the pixel count
    assert flops(plain, 32, 32) == 4 * flops(plain, 16, 16)
    assert flops(model, 16, 16) != flops(plain, 16, 16)
    assert 'role=TM' in repr(model)
