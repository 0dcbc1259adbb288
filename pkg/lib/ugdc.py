#!/usr/bin/env python3
"""
UGDC network: a U-Net whose selected stages use a GDC block as their second layer

The same architecture is instantiated three times (TM darkens, PM brightens,
EM refines). Stage identifiers are enc0..enc{depth-1}, mid, dec0..dec{depth-1};
a stage listed in gdc_stages gets a GDC block instead of its second 3x3 conv.
Upsampling is nearest-neighbour followed by a 3x3 conv; skip connections
concatenate the encoder output into the matching decoder stage.
"""

from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Tuple

from .conv import ConvSpec, conv2d, conv_param_count, downsample2x, upsample2x
from .errors import ConfigError, ShapeError
from .gdc import (
    GDC_PARAM_NAMES, GDCConfig, GDCParams, conv_bias, conv_weight, gdc_flops, gdc_forward, gdc_param_count,
    init_gdc_params,
)
from .tensor import Rng, Tensor, clamp, concat_channels, leaky_relu, sigmoid, sub, tanh, zeros


class Role(str, Enum):
    TM = 'TM'
    PM = 'PM'
    EM = 'EM'


class EMMode(str, Enum):
    DIRECT = 'direct'
    RESIDUAL = 'residual'


@dataclass(frozen=True)
class UGDCConfig:
    """Architecture of one UGDC network"""
    depth: int = 3
    base_channels: int = 16
    gdc_stages: Tuple[str, ...] = ('mid',)
    gdc: GDCConfig = field(default_factory=GDCConfig)
    in_channels: int = 3
    out_channels: int = 3
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.depth < 0:
            raise ConfigError(f"depth must be non-negative, got {self.depth}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be positive, got {self.base_channels}")
        unknown = sorted(set(self.gdc_stages) - set(self.stage_names()))
        if unknown:
            raise ConfigError(f"Unknown GDC stage(s) {unknown}; valid stages: {self.stage_names()}")

    def stage_names(self) -> List[str]:
        return ([f'enc{l}' for l in range(self.depth)] + ['mid']
                + [f'dec{l}' for l in range(self.depth)])

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def stage_level(self, stage: str) -> int:
        """Number of 2x downsamplings between the input and this stage"""
        return self.depth if stage == 'mid' else int(stage[3:])

    def stage_gdc(self, stage: str) -> GDCConfig:
        width = self.channels(self.stage_level(stage))
        return replace(self.gdc, in_channels=width, out_channels=width)

    def check_image_size(self, height: int, width: int, error=ShapeError):
        factor = 2 ** self.depth
        if height % factor or width % factor:
            raise error(f"Image {height}x{width} is not divisible by 2^depth = {factor}")
        for stage in self.gdc_stages:
            scale = 2 ** self.stage_level(stage)
            grid = self.gdc.grid
            if height // scale < grid[0] or width // scale < grid[1]:
                raise error(
                    f"GDC grid {grid[0]}x{grid[1]} does not fit stage '{stage}' "
                    f"({height // scale}x{width // scale}) of a {height}x{width} image"
                )

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['gdc_stages'] = list(self.gdc_stages)
        data['gdc']['grid'] = list(self.gdc.grid)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'UGDCConfig':
        data = dict(data)
        gdc = dict(data.pop('gdc', {}))
        if 'grid' in gdc:
            gdc['grid'] = tuple(gdc['grid'])
        data['gdc_stages'] = tuple(data.get('gdc_stages', ()))
        return cls(gdc=GDCConfig(**gdc), **data)


@dataclass(frozen=True)
class Layer:
    """One parameterised layer of the plan; level sets its spatial scale"""
    name: str
    kind: str
    level: int
    conv: Optional[ConvSpec] = None
    gdc: Optional[GDCConfig] = None


def layer_plan(cfg: UGDCConfig) -> List[Layer]:
    """Every parameterised layer in execution order"""
    plan = []

    def stage(name: str, level: int, c_in: int, c_out: int):
        plan.append(Layer(f'{name}.conv1', 'conv', level, conv=ConvSpec.same(3, c_in, c_out)))
        if name in cfg.gdc_stages:
            plan.append(Layer(f'{name}.gdc', 'gdc', level, gdc=cfg.stage_gdc(name)))
        else:
            plan.append(Layer(f'{name}.conv2', 'conv', level, conv=ConvSpec.same(3, c_out, c_out)))

    c_in = cfg.in_channels
    for level in range(cfg.depth):
        stage(f'enc{level}', level, c_in, cfg.channels(level))
        c_in = cfg.channels(level)
    stage('mid', cfg.depth, c_in, cfg.channels(cfg.depth))
    for level in reversed(range(cfg.depth)):
        width = cfg.channels(level)
        plan.append(Layer(f'dec{level}.up', 'conv', level,
                          conv=ConvSpec.same(3, cfg.channels(level + 1), width)))
        stage(f'dec{level}', level, 2 * width, width)
    plan.append(Layer('head', 'conv', 0, conv=ConvSpec.same(1, cfg.channels(0), cfg.out_channels)))
    return plan


def parameter_names(cfg: UGDCConfig) -> List[str]:
    names = []
    for layer in layer_plan(cfg):
        if layer.kind == 'gdc':
            names.extend(f'{layer.name}.{n}' for n in GDC_PARAM_NAMES)
        else:
            names.extend((f'{layer.name}.weight', f'{layer.name}.bias'))
    return names


class Model:
    """A built UGDC network with named, ordered parameters"""

    def __init__(self, role: Role, config: UGDCConfig, parameters: 'OrderedDict[str, Tensor]',
                 em_mode: Optional[EMMode] = None):
        self.role = Role(role)
        self.config = config
        self.parameters = parameters
        self.em_mode = EMMode(em_mode) if em_mode is not None else None
        self.frozen = False
        self.plan = layer_plan(config)

    def __repr__(self):
        mode = f", em_mode={self.em_mode.value}" if self.em_mode else ""
        return (f"Model(role={self.role.value}{mode}, depth={self.config.depth}, "
                f"gdc_stages={list(self.config.gdc_stages)}, params={param_count(self)}, frozen={self.frozen})")

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return list(self.parameters.items())

    def freeze(self):
        for p in self.parameters.values():
            p.requires_grad = False
            p.grad = None
        self.frozen = True

    def unfreeze(self):
        for p in self.parameters.values():
            p.requires_grad = True
        self.frozen = False

    def zero_grad(self):
        for p in self.parameters.values():
            p.grad = None

    def gdc_params(self, layer: str) -> GDCParams:
        prefix = f'{layer}.'
        return GDCParams(
            key_weight=self.parameters[prefix + 'key.weight'],
            key_bias=self.parameters[prefix + 'key.bias'],
            query_weight=self.parameters[prefix + 'query.weight'],
            query_bias=self.parameters[prefix + 'query.bias'],
            out_weight=self.parameters[prefix + 'out.weight'],
            out_bias=self.parameters[prefix + 'out.bias'],
            diff=self.parameters[prefix + 'diff'],
        )


def build(role: Role, config: UGDCConfig, rng: Rng, em_mode: Optional[EMMode] = None,
          image_size: Optional[Tuple[int, int]] = None, zero_head: Optional[bool] = None) -> Model:
    """
    Builds a model with deterministic initialisation

    Every layer draws from rng.spawn(layer name), so parameters depend only on the
    seed and the layer's name. A residual-mode EM starts with a zero head so its
    residual is 0 and H = H' at initialisation.
    """
    role = Role(role)
    if role == Role.EM and em_mode is None:
        em_mode = EMMode.RESIDUAL
    if image_size is not None:
        config.check_image_size(*image_size, error=ConfigError)
    if zero_head is None:
        zero_head = role == Role.EM and EMMode(em_mode) == EMMode.RESIDUAL

    parameters = OrderedDict()
    for layer in layer_plan(config):
        layer_rng = rng.spawn(layer.name)
        if layer.kind == 'gdc':
            for name, tensor in init_gdc_params(layer.gdc, layer_rng).named():
                tensor.name = f'{layer.name}.{name}'
                parameters[tensor.name] = tensor
            continue
        if layer.name == 'head' and zero_head:
            spec = layer.conv
            weight = zeros((spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w), requires_grad=True)
        else:
            weight = conv_weight(layer.conv, layer_rng)
        weight.name = f'{layer.name}.weight'
        bias = conv_bias(layer.conv, name=f'{layer.name}.bias')
        parameters[weight.name] = weight
        parameters[bias.name] = bias

    return Model(role, config, parameters, em_mode=em_mode if role == Role.EM else None)


def _conv(m: Model, layer: str, x: Tensor, spec: ConvSpec) -> Tensor:
    return conv2d(x, m.parameters[f'{layer}.weight'], m.parameters[f'{layer}.bias'], spec)


def _stage(m: Model, layers: Dict[str, Layer], name: str, x: Tensor) -> Tensor:
    slope = m.config.leaky_slope
    first = layers[f'{name}.conv1']
    h = leaky_relu(_conv(m, first.name, x, first.conv), slope)
    if f'{name}.gdc' in layers:
        layer = layers[f'{name}.gdc']
        return leaky_relu(gdc_forward(h, m.gdc_params(layer.name), layer.gdc), slope)
    second = layers[f'{name}.conv2']
    return leaky_relu(_conv(m, second.name, h, second.conv), slope)


def forward_raw(m: Model, x: Tensor) -> Tensor:
    """Network output before the final squashing"""
    cfg = m.config
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"Model expects [N,{cfg.in_channels},H,W] input, got {list(x.shape)}")
    cfg.check_image_size(x.shape[2], x.shape[3])
    layers = {layer.name: layer for layer in m.plan}
    slope = cfg.leaky_slope

    skips = []
    h = x
    for level in range(cfg.depth):
        h = _stage(m, layers, f'enc{level}', h)
        skips.append(h)
        h = downsample2x(h)
    h = _stage(m, layers, 'mid', h)
    for level in reversed(range(cfg.depth)):
        up = layers[f'dec{level}.up']
        h = leaky_relu(_conv(m, up.name, upsample2x(h), up.conv), slope)
        h = _stage(m, layers, f'dec{level}', concat_channels([skips[level], h]))
    return _conv(m, 'head', h, layers['head'].conv)


def forward(m: Model, x: Tensor) -> Tensor:
    """Same-shape output squashed into [0,1] by a sigmoid (TM -> PL, PM -> H')"""
    return sigmoid(forward_raw(m, x))


def em_residual(em: Model, h_prime: Tensor) -> Tensor:
    """Residual head of a residual-mode EM, bounded to [-1,1] by tanh"""
    return tanh(forward_raw(em, h_prime))


def em_apply(em: Model, h_prime: Tensor, return_residual: bool = False):
    """
    EM refinement of the coarse prediction H'

    direct:   H = EM(H')
    residual: H = clamp(H' - residual, 0, 1), residual = tanh(EM_raw(H'))
    """
    if em.em_mode == EMMode.DIRECT:
        out = forward(em, h_prime)
        residual = None
    else:
        residual = em_residual(em, h_prime)
        out = clamp(sub(h_prime, residual), 0.0, 1.0)
    if return_residual:
        return out, residual
    return out


def param_count(m: Model) -> int:
    """Counted from the layer plan: k^2*C_in*C_out + C_out per conv, GDC blocks in closed form"""
    return sum(gdc_param_count(layer.gdc) if layer.kind == 'gdc' else conv_param_count(layer.conv)
               for layer in m.plan)


def flops(m: Model, height: int, width: int) -> int:
    """
    Multiply-accumulates per sample at the given input size

    Convolutions count H'*W'*C_in*C_out*k^2; GDC stages use the closed form in
    lib/gdc.py. Pooling, upsampling and activations are not counted.
    """
    total = 0
    for layer in m.plan:
        scale = 2 ** layer.level
        h, w = height // scale, width // scale
        if layer.kind == 'gdc':
            total += gdc_flops(layer.gdc, h, w)
        else:
            total += layer.conv.macs(h, w)
    return total
