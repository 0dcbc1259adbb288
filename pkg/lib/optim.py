#!/usr/bin/env python3
"""
AdamW with decoupled weight decay

Per step t, for each parameter p with gradient g:
    p <- p * (1 - lr * wd)
    m <- b1 * m + (1 - b1) * g
    v <- b2 * v + (1 - b2) * g^2
    p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
"""

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 4e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas must lie in [0,1): {self.beta1}, {self.beta2}")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError(f"eps must be positive and weight_decay non-negative: {self.eps}, {self.weight_decay}")


@dataclass
class OptimizerState:
    """First/second moments keyed by parameter name plus the step counter"""
    step: int = 0
    first: Dict[str, np.ndarray] = field(default_factory=dict)
    second: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_parameters(cls, params: List[Tuple[str, Tensor]]) -> 'OptimizerState':
        state = cls()
        for name, p in params:
            state.first[name] = np.zeros_like(p.data)
            state.second[name] = np.zeros_like(p.data)
        return state

    def check(self, params: List[Tuple[str, Tensor]]):
        for name, p in params:
            for moments in (self.first, self.second):
                if name in moments and moments[name].shape != p.shape:
                    raise ContractError(
                        f"Moment shape {list(moments[name].shape)} does not match parameter "
                        f"'{name}' {list(p.shape)}"
                    )


def optimizer_step(params: List[Tuple[str, Tensor]], state: OptimizerState, cfg: AdamWConfig):
    """
    One AdamW update of every trainable parameter

    Parameters with requires_grad=False (frozen) are left untouched; a trainable
    parameter without a gradient is a contract error.
    """
    trainable = [(name, p) for name, p in params if p.requires_grad]
    missing = [name for name, p in trainable if p.grad is None]
    if missing:
        raise ContractError(f"optimizer_step: no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    state.check(trainable)

    state.step += 1
    t = state.step
    correction1 = 1.0 - cfg.beta1 ** t
    correction2 = 1.0 - cfg.beta2 ** t

    for name, p in trainable:
        g = p.grad
        m = state.first.get(name)
        v = state.second.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
        state.first[name] = m.astype(p.data.dtype)
        state.second[name] = v.astype(p.data.dtype)

        update = (m / correction1) / (np.sqrt(v / correction2) + cfg.eps)
        decayed = p.data * (1.0 - cfg.lr * cfg.weight_decay)
        p.data = np.ascontiguousarray((decayed - cfg.lr * update).astype(p.data.dtype))
