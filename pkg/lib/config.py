#!/usr/bin/env python3
"""
Run configuration: TOML file, environment overrides, resolved echo

Precedence, lowest to highest: dataclass defaults, the TOML file, the
environment (a .env file is loaded by the CLI: TML_SEED, TML_DTYPE,
TML_LOG_LEVEL, TML_DEBUG), then command-line flags.

Sections: [run] [train] [model] [gdc] [data] [bench], plus an informational
[defaults] echo of the published full-scale values whose keys are checked but
whose values are ignored.
"""

import json
import os
import sys
if sys.version_info >= (3, 11):
    import tomllib
else:  # Python 3.10: API-identical backport
    import tomli as tomllib
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Optional, Tuple

from .bench import BenchConfig
from .errors import ConfigError, ShapeError
from .gdc import GDCConfig
from .pipeline import CORPUS_SPLITS, REFERENCE_DEFAULTS, DarkenerRanges, DatasetSpec, TrainConfig
from .ugdc import UGDCConfig

DTYPE_NAMES = ('float32', 'float64')
LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR')


@dataclass(frozen=True)
class RunSection:
    dtype: str = 'float32'
    log_level: str = 'INFO'
    debug: bool = False

    def __post_init__(self):
        if self.dtype not in DTYPE_NAMES:
            raise ConfigError(f"dtype must be one of {DTYPE_NAMES}, got '{self.dtype}'")
        if self.log_level.upper() not in LOG_LEVELS:
            raise ConfigError(f"log_level must be one of {LOG_LEVELS}, got '{self.log_level}'")


@dataclass(frozen=True)
class ModelSection:
    """Shared UGDC architecture plus the per-model GDC toggles"""
    depth: int = 3
    base_channels: int = 16
    gdc_stages: Tuple[str, ...] = ('mid',)
    leaky_slope: float = 0.2
    gdc_tm: bool = True
    gdc_pm: bool = True
    gdc_em: bool = True


@dataclass(frozen=True)
class GDCSection:
    """Block hyperparameters; channel counts follow the stage the block sits in"""
    grid: Tuple[int, int] = (8, 8)
    embed_dim: int = 32
    key_kernel: int = 1
    query_kernel: int = 3
    out_kernel: int = 1


@dataclass(frozen=True)
class DataSection:
    """Synthetic corpus sizes and darkener ranges, or an on-disk corpus"""
    mode: str = 'synthetic'
    corpus_dir: str = ''
    tm_pairs: int = 50
    normals: int = 200
    test_pairs: int = 10
    gamma: Tuple[float, float] = (1.5, 3.5)
    gain: Tuple[float, float] = (0.1, 0.5)
    noise: Tuple[float, float] = (0.0, 0.03)

    def __post_init__(self):
        if self.mode not in ('synthetic', 'dir'):
            raise ConfigError(f"data.mode must be 'synthetic' or 'dir', got '{self.mode}'")
        if self.mode == 'dir' and not self.corpus_dir:
            raise ConfigError("data.mode = 'dir' needs data.corpus_dir")
        for name in ('tm_pairs', 'normals', 'test_pairs'):
            if getattr(self, name) < 0:
                raise ConfigError(f"data.{name} must be non-negative")


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelSection = field(default_factory=ModelSection)
    gdc: GDCSection = field(default_factory=GDCSection)
    data: DataSection = field(default_factory=DataSection)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def model_config(self, role: str) -> UGDCConfig:
        """UGDCConfig of TM, PM or EM with that model's GDC toggle applied"""
        enabled = getattr(self.model, f'gdc_{role.lower()}')
        try:
            gdc = GDCConfig(grid=self.gdc.grid, embed_dim=self.gdc.embed_dim, key_kernel=self.gdc.key_kernel,
                            query_kernel=self.gdc.query_kernel, out_kernel=self.gdc.out_kernel)
        except ShapeError as e:
            raise ConfigError(f"Invalid [gdc] section: {e}")
        return UGDCConfig(depth=self.model.depth, base_channels=self.model.base_channels,
                          gdc_stages=tuple(self.model.gdc_stages) if enabled else (),
                          gdc=gdc, leaky_slope=self.model.leaky_slope)

    def darkener_ranges(self) -> DarkenerRanges:
        return DarkenerRanges(gamma=self.data.gamma, gain=self.data.gain, noise=self.data.noise)

    def corpus_counts(self) -> Dict[str, int]:
        return {'train_pairs': self.data.tm_pairs, 'normals': self.data.normals, 'test': self.data.test_pairs}

    def dataset_spec(self, split: str) -> DatasetSpec:
        """
        Source of one corpus split: in-memory synthetic scenes, or the layout
        generate_corpus writes under data.corpus_dir
        """
        if split not in CORPUS_SPLITS:
            raise ConfigError(f"Unknown corpus split '{split}'; use one of {CORPUS_SPLITS}")
        size = self.train.image_size
        if self.data.mode == 'synthetic':
            return DatasetSpec(mode='synthetic', count=self.corpus_counts()[split], image_size=size,
                               ranges=self.darkener_ranges(), tag=split)
        root = Path(self.data.corpus_dir)
        if split == 'normals':
            return DatasetSpec(mode='normal-dir', normal_dir=str(root / split), image_size=size, tag=split)
        return DatasetSpec(mode='paired-dir', normal_dir=str(root / split / 'normal'),
                           low_dir=str(root / split / 'low'), image_size=size, tag=split)

    def validate(self):
        """Cross-section checks that single dataclasses cannot make"""
        for role in ('tm', 'pm', 'em'):
            self.model_config(role).check_image_size(*self.train.image_size, error=ConfigError)


SECTIONS = {f.name: f for f in fields(RunConfig)}

# Ablation settings: GDC toggle per model, EM presence and mode
ABLATION_SETTINGS: Dict[str, Dict] = {
    'A': dict(gdc_tm=False, gdc_pm=False, gdc_em=False, use_em=False, em_mode='residual'),
    'B': dict(gdc_tm=False, gdc_pm=False, gdc_em=False, use_em=True, em_mode='residual'),
    'C': dict(gdc_tm=True, gdc_pm=False, gdc_em=False, use_em=True, em_mode='residual'),
    'D': dict(gdc_tm=False, gdc_pm=True, gdc_em=False, use_em=True, em_mode='residual'),
    'E': dict(gdc_tm=False, gdc_pm=False, gdc_em=True, use_em=True, em_mode='residual'),
    'F': dict(gdc_tm=True, gdc_pm=True, gdc_em=True, use_em=True, em_mode='direct'),
    'G': dict(gdc_tm=True, gdc_pm=True, gdc_em=True, use_em=True, em_mode='residual'),
}


def apply_setting(cfg: RunConfig, letter: str) -> RunConfig:
    letter = letter.upper()
    if letter not in ABLATION_SETTINGS:
        raise ConfigError(f"Unknown ablation setting '{letter}'; choose from {''.join(ABLATION_SETTINGS)}")
    toggles = ABLATION_SETTINGS[letter]
    model = replace(cfg.model, **{k: v for k, v in toggles.items() if k.startswith('gdc_')})
    train = replace(cfg.train, use_em=toggles['use_em'], em_mode=toggles['em_mode'])
    return replace(cfg, model=model, train=train)


def _coerce(section: str, key: str, value, hint):
    """Checks value against a dataclass field annotation; lists become tuples"""
    where = f"{section}.{key}"
    origin = typing.get_origin(hint)
    if origin in (tuple, Tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list, got {type(value).__name__}")
        args = typing.get_args(hint)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(section, key, v, args[0]) for v in value)
        if len(value) != len(args):
            raise ConfigError(f"{where} must have {len(args)} entries, got {len(value)}")
        return tuple(_coerce(section, key, v, a) for v, a in zip(value, args))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported field type {hint}")


def _section(name: str, values: Dict, base):
    cls = type(base)
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls) if hints[f.name] in (int, float, bool, str)
             or typing.get_origin(hints[f.name]) in (tuple, Tuple)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"Unknown key(s) in [{name}]: {unknown}")
    updates = {key: _coerce(name, key, value, hints[key]) for key, value in values.items()}
    try:
        return replace(base, **updates)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid [{name}] section: {e}")


def from_dict(data: Dict, base: Optional[RunConfig] = None) -> RunConfig:
    cfg = base or RunConfig()
    unknown = sorted(set(data) - set(SECTIONS) - {'defaults'})
    if unknown:
        raise ConfigError(f"Unknown section(s): {unknown}")
    defaults = data.get('defaults', {})
    extra = sorted(set(defaults) - set(REFERENCE_DEFAULTS))
    if extra:
        raise ConfigError(f"Unknown key(s) in [defaults]: {extra}")
    updates = {}
    for name in SECTIONS:
        if name in data:
            if not isinstance(data[name], dict):
                raise ConfigError(f"[{name}] must be a table")
            updates[name] = _section(name, data[name], getattr(cfg, name))
    return replace(cfg, **updates)


def load_config(path=None, env: Optional[Dict[str, str]] = None) -> RunConfig:
    """Defaults, then the TOML file, then environment overrides"""
    cfg = RunConfig()
    if path:
        path = Path(path)
        try:
            with open(path, 'rb') as f:
                data = tomllib.load(f)
        except FileNotFoundError:
            raise ConfigError(f"Config file not found: {path}")
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"Cannot parse {path}: {e}")
        cfg = from_dict(data, cfg)
    return apply_env(cfg, os.environ if env is None else env)


def apply_env(cfg: RunConfig, env) -> RunConfig:
    run, train = cfg.run, cfg.train
    if env.get('TML_SEED'):
        try:
            train = replace(train, seed=int(env['TML_SEED']))
        except ValueError:
            raise ConfigError(f"TML_SEED must be an integer, got '{env['TML_SEED']}'")
    if env.get('TML_DTYPE'):
        run = replace(run, dtype=env['TML_DTYPE'])
    if env.get('TML_LOG_LEVEL'):
        run = replace(run, log_level=env['TML_LOG_LEVEL'].upper())
    if env.get('TML_DEBUG'):
        run = replace(run, debug=env['TML_DEBUG'].lower() in ('1', 'true', 'yes', 'on'))
    return replace(cfg, run=run, train=train)


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return '[' + ', '.join(_toml_value(v) for v in value) + ']'
    raise ConfigError(f"Cannot write {value!r} to TOML")


def to_toml(cfg: RunConfig, command: str = '') -> str:
    """Fully resolved config; from_dict(tomllib.loads(to_toml(cfg))) == cfg"""
    lines = []
    if command:
        lines.append(f"# replay: {command}")
    for name in SECTIONS:
        section = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in fields(section):
            lines.append(f"{f.name} = {_toml_value(getattr(section, f.name))}")
        lines.append('')
    lines.append('[defaults]')
    lines.extend(f"{key} = {_toml_value(value)}" for key, value in REFERENCE_DEFAULTS.items())
    return '\n'.join(lines) + '\n'


def write_resolved(cfg: RunConfig, out_dir, command: str = '') -> Path:
    path = Path(out_dir) / 'resolved_config.toml'
    os.makedirs(path.parent, exist_ok=True)
    path.write_text(to_toml(cfg, command), encoding='utf-8')
    return path
