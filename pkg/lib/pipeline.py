#!/usr/bin/env python3
"""
TroubleMaker Learning: two-step training of the enhancement pipeline

Step 1 trains TM to map a normal-light image I to its low-light counterpart L on a
small paired set. Step 2 freezes TM and uses its output PL = TM(I) as a pseudo
low-light input: PM learns PL -> I, then (with PM frozen as well) EM learns to
refine H' = PM(PL) towards I. Step 2 only ever reads normal-light images.

Usage:
    tm, history = train_tm(paired, train_cfg, model_cfg, Rng(seed))
    tm.freeze()
    result = train_pm_em(tm, normals, train_cfg, model_cfg, Rng(seed))
    enhanced, residual = enhance(result.pm, result.em, read_image('low.ppm'))
"""

import csv
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .checkpoint import save_checkpoint
from .errors import ConfigError, ContractError, DomainError, ShapeError, TMLError
from .image_io import (
    ImageBuffer, crop, from_tensor, gray_image, list_images, read_image, reflect_pad,
    to_tensor, write_image,
)
from .metrics import psnr, ssim
from .optim import AdamWConfig, OptimizerState, optimizer_step
from .tensor import Function, Graph, Rng, Tensor, backward
from .ugdc import EMMode, Model, Role, UGDCConfig, build, em_apply, forward
from .utils import get_output_path


@dataclass(frozen=True)
class TrainConfig:
    """Training schedule; lr and epochs follow the published setup, batch is desk scale"""
    lr: float = 4e-5
    batch_size: int = 4
    epochs_tm: int = 15
    epochs_pm: int = 15
    epochs_em: int = 30
    seed: int = 0
    loss: str = 'smooth_l1'
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    image_size: Tuple[int, int] = (64, 64)
    em_mode: str = 'residual'
    use_em: bool = True
    workers: int = 2

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        for name in ('epochs_tm', 'epochs_pm', 'epochs_em'):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.loss != 'smooth_l1':
            raise ConfigError(f"Unsupported loss '{self.loss}', only smooth_l1 is implemented")
        if self.em_mode not in {m.value for m in EMMode}:
            raise ConfigError(f"em_mode must be 'direct' or 'residual', got '{self.em_mode}'")
        if self.workers < 1:
            raise ConfigError(f"workers must be at least 1, got {self.workers}")

    def adamw(self) -> AdamWConfig:
        return AdamWConfig(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                           weight_decay=self.weight_decay)


# Published full-scale values, echoed into every resolved config
REFERENCE_DEFAULTS = {
    'lr': 4e-5,
    'batch_size': 8,
    'epochs_em': 30,
    'image_size': [400, 640],
    'optimizer': 'adamw',
    'loss': 'smooth_l1',
}


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

class SmoothL1(Function):
    """mean of 0.5 d^2 (|d| < 1) or |d| - 0.5, with d = target - pred"""

    def forward(self, pred, target):
        if pred.shape != target.shape:
            raise ShapeError(f"smooth_l1: shapes differ {list(pred.shape)} vs {list(target.shape)}")
        if pred.size == 0:
            raise DomainError("smooth_l1 of an empty tensor")
        d = target - pred
        self.d = d
        self.n = d.size
        ad = np.abs(d)
        per_element = np.where(ad < 1, 0.5 * d * d, ad - 0.5)
        return np.asarray(per_element.sum(dtype=np.float64) / self.n, dtype=pred.dtype)

    def backward(self, g):
        slope = np.clip(self.d, -1.0, 1.0) * (g / self.n)
        return -slope, slope


def smooth_l1(pred: Tensor, target: Tensor) -> Tensor:
    return SmoothL1.apply(pred, target)


# ---------------------------------------------------------------------------
# Synthetic degradation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DarkenerRanges:
    gamma: Tuple[float, float] = (1.5, 3.5)
    gain: Tuple[float, float] = (0.1, 0.5)
    noise: Tuple[float, float] = (0.0, 0.03)

    def __post_init__(self):
        for name in ('gamma', 'gain', 'noise'):
            low, high = getattr(self, name)
            if low > high:
                raise ConfigError(f"Darkener {name} range is empty: [{low}, {high}]")
        if self.gain[0] <= 0 or self.noise[0] < 0 or self.gamma[0] <= 0:
            raise ConfigError(f"Darkener ranges must be positive (noise non-negative): {self}")


@dataclass(frozen=True)
class SyntheticDarkener:
    """low = clamp(gain * img^gamma + N(0, sigma^2), 0, 1)"""
    gamma: float
    gain: float
    sigma: float
    seed: int

    @classmethod
    def sample(cls, rng: Rng, ranges: DarkenerRanges = DarkenerRanges()) -> 'SyntheticDarkener':
        gamma = float(rng.uniform((), *ranges.gamma))
        gain = float(rng.uniform((), *ranges.gain))
        sigma = float(rng.uniform((), *ranges.noise))
        seed = int(rng.integers(0, 2 ** 63))
        return cls(gamma=gamma, gain=gain, sigma=sigma, seed=seed)


def darken(img: ImageBuffer, d: SyntheticDarkener, rng: Optional[Rng] = None, logger=None,
           label: str = '') -> ImageBuffer:
    rng = rng or Rng(d.seed)
    low = d.gain * np.power(img.pixels.astype(np.float64), d.gamma)
    if d.sigma > 0:
        low = low + rng.normal(img.pixels.shape, 0.0, d.sigma)
    if logger:
        logger.debug(f"DARKEN: {label} | gamma={d.gamma:.4f} gain={d.gain:.4f} sigma={d.sigma:.5f} seed={d.seed}")
    return ImageBuffer(np.clip(low, 0.0, 1.0), bit_depth=img.bit_depth, maxval=img.maxval)


def synthetic_scene(rng: Rng, size: Tuple[int, int]) -> ImageBuffer:
    """Smooth colour gradient with a few flat rectangles and discs; values in [0.15, 1]"""
    height, width = size
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, height), np.linspace(0.0, 1.0, width), indexing='ij')
    base = rng.uniform((3,), 0.35, 0.9)
    tilt = rng.uniform((3, 2), -0.3, 0.3)
    pixels = base[:, None, None] + tilt[:, 0, None, None] * yy + tilt[:, 1, None, None] * xx
    pixels = np.ascontiguousarray(pixels.transpose(1, 2, 0))

    for _ in range(int(rng.integers(2, 6))):
        colour = rng.uniform((3,), 0.15, 1.0)
        y0, x0 = rng.integers(0, height), rng.integers(0, width)
        h, w = rng.integers(height // 8 + 1, height // 2 + 2), rng.integers(width // 8 + 1, width // 2 + 2)
        pixels[y0:y0 + h, x0:x0 + w] = colour
    for _ in range(int(rng.integers(1, 4))):
        colour = rng.uniform((3,), 0.15, 1.0)
        cy, cx = rng.uniform((2,), 0.0, 1.0)
        radius = float(rng.uniform((), 0.08, 0.25))
        pixels[(yy - cy) ** 2 + (xx - cx) ** 2 < radius ** 2] = colour
    return ImageBuffer(np.clip(pixels, 0.15, 1.0))


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSpec:
    """Where training images come from: paired-dir | normal-dir | synthetic"""
    mode: str = 'synthetic'
    normal_dir: str = ''
    low_dir: str = ''
    count: int = 50
    image_size: Tuple[int, int] = (64, 64)
    ranges: DarkenerRanges = field(default_factory=DarkenerRanges)
    tag: str = 'tm'

    def __post_init__(self):
        if self.mode not in ('paired-dir', 'normal-dir', 'synthetic'):
            raise ConfigError(f"Unknown dataset mode '{self.mode}'")
        if self.mode == 'paired-dir' and not (self.normal_dir and self.low_dir):
            raise ConfigError("paired-dir datasets need both normal_dir and low_dir")
        if self.mode == 'normal-dir' and not self.normal_dir:
            raise ConfigError("normal-dir datasets need normal_dir")
        if self.mode == 'synthetic' and self.count < 0:
            raise ConfigError(f"Synthetic count must be non-negative, got {self.count}")


class AccessLog:
    """Records every image the loaders open, tagged 'normal' or 'low'"""

    def __init__(self):
        self._lock = threading.Lock()
        self.entries: List[Tuple[str, str]] = []

    def record(self, kind: str, path: str):
        with self._lock:
            self.entries.append((kind, path))

    def opened(self, kind: str) -> List[str]:
        with self._lock:
            return [path for k, path in self.entries if k == kind]


class Dataset:
    """Indexable source of (input, target) images; target is None for unpaired data"""
    paired = True

    def __len__(self) -> int:
        raise NotImplementedError

    def load(self, index: int) -> Tuple[ImageBuffer, Optional[ImageBuffer]]:
        raise NotImplementedError


class PairedDirDataset(Dataset):
    """normal_dir/x.ppm is the input, low_dir/x.ppm its low-light target"""

    def __init__(self, normal_dir, low_dir, access_log: Optional[AccessLog] = None):
        self.normals = list_images(normal_dir)
        low_dir = Path(low_dir)
        lows = {p.name for p in list_images(low_dir)}
        missing = [p.name for p in self.normals if p.name not in lows]
        extra = sorted(lows - {p.name for p in self.normals})
        if missing or extra:
            raise ConfigError(
                f"Paired directories do not correspond 1:1 "
                f"(missing low: {missing[:3]}, unmatched low: {extra[:3]})"
            )
        self.lows = [low_dir / p.name for p in self.normals]
        self.access_log = access_log or AccessLog()

    def __len__(self):
        return len(self.normals)

    def load(self, index):
        self.access_log.record('normal', str(self.normals[index]))
        normal = read_image(self.normals[index])
        self.access_log.record('low', str(self.lows[index]))
        return normal, read_image(self.lows[index])


class NormalDirDataset(Dataset):
    paired = False

    def __init__(self, normal_dir, access_log: Optional[AccessLog] = None):
        self.normals = list_images(normal_dir)
        self.access_log = access_log or AccessLog()

    def __len__(self):
        return len(self.normals)

    def load(self, index):
        self.access_log.record('normal', str(self.normals[index]))
        return read_image(self.normals[index]), None


class SyntheticDataset(Dataset):
    """
    In-memory scenes; paired=True also darkens each one

    Scene i comes from rng.spawn(f'{tag}-scene-{i}') and its darkener from
    rng.spawn(f'{tag}-darken-{i}'), so any item is re-derivable from the seed.
    """

    def __init__(self, spec: DatasetSpec, rng: Rng, paired: bool = True,
                 access_log: Optional[AccessLog] = None, logger=None):
        self.spec = spec
        self.rng = rng
        self.paired = paired
        self.access_log = access_log or AccessLog()
        self.logger = logger

    def __len__(self):
        return self.spec.count

    def darkener(self, index: int) -> SyntheticDarkener:
        return SyntheticDarkener.sample(self.rng.spawn(f'{self.spec.tag}-darken-{index}'), self.spec.ranges)

    def load(self, index):
        label = f'synthetic:{self.spec.tag}/{index}'
        self.access_log.record('normal', label)
        normal = synthetic_scene(self.rng.spawn(f'{self.spec.tag}-scene-{index}'), self.spec.image_size)
        if not self.paired:
            return normal, None
        self.access_log.record('low', label)
        return normal, darken(normal, self.darkener(index), logger=self.logger, label=label)


def open_dataset(spec: DatasetSpec, rng: Rng, paired: bool, access_log: Optional[AccessLog] = None,
                 logger=None) -> Dataset:
    """Builds the dataset for spec; paired=False never touches low-light data"""
    if spec.mode == 'synthetic':
        dataset = SyntheticDataset(spec, rng.spawn('data'), paired=paired, access_log=access_log, logger=logger)
    elif paired:
        if spec.mode != 'paired-dir':
            raise ConfigError(f"Step 1 needs paired data, got dataset mode '{spec.mode}'")
        dataset = PairedDirDataset(spec.normal_dir, spec.low_dir, access_log=access_log)
    else:
        dataset = NormalDirDataset(spec.normal_dir, access_log=access_log)
    if len(dataset) == 0:
        raise ConfigError(f"Dataset is empty (mode={spec.mode}, tag={spec.tag})")
    return dataset


def iterate_batches(dataset: Dataset, batch_size: int, rng: Rng,
                    executor: ThreadPoolExecutor) -> Iterator[Tuple[Tensor, Optional[Tensor]]]:
    """Seeded shuffle, then batches decoded on worker threads in index order"""
    order = rng.permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        indices = [int(i) for i in order[start:start + batch_size]]
        samples = list(executor.map(dataset.load, indices))
        inputs = to_tensor([s[0] for s in samples])
        targets = to_tensor([s[1] for s in samples]) if samples[0][1] is not None else None
        yield inputs, targets


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class PhaseRecord:
    phase: str
    epoch: int
    loss: float

    def line(self) -> str:
        return f"{self.phase},{self.epoch},{self.loss:.9g}"


@dataclass
class PipelineResult:
    pm: Model
    em: Optional[Model]
    history: List[PhaseRecord]
    optimizers: Dict[str, OptimizerState] = field(default_factory=dict)


def run_phase(phase: str, model: Model, dataset: Dataset, predict: Callable[[Tensor], Tensor],
              target_of: Callable[[Tensor, Optional[Tensor]], Tensor], epochs: int, cfg: TrainConfig,
              rng: Rng, log_file=None, logger=None, progress: bool = False):
    """
    Generic epoch loop: loss = smooth_l1(predict(x), target_of(x, y)), AdamW on model

    Returns the optimizer state and one PhaseRecord per epoch.
    """
    state = OptimizerState.for_parameters(model.named_parameters())
    adamw = cfg.adamw()
    history = []
    shuffle = rng.spawn(f'shuffle-{phase}')

    with ThreadPoolExecutor(max_workers=cfg.workers) as executor:
        with tqdm(total=epochs, desc=f"Training {phase}", unit="epoch", disable=not progress) as pbar:
            for epoch in range(1, epochs + 1):
                total, seen = 0.0, 0
                for x, y in iterate_batches(dataset, cfg.batch_size, shuffle, executor):
                    with Graph():
                        loss = smooth_l1(predict(x), target_of(x, y))
                        backward(loss)
                    optimizer_step(model.named_parameters(), state, adamw)
                    model.zero_grad()
                    total += loss.item() * x.shape[0]
                    seen += x.shape[0]
                epoch_loss = total / seen
                if not math.isfinite(epoch_loss):
                    raise DomainError(f"{phase} loss became non-finite at epoch {epoch}")
                record = PhaseRecord(phase, epoch, epoch_loss)
                history.append(record)
                if log_file is not None:
                    log_file.write(record.line() + '\n')
                    log_file.flush()
                if logger:
                    logger.info(f"EPOCH_DONE: {phase} epoch={epoch} loss={epoch_loss:.6f} samples={seen}")
                pbar.set_postfix(loss=f"{epoch_loss:.5f}")
                pbar.update(1)
    return state, history


def _check_image_size(model_cfg: UGDCConfig, cfg: TrainConfig):
    model_cfg.check_image_size(*cfg.image_size, error=ConfigError)


def train_tm(data: Dataset, cfg: TrainConfig, model_cfg: UGDCConfig, rng: Rng, log_file=None,
             checkpoint_path=None, logger=None, progress: bool = False) -> Tuple[Model, List[PhaseRecord]]:
    """Step 1: TM learns normal -> low on paired data"""
    if len(data) == 0:
        raise ConfigError("train_tm: paired dataset is empty")
    if not data.paired:
        raise ConfigError("train_tm needs paired data")
    _check_image_size(model_cfg, cfg)

    tm = build(Role.TM, model_cfg, rng.spawn('tm-init'))
    if logger:
        logger.info(f"TRAIN_START: TM | pairs={len(data)} epochs={cfg.epochs_tm} {tm!r}")
    state, history = run_phase(
        'tm', tm, data, lambda x: forward(tm, x), lambda x, y: y, cfg.epochs_tm, cfg, rng,
        log_file=log_file, logger=logger, progress=progress,
    )
    if checkpoint_path:
        save_checkpoint(checkpoint_path, tm, state, logger=logger)
    return tm, history


def train_pm_em(tm: Model, normals: Dataset, cfg: TrainConfig, pm_cfg: UGDCConfig,
                em_cfg: Optional[UGDCConfig], rng: Rng, log_file=None, checkpoint_dir=None,
                logger=None, progress: bool = False) -> PipelineResult:
    """
    Step 2: PM then EM trained from normal-light images only, in sequence

    TM must already be frozen. PM is frozen before the EM phase starts, so EM sees
    H' from a fixed PM. With cfg.use_em False (or em_cfg None) only PM is trained.
    """
    if not tm.frozen:
        raise ContractError("train_pm_em needs a frozen troublemaker model; call tm.freeze() first")
    if len(normals) == 0:
        raise ConfigError("train_pm_em: normal-light dataset is empty")
    _check_image_size(pm_cfg, cfg)

    pm = build(Role.PM, pm_cfg, rng.spawn('pm-init'))
    if logger:
        logger.info(f"TRAIN_START: PM | normals={len(normals)} epochs={cfg.epochs_pm} {pm!r}")
    pm_state, history = run_phase(
        'pm', pm, normals, lambda x: forward(pm, forward(tm, x)), lambda x, y: x, cfg.epochs_pm, cfg, rng,
        log_file=log_file, logger=logger, progress=progress,
    )
    pm.freeze()
    result = PipelineResult(pm=pm, em=None, history=history, optimizers={'pm': pm_state})
    if checkpoint_dir:
        save_checkpoint(Path(checkpoint_dir) / 'pm.tmlc', pm, pm_state, logger=logger)

    if cfg.use_em and em_cfg is not None:
        _check_image_size(em_cfg, cfg)
        em = build(Role.EM, em_cfg, rng.spawn('em-init'), em_mode=EMMode(cfg.em_mode))
        if logger:
            logger.info(f"TRAIN_START: EM | normals={len(normals)} epochs={cfg.epochs_em} {em!r}")
        em_state, em_history = run_phase(
            'em', em, normals, lambda x: em_apply(em, forward(pm, forward(tm, x))), lambda x, y: x,
            cfg.epochs_em, cfg, rng, log_file=log_file, logger=logger, progress=progress,
        )
        em.freeze()
        result.em = em
        result.history.extend(em_history)
        result.optimizers['em'] = em_state
        if checkpoint_dir:
            save_checkpoint(Path(checkpoint_dir) / 'em.tmlc', em, em_state, logger=logger)
    return result


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def enhance(pm: Model, em: Optional[Model], low: ImageBuffer,
            with_residual: bool = False) -> Tuple[ImageBuffer, Optional[ImageBuffer]]:
    """
    H = em_apply(EM, PM(low)) clamped to [0,1]; PM output alone when em is None

    Images whose sides are not multiples of 2^depth are reflect-padded on the
    bottom/right and cropped back afterwards. The residual map is |residual|
    averaged over channels and divided by its maximum.
    """
    depth = max(pm.config.depth, em.config.depth if em else 0)
    padded, size = reflect_pad(low, 2 ** depth)
    x = to_tensor([padded])
    h_prime = forward(pm, x)
    residual = None
    if em is None:
        out = h_prime
    else:
        out, residual = em_apply(em, h_prime, return_residual=True)
    enhanced = crop(from_tensor(out)[0], size)

    residual_map = None
    if with_residual and residual is not None:
        magnitude = np.abs(residual.numpy()[0]).mean(axis=0)[:size[0], :size[1]]
        peak = magnitude.max()
        residual_map = gray_image(magnitude / peak if peak > 0 else magnitude)
    return enhanced, residual_map


def enhance_worker(pm: Model, em: Optional[Model], input_path, output_path, residual_path=None,
                   logger=None) -> Dict:
    """Thread-safe worker enhancing one image file"""
    result = {
        'input_path': str(input_path),
        'output_path': str(output_path),
        'success': False,
        'error': None,
        'duration': 0.0,
    }
    start = time.perf_counter()
    try:
        low = read_image(input_path)
        enhanced, residual = enhance(pm, em, low, with_residual=residual_path is not None)
        write_image(output_path, enhanced)
        if residual_path is not None and residual is not None:
            write_image(residual_path, residual)
        result['success'] = True
        result['mean_in'] = low.mean()
        result['mean_out'] = enhanced.mean()
    except TMLError as e:
        result['error'] = str(e)
    result['duration'] = time.perf_counter() - start
    if logger:
        if result['success']:
            logger.info(
                f"ENHANCED: {input_path} -> {output_path} | mean {result['mean_in']:.4f} -> "
                f"{result['mean_out']:.4f} | {result['duration']:.2f}s"
            )
        else:
            logger.error(f"ENHANCE_FAILED: {input_path} | Error: {result['error']}")
    return result


def enhance_paths(pm: Model, em: Optional[Model], inputs: Sequence[Path], out_dir, residual_dir=None,
                  workers: int = 2, logger=None, progress: bool = True) -> List[Dict]:
    """Enhances many files concurrently; results come back in input order"""
    out_dir = Path(out_dir)
    results = [None] * len(inputs)
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = {}
        for i, path in enumerate(inputs):
            path = Path(path)
            residual_path = get_output_path(path, residual_dir) if residual_dir else None
            output_path = get_output_path(path, out_dir)
            futures[executor.submit(enhance_worker, pm, em, path, output_path, residual_path, logger)] = i
        with tqdm(total=len(futures), desc="Enhancing", unit="img", disable=not progress) as pbar:
            for future in as_completed(futures):
                results[futures[future]] = future.result()
                pbar.update(1)
    return results


@dataclass
class Evaluation:
    psnr_low: float
    psnr_out: float
    ssim_low: float
    ssim_out: float
    count: int

    @property
    def psnr_gain(self) -> float:
        return self.psnr_out - self.psnr_low


def evaluate(pm: Model, em: Optional[Model], pairs: Dataset) -> Evaluation:
    """Mean PSNR/SSIM of the low inputs and of the enhanced outputs against the normals"""
    scores = []
    for i in range(len(pairs)):
        normal, low = pairs.load(i)
        enhanced, _ = enhance(pm, em, low)
        scores.append((psnr(low, normal), psnr(enhanced, normal), ssim(low, normal), ssim(enhanced, normal)))
    means = np.mean(np.asarray(scores), axis=0)
    return Evaluation(*(float(v) for v in means), count=len(scores))


# ---------------------------------------------------------------------------
# Synthetic corpus on disk
# ---------------------------------------------------------------------------

CORPUS_SPLITS = ('train_pairs', 'normals', 'test')


def generate_corpus(out_dir, counts: Dict[str, int], image_size: Tuple[int, int], rng: Rng,
                    ranges: DarkenerRanges = DarkenerRanges(), tm: Optional[Model] = None,
                    logger=None, progress: bool = True) -> Path:
    """
    Writes the desk corpus and its manifest

    train_pairs/{normal,low}/ and test/{normal,low}/ hold darkened pairs,
    normals/ holds normal-light images only. With a TM model, pseudo/ receives
    TM's prediction for every image in normals/. manifest.csv lists each file with
    the darkener parameters that produced its low-light partner.
    """
    out_dir = Path(out_dir)
    manifest_path = out_dir / 'manifest.csv'
    os.makedirs(out_dir, exist_ok=True)
    total = sum(counts.get(split, 0) for split in CORPUS_SPLITS)

    with open(manifest_path, 'w', newline='', encoding='utf-8') as f, \
            tqdm(total=total, desc="Generating corpus", unit="img", disable=not progress) as pbar:
        writer = csv.writer(f)
        writer.writerow(['split', 'file', 'gamma', 'gain', 'sigma', 'seed'])
        for split in CORPUS_SPLITS:
            spec = DatasetSpec(mode='synthetic', count=counts.get(split, 0), image_size=image_size,
                               ranges=ranges, tag=split)
            dataset = SyntheticDataset(spec, rng.spawn('data'), paired=split != 'normals', logger=logger)
            for i in range(len(dataset)):
                name = f"{split}_{i:04d}.ppm"
                normal, low = dataset.load(i)
                if low is None:
                    write_image(out_dir / split / name, normal)
                    if tm is not None:
                        pseudo = from_tensor(forward(tm, to_tensor([normal])))[0]
                        write_image(out_dir / 'pseudo' / name, pseudo)
                    writer.writerow([split, name, '', '', '', ''])
                else:
                    write_image(out_dir / split / 'normal' / name, normal)
                    write_image(out_dir / split / 'low' / name, low)
                    d = dataset.darkener(i)
                    writer.writerow([split, name, f"{d.gamma:.6f}", f"{d.gain:.6f}", f"{d.sigma:.6f}", d.seed])
                pbar.update(1)
    if logger:
        logger.info(f"CORPUS_WRITTEN: {out_dir} | " + ", ".join(f"{s}={counts.get(s, 0)}" for s in CORPUS_SPLITS))
    return manifest_path
