#!/usr/bin/env python3
"""
TroubleMaker Learning tools: synthetic data, two-step training, low-light
enhancement, verification and complexity benchmarking from one command line

Every command resolves its configuration (defaults < --config TOML < .env /
environment < flags), writes it to resolved_config.toml next to its outputs
and logs to tml.log. Exit codes: 0 success, 1 failed verification or
processing error, 2 usage or configuration error.

Usage:
    python tml.py synth --config configs/desk.toml --out corpus/
    python tml.py train-tm --config configs/desk.toml --out runs/tm
    python tml.py train --config configs/desk.toml --checkpoint runs/tm/tm.tmlc --out runs/full
    python tml.py train --checkpoint runs/tm/tm.tmlc --setting A --out runs/setting_a
    python tml.py enhance --checkpoint runs/full --out enhanced/ --residual-dir maps/ corpus/test/low
    python tml.py metrics --pred-dir enhanced/ --ref-dir corpus/test/normal
    python tml.py check-grad
    python tml.py check-equiv
    python tml.py bench --out bench/ --check --model-report
    python tml.py ablate --settings ABCDEFG --out ablation/
"""

import os

# One BLAS/OpenMP thread; must be set before numpy is imported
for _var in ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS', 'MKL_NUM_THREADS'):
    os.environ.setdefault(_var, '1')

import sys
import time
import shlex
import argparse
from dataclasses import replace
from pathlib import Path

from colorama import Fore, Style, init
from dotenv import load_dotenv

from lib import bench as benchmark
from lib import tensor
from lib.checkpoint import checksum, load_checkpoint, parameter_bytes
from lib.config import apply_setting, load_config, write_resolved, ABLATION_SETTINGS
from lib.errors import CheckpointError, ConfigError, ConfigMismatchError, ContractError, TMLError
from lib.image_io import IMAGE_SUFFIXES, list_images, read_image
from lib.metrics import psnr, ssim
from lib.pipeline import (
    AccessLog, enhance_paths, evaluate, generate_corpus, open_dataset, train_pm_em, train_tm,
)
from lib.tensor import Rng
from lib.ugdc import Role
from lib.utils import (
    StripAnsiWriter, format_duration, format_file_size, format_ns,
    read_file_list, setup_logging,
)
from lib.verify import check_equivalence, check_gradients, conv_oracle_check

# Initialize colorama with forced colors for container support
init(autoreset=True, strip=False)

RESOLVED_CONFIG = 'resolved_config.toml'
TRAIN_LOG = 'train_log.csv'


class VerificationFailed(Exception):
    """A check ran to completion and found a violation (exit code 1)"""


def fail(message):
    print(f"{Fore.RED}❌ {message}{Style.RESET_ALL}", file=sys.stderr)


def on_off(value):
    if value not in ('on', 'off'):
        raise argparse.ArgumentTypeError(f"expected 'on' or 'off', got '{value}'")
    return value == 'on'


def int_list(value):
    try:
        return tuple(int(v) for v in value.split(',') if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{value}'")


def replay_command(argv, resolved_path):
    """The original command line with --config pointing at the resolved echo"""
    args = []
    skip = False
    for arg in argv:
        if skip:
            skip = False
            continue
        if arg == '--config':
            skip = True
            continue
        if arg.startswith('--config='):
            continue
        args.append(arg)
    return ' '.join(shlex.quote(a) for a in ['python', 'tml.py'] + args + ['--config', str(resolved_path)])


# ---------------------------------------------------------------------------
# Configuration from flags
# ---------------------------------------------------------------------------

def resolve_config(args):
    """Defaults < TOML < environment < command-line flags"""
    cfg = load_config(args.config)
    if getattr(args, 'setting', None):
        cfg = apply_setting(cfg, args.setting)

    run, train, model = cfg.run, cfg.train, cfg.model
    if args.seed is not None:
        train = replace(train, seed=args.seed)
    if args.dtype:
        run = replace(run, dtype=args.dtype)
    if args.debug:
        run = replace(run, debug=True)
    for flag in ('epochs_tm', 'epochs_pm', 'epochs_em', 'batch_size', 'workers'):
        value = getattr(args, flag, None)
        if value is not None:
            train = replace(train, **{flag: value})
    if getattr(args, 'em_mode', None):
        train = replace(train, em_mode=args.em_mode)
    if getattr(args, 'no_em', False):
        train = replace(train, use_em=False)
    for role in ('tm', 'pm', 'em'):
        value = getattr(args, f'gdc_{role}', None)
        if value is not None:
            model = replace(model, **{f'gdc_{role}': value})

    cfg = replace(cfg, run=run, train=train, model=model)
    cfg.validate()
    return cfg


def prepare(args, cfg, argv):
    """Applies run settings, writes the resolved config and opens the log"""
    tensor.set_default_dtype(cfg.run.dtype)
    tensor.set_debug(cfg.run.debug)
    out = Path(args.out) if args.out else None
    if out is not None:
        os.makedirs(out, exist_ok=True)
        write_resolved(cfg, out, replay_command(argv, out / RESOLVED_CONFIG))
    log_file = out / 'tml.log' if out is not None else 'tml.log'
    logger = setup_logging(log_file, cfg.run.log_level)
    logger.info(f"COMMAND: {args.command} | seed={cfg.train.seed} dtype={cfg.run.dtype} debug={cfg.run.debug}")
    return out, logger


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg, out, logger):
    tm = None
    if args.tm_checkpoint:
        tm = load_tm(args.tm_checkpoint, cfg, logger)
        tm.freeze()
    counts = cfg.corpus_counts()
    print(f"🎨 Generating corpus in {out}: "
          + ", ".join(f"{split}={n}" for split, n in counts.items())
          + f" at {cfg.train.image_size[0]}x{cfg.train.image_size[1]}")
    manifest = generate_corpus(out, counts, cfg.train.image_size, Rng(cfg.train.seed), cfg.darkener_ranges(),
                               tm=tm, logger=logger)
    print(f"{Fore.GREEN}✅ Manifest written to: {manifest}{Style.RESET_ALL}")
    if tm is not None:
        print(f"{Fore.GREEN}✓ Pseudo low-light images written to: {out / 'pseudo'}{Style.RESET_ALL}")
    return 0


def cmd_train_tm(args, cfg, out, logger):
    rng = Rng(cfg.train.seed)
    pairs = open_dataset(cfg.dataset_spec('train_pairs'), rng, paired=True, logger=logger)
    print(f"🔧 Step 1: training TM on {len(pairs)} pairs for {cfg.train.epochs_tm} epochs")
    start = time.time()
    with open(out / TRAIN_LOG, 'w', encoding='utf-8') as log_file:
        tm, history = train_tm(pairs, cfg.train, cfg.model_config('tm'), rng, log_file=log_file,
                               checkpoint_path=out / 'tm.tmlc', logger=logger, progress=True)
    print(f"{Fore.GREEN}✓ TM trained in {format_duration(time.time() - start)}, "
          f"final loss {history[-1].loss:.6f}{Style.RESET_ALL}")
    size = (out / 'tm.tmlc').stat().st_size
    print(f"{Fore.GREEN}✅ Checkpoint: {out / 'tm.tmlc'} ({format_file_size(size)}){Style.RESET_ALL}")
    return 0


def print_evaluation(evaluation, label=''):
    print(f"\n{Fore.CYAN}📊 Held-out evaluation{label} ({evaluation.count} pairs){Style.RESET_ALL}")
    print(f"  {'':<10} {'PSNR (dB)':>10} {'SSIM':>10}")
    print(f"  {'low':<10} {evaluation.psnr_low:>10.3f} {evaluation.ssim_low:>10.4f}")
    print(f"  {'enhanced':<10} {evaluation.psnr_out:>10.3f} {evaluation.ssim_out:>10.4f}")
    colour = Fore.GREEN if evaluation.psnr_gain > 0 else Fore.YELLOW
    print(f"  {colour}PSNR gain: {evaluation.psnr_gain:+.3f} dB{Style.RESET_ALL}")


def run_step2(cfg, tm, out, logger, label=''):
    """Step 2 with the freeze and no-low-light guarantees checked; returns (result, evaluation)"""
    rng = Rng(cfg.train.seed)
    tm.freeze()
    before = checksum(parameter_bytes(tm))

    access = AccessLog()
    normals = open_dataset(cfg.dataset_spec('normals'), rng, paired=False, access_log=access, logger=logger)
    em_note = f", EM {cfg.train.epochs_em} epochs ({cfg.train.em_mode})" if cfg.train.use_em else ", no EM"
    print(f"🔧 Step 2{label}: PM {cfg.train.epochs_pm} epochs{em_note} on {len(normals)} normal-light images")
    with open(out / TRAIN_LOG, 'w', encoding='utf-8') as log_file:
        result = train_pm_em(tm, normals, cfg.train, cfg.model_config('pm'), cfg.model_config('em'), rng,
                             log_file=log_file, checkpoint_dir=out, logger=logger, progress=True)

    if checksum(parameter_bytes(tm)) != before:
        raise ContractError("troublemaker parameters changed during step 2")
    low_opened = access.opened('low')
    if low_opened:
        raise ContractError(f"step 2 opened {len(low_opened)} low-light file(s), e.g. {low_opened[0]}")
    print(f"{Fore.GREEN}✓ TM unchanged; step 2 opened 0 low-light files{Style.RESET_ALL}")
    logger.info(f"STEP2_GUARDS: tm_checksum={before:016x} low_opened=0")

    evaluation = None
    test_spec = cfg.dataset_spec('test')
    if test_spec.mode != 'synthetic' or test_spec.count > 0:
        test = open_dataset(test_spec, rng, paired=True, logger=logger)
        evaluation = evaluate(result.pm, result.em, test)
        logger.info(f"EVALUATION: psnr_low={evaluation.psnr_low:.4f} psnr_out={evaluation.psnr_out:.4f} "
                    f"ssim_low={evaluation.ssim_low:.4f} ssim_out={evaluation.ssim_out:.4f}")
    return result, evaluation


def load_tm(path, cfg, logger):
    if not path or not Path(path).is_file():
        raise ContractError(f"missing troublemaker checkpoint: {path or '(none given, use --checkpoint)'}")
    tm, _ = load_checkpoint(path, expected_config=cfg.model_config('tm'), role=Role.TM, logger=logger)
    return tm


def cmd_train(args, cfg, out, logger):
    tm = load_tm(args.checkpoint, cfg, logger)
    start = time.time()
    _, evaluation = run_step2(cfg, tm, out, logger)
    print(f"{Fore.GREEN}✅ Step 2 finished in {format_duration(time.time() - start)}; "
          f"checkpoints in {out}{Style.RESET_ALL}")
    if evaluation is not None:
        print_evaluation(evaluation)
    return 0


def load_pipeline(run_dir, logger):
    run_dir = Path(run_dir) if run_dir else None
    if run_dir is None or not (run_dir / 'pm.tmlc').is_file():
        raise ContractError(f"missing predicting-model checkpoint: {run_dir / 'pm.tmlc' if run_dir else '(none)'}")
    pm, _ = load_checkpoint(run_dir / 'pm.tmlc', role=Role.PM, logger=logger)
    em = None
    if (run_dir / 'em.tmlc').is_file():
        em, _ = load_checkpoint(run_dir / 'em.tmlc', role=Role.EM, logger=logger)
    return pm, em


def collect_inputs(paths, file_list):
    inputs = []
    for entry in list(paths) + (read_file_list(file_list) if file_list else []):
        path = Path(entry)
        if path.is_dir():
            inputs.extend(list_images(path))
        elif path.suffix.lower() in IMAGE_SUFFIXES:
            inputs.append(path)
        else:
            raise ConfigError(f"Not an image file or directory: {path}")
    return inputs


def cmd_enhance(args, cfg, out, logger):
    pm, em = load_pipeline(args.checkpoint, logger)
    inputs = collect_inputs(args.inputs, args.file_list)
    if not inputs:
        raise ConfigError("No input images given")
    mode = f"EM {em.em_mode.value}" if em else "PM only"
    print(f"✨ Enhancing {len(inputs)} image(s) ({mode}) with {cfg.train.workers} worker(s)")
    results = enhance_paths(pm, em, inputs, out, residual_dir=args.residual_dir, workers=cfg.train.workers,
                            logger=logger)
    failed = [r for r in results if not r['success']]
    for r in failed:
        fail(f"{r['input_path']}: {r['error']}")
    print(f"{Fore.GREEN}✅ Enhanced {len(results) - len(failed)} of {len(results)} image(s) into {out}{Style.RESET_ALL}")
    return 1 if failed else 0


def metric_pairs(args):
    if args.pred_dir or args.ref_dir:
        if not (args.pred_dir and args.ref_dir):
            raise ConfigError("--pred-dir and --ref-dir go together")
        refs = {p.name: p for p in list_images(args.ref_dir)}
        preds = list_images(args.pred_dir)
        missing = [p.name for p in preds if p.name not in refs]
        if missing:
            raise ConfigError(f"No reference for {len(missing)} prediction(s), e.g. {missing[0]}")
        return [(p, refs[p.name]) for p in preds]
    if len(args.images) < 2 or len(args.images) % 2:
        raise ConfigError("metrics needs PRED REF pairs or --pred-dir/--ref-dir")
    return [(Path(a), Path(b)) for a, b in zip(args.images[0::2], args.images[1::2])]


def cmd_metrics(args, cfg, out, logger):
    pairs = metric_pairs(args)
    rows = []
    for pred_path, ref_path in pairs:
        pred, ref = read_image(pred_path), read_image(ref_path)
        rows.append((pred_path.name, psnr(pred, ref), ssim(pred, ref)))
        logger.info(f"METRICS: {pred_path} vs {ref_path} | psnr={rows[-1][1]:.4f} ssim={rows[-1][2]:.6f}")
    for name, p, s in rows:
        print(f"{name}: PSNR {p:.3f} dB  SSIM {s:.6f}")
    if len(rows) > 1:
        mean_psnr = sum(r[1] for r in rows) / len(rows)
        mean_ssim = sum(r[2] for r in rows) / len(rows)
        print(f"{Fore.CYAN}📊 Mean over {len(rows)} pairs: PSNR {mean_psnr:.3f} dB  SSIM {mean_ssim:.6f}{Style.RESET_ALL}")
    return 0


def cmd_check_grad(args, cfg, out, logger):
    rng = Rng(cfg.train.seed)
    failures = []
    if not args.skip_oracles:
        print(f"🔍 Convolution oracles over {args.oracle_cases} random cases ({args.grad_dtype})")
        for res in conv_oracle_check(args.oracle_cases, rng.spawn('oracles'), dtype=args.grad_dtype, logger=logger):
            mark = f"{Fore.GREEN}✓" if res.passed else f"{Fore.RED}❌"
            print(f"  {mark} {res.name:<16} max abs {res.max_abs:.3e} (tolerance {res.tolerance:.0e}){Style.RESET_ALL}")
            if not res.passed:
                failures.append(res.name)

    print(f"🔍 Gradient suite ({args.grad_dtype}, central differences)")
    results = check_gradients(rng.spawn('gradients'), names=args.ops, dtype=args.grad_dtype, logger=logger,
                              progress=True)
    for res in results:
        mark = f"{Fore.GREEN}✓" if res.passed else f"{Fore.RED}❌"
        print(f"  {mark} {res.name:<18} probes {res.probes:>4}  max rel {res.max_rel_error:.3e}{Style.RESET_ALL}")
        if not res.passed:
            failures.append(f"{res.name} (worst input {res.worst_input})")
    if failures:
        raise VerificationFailed(f"gradient/oracle check failed: {', '.join(failures)}")
    print(f"{Fore.GREEN}✅ All {len(results)} gradient checks passed{Style.RESET_ALL}")
    return 0


def cmd_check_equiv(args, cfg, out, logger):
    start = time.time()
    results = check_equivalence(args.tokens, args.dims, args.seeds, Rng(cfg.train.seed), logger=logger)
    for res in results:
        mark = f"{Fore.GREEN}✓" if res.passed else f"{Fore.RED}❌"
        print(f"  {mark} S={res.tokens:<3} E={res.embed_dim:<3} seeds={res.seeds}  "
              f"max|A'-QK^T| {res.max_abs:.3e}{Style.RESET_ALL}")
    worst = max(res.max_abs for res in results)
    print(f"max|A'-QK^T| = {worst:.3e} (tolerance {results[0].tolerance:.0e}) in {time.time() - start:.2f}s")
    if not all(res.passed for res in results):
        raise VerificationFailed("attention map via convolution differs from Q K^T")
    print(f"{Fore.GREEN}✅ Attention map via dynamic convolution equals Q K^T{Style.RESET_ALL}")
    return 0


def bench_sizes(args, cfg):
    blocks = benchmark.BLOCKS if args.block == 'both' else (args.block,)
    if args.sizes and len(blocks) > 1:
        raise ConfigError("--sizes needs a single --block; use --gdc-sizes / --attention-sizes for both")
    sides = {
        'gdc': args.gdc_sizes or cfg.bench.gdc_sides,
        'self-attention': args.attention_sizes or cfg.bench.attention_sides,
    }
    if args.sizes:
        sides[blocks[0]] = args.sizes
    return {block: [side * side for side in sides[block]] for block in blocks}


def cmd_bench(args, cfg, out, logger):
    bench_cfg = cfg.bench if args.repeats is None else replace(cfg.bench, repeats=args.repeats)
    rng = Rng(cfg.train.seed)
    reports = {}
    for block, sizes in bench_sizes(args, cfg).items():
        print(f"⏱️  {block}: n = {', '.join(str(n) for n in sizes)} pixels, {bench_cfg.repeats} repeats")
        report = benchmark.scaling_bench(block, sizes, bench_cfg, rng.spawn(f'bench-{block}'), logger=logger)
        reports[block] = report
        for row in report.rows():
            ratio = f"  ratio {row[3]}" if row[3] else ''
            print(f"    n={row[1]:>7}  median {format_ns(row[2]):>10}{ratio}")
        if report.slope is not None:
            print(f"    log-log slope {report.slope:.3f}")

    csv_path = Path(args.csv) if args.csv else out / 'bench.csv'
    benchmark.write_csv(list(reports.values()), csv_path)
    print(f"{Fore.GREEN}✅ Benchmark CSV written to: {csv_path}{Style.RESET_ALL}")

    if args.model_report:
        size = benchmark.REPORT_SIZE
        rows = benchmark.model_report([(role, cfg.model_config(role.lower())) for role in ('TM', 'PM', 'EM')], size)
        print(f"\n{Fore.CYAN}📊 Model complexity at {size[0]}x{size[1]} (desk architecture){Style.RESET_ALL}")
        for row in rows:
            print(f"  {row.role}: {row.params / 1e6:.3f} M params, {row.gflops:.3f} GFLOPs")
        total_params = sum(r.params for r in rows) / 1e6
        total_gflops = sum(r.gflops for r in rows)
        print(f"  total: {total_params:.3f} M params, {total_gflops:.3f} GFLOPs")
        print(f"  published full-scale model, for context: {benchmark.PUBLISHED_PARAMS_M:.3f} M params, "
              f"{benchmark.PUBLISHED_GFLOPS:.3f} GFLOPs")

    if args.check:
        failures = benchmark.check_envelopes(reports.get('gdc'), reports.get('self-attention'))
        if failures:
            raise VerificationFailed("complexity envelope violated: " + "; ".join(failures))
        print(f"{Fore.GREEN}✓ GDC grows linearly, self-attention quadratically{Style.RESET_ALL}")
    return 0


def cmd_ablate(args, cfg, out, logger):
    letters = args.settings.upper()
    unknown = sorted(set(letters) - set(ABLATION_SETTINGS))
    if unknown or not letters:
        raise ConfigError(f"Unknown ablation setting(s) {unknown}; choose from {''.join(ABLATION_SETTINGS)}")

    rng = Rng(cfg.train.seed)
    tms = {}
    rows = []
    for letter in letters:
        setting_cfg = apply_setting(cfg, letter)
        setting_cfg.validate()
        setting_dir = out / f"setting_{letter}"
        os.makedirs(setting_dir, exist_ok=True)
        write_resolved(setting_cfg, setting_dir)
        print(f"\n{Fore.CYAN}🧪 Setting {letter}: {ABLATION_SETTINGS[letter]}{Style.RESET_ALL}")

        gdc_tm = setting_cfg.model.gdc_tm
        if gdc_tm not in tms:
            tm_dir = out / f"tm_gdc_{'on' if gdc_tm else 'off'}"
            os.makedirs(tm_dir, exist_ok=True)
            pairs = open_dataset(setting_cfg.dataset_spec('train_pairs'), rng, paired=True, logger=logger)
            with open(tm_dir / TRAIN_LOG, 'w', encoding='utf-8') as log_file:
                tms[gdc_tm], _ = train_tm(pairs, setting_cfg.train, setting_cfg.model_config('tm'), rng,
                                          log_file=log_file, checkpoint_path=tm_dir / 'tm.tmlc',
                                          logger=logger, progress=True)
        tm = tms[gdc_tm]
        _, evaluation = run_step2(setting_cfg, tm, setting_dir, logger, label=f" [{letter}]")
        if evaluation is None:
            raise ConfigError("ablate needs held-out test pairs (data.test_pairs > 0)")
        rows.append((letter, evaluation))
        logger.info(f"ABLATION: {letter} psnr={evaluation.psnr_out:.4f} ssim={evaluation.ssim_out:.4f}")

    with open(out / 'ablation.csv', 'w', encoding='utf-8') as f:
        f.write("setting,psnr_low,psnr_out,ssim_low,ssim_out\n")
        for letter, ev in rows:
            f.write(f"{letter},{ev.psnr_low:.6f},{ev.psnr_out:.6f},{ev.ssim_low:.6f},{ev.ssim_out:.6f}\n")

    with open(out / 'ablation.txt', 'w', encoding='utf-8') as f:
        for stream in (sys.stdout, StripAnsiWriter(f)):
            print(f"\n{Fore.CYAN}📊 Ablation on held-out pairs{Style.RESET_ALL}", file=stream)
            print(f"  {'setting':<8} {'PSNR (dB)':>10} {'SSIM':>8}", file=stream)
            for letter, ev in rows:
                print(f"  {letter:<8} {ev.psnr_out:>10.3f} {ev.ssim_out:>8.4f}", file=stream)
    print(f"{Fore.GREEN}✅ Ablation table written to: {out / 'ablation.csv'}{Style.RESET_ALL}")
    return 0


COMMANDS = {
    'synth': cmd_synth,
    'train-tm': cmd_train_tm,
    'train': cmd_train,
    'enhance': cmd_enhance,
    'metrics': cmd_metrics,
    'check-grad': cmd_check_grad,
    'check-equiv': cmd_check_equiv,
    'bench': cmd_bench,
    'ablate': cmd_ablate,
}

# Commands whose outputs are files need a directory for them
DEFAULT_OUT = {
    'synth': 'corpus',
    'train-tm': 'runs/tm',
    'train': 'runs/pipeline',
    'enhance': 'enhanced',
    'bench': 'bench',
    'ablate': 'ablation',
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', '-c', help='RunConfig TOML file (default: built-in desk defaults)')
    common.add_argument('--seed', type=int, help='Root seed for every random stream')
    common.add_argument('--out', '-o', help='Output directory (receives resolved_config.toml and tml.log)')
    common.add_argument('--dtype', choices=['float32', 'float64'], help='Element type of tensors')
    common.add_argument('--debug', action='store_true', help='Check every op result for NaN/Inf')

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument('--epochs-tm', type=int, help='Override train.epochs_tm')
    training.add_argument('--epochs-pm', type=int, help='Override train.epochs_pm')
    training.add_argument('--epochs-em', type=int, help='Override train.epochs_em')
    training.add_argument('--batch-size', type=int, help='Override train.batch_size')
    training.add_argument('--workers', type=int, help='Loader / enhancement threads')

    toggles = argparse.ArgumentParser(add_help=False)
    toggles.add_argument('--setting', help='Ablation preset A-G (GDC per model, EM presence and mode)')
    toggles.add_argument('--em-mode', choices=['direct', 'residual'], help='EM output mode')
    toggles.add_argument('--no-em', action='store_true', help='Train and use PM only')
    for role in ('tm', 'pm', 'em'):
        toggles.add_argument(f'--gdc-{role}', type=on_off, metavar='on|off',
                             help=f'GDC stages in the {role.upper()} network')

    parser = argparse.ArgumentParser(
        description='TroubleMaker Learning: low-light enhancement with GDC networks',
        epilog='Exit codes: 0 success, 1 failed verification or processing error, 2 usage/config error'
    )
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('synth', parents=[common, toggles], help='Write a synthetic paired corpus and manifest')
    p.add_argument('--tm-checkpoint', help='Also write TM pseudo low-light images of the normals to pseudo/')

    sub.add_parser('train-tm', parents=[common, training, toggles], help='Step 1: train the troublemaker')

    p = sub.add_parser('train', parents=[common, training, toggles], help='Step 2: train PM and EM with TM frozen')
    p.add_argument('--checkpoint', help='Troublemaker checkpoint from train-tm')

    p = sub.add_parser('enhance', parents=[common, training], help='Enhance low-light images')
    p.add_argument('inputs', nargs='*', help='Image files or directories')
    p.add_argument('--checkpoint', help='Run directory holding pm.tmlc (and em.tmlc)')
    p.add_argument('--file-list', help='Text file with one image path per line')
    p.add_argument('--residual-dir', help='Write max-normalised residual maps here')

    p = sub.add_parser('metrics', parents=[common], help='PSNR/SSIM of prediction/reference pairs')
    p.add_argument('images', nargs='*', help='PRED REF [PRED REF ...]')
    p.add_argument('--pred-dir', help='Directory of predictions')
    p.add_argument('--ref-dir', help='Directory of references matched by file name')

    p = sub.add_parser('check-grad', parents=[common], help='Finite-difference gradient suite and loop oracles')
    p.add_argument('--ops', nargs='+', help='Only these gradient cases')
    p.add_argument('--grad-dtype', choices=['float32', 'float64'], default='float64',
                   help='Precision of the gradient suite and oracles (default: float64)')
    p.add_argument('--oracle-cases', type=int, default=100, help='Random convolution oracle cases (default: 100)')
    p.add_argument('--skip-oracles', action='store_true', help='Gradient suite only')

    p = sub.add_parser('check-equiv', parents=[common], help='Attention map via dynamic convolution equals Q K^T')
    p.add_argument('--tokens', type=int_list, default=(4, 16, 64), help='Token counts S (default: 4,16,64)')
    p.add_argument('--dims', type=int_list, default=(8, 32), help='Embedding sizes E (default: 8,32)')
    p.add_argument('--seeds', type=int, default=10, help='Random cases per (S, E) (default: 10)')

    p = sub.add_parser('bench', parents=[common, toggles], help='Runtime scaling of GDC vs self-attention')
    p.add_argument('--block', choices=list(benchmark.BLOCKS) + ['both'], default='both')
    p.add_argument('--sizes', type=int_list, help='Square sides for the selected block, e.g. 64,128,256,512')
    p.add_argument('--gdc-sizes', type=int_list, help='Square sides for the GDC block')
    p.add_argument('--attention-sizes', type=int_list, help='Square sides for self-attention')
    p.add_argument('--repeats', type=int, help='Timed repeats per size (at least 5)')
    p.add_argument('--csv', help='CSV report path (default: OUT/bench.csv)')
    p.add_argument('--check', action='store_true', help='Fail unless the growth envelopes hold')
    p.add_argument('--model-report', action='store_true', help='Parameter count and GFLOPs of TM/PM/EM')

    p = sub.add_parser('ablate', parents=[common, training], help='Run ablation settings end to end')
    p.add_argument('--settings', default=''.join(ABLATION_SETTINGS), help='Letters to run (default: ABCDEFG)')
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    load_dotenv()
    args = build_parser().parse_args(argv)
    if args.out is None and args.command in DEFAULT_OUT:
        args.out = DEFAULT_OUT[args.command]

    logger = None
    try:
        cfg = resolve_config(args)
        out, logger = prepare(args, cfg, argv)
        return COMMANDS[args.command](args, cfg, out, logger)
    except VerificationFailed as e:
        fail(f"Verification failed: {e}")
        if logger:
            logger.error(f"VERIFICATION_FAILED: {e}")
        return 1
    except (ConfigError, ContractError, ConfigMismatchError) as e:
        fail(str(e))
        if logger:
            logger.error(f"USAGE_ERROR: {e}")
        return 2
    except CheckpointError as e:
        fail(f"Checkpoint rejected: {e}")
        if logger:
            logger.error(f"CHECKPOINT_ERROR: {e}")
        return 1
    except TMLError as e:
        fail(str(e))
        if logger:
            logger.error(f"ERROR: {type(e).__name__}: {e}")
        return 1
    except KeyboardInterrupt:
        print(f"\n{Fore.YELLOW}⚠️  Interrupted by user{Style.RESET_ALL}")
        if logger:
            logger.warning("Interrupted by user")
        return 1


if __name__ == "__main__":
    sys.exit(main())
