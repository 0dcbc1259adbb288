#!/usr/bin/env python3
"""
Scenario test framework for the tml.py command line

This framework:
1. Generates test inputs using setup_test_data.py
2. Runs tml.py scenarios (synth, training, enhancement, checks, bench) on a tiny config
3. Checks exit codes, stdout/stderr patterns and the files each scenario writes
4. Compares deterministic output files with ground truth (golden) files
5. Reports differences if any

Scenarios run in order and later ones reuse earlier outputs (the TM checkpoint,
the trained pipeline); running one scenario by name also runs what it needs.

Usage:
    python test/run_tests.py                    # Run all fast tests
    python test/run_tests.py --slow             # Also run the full gradient suite, envelopes and desk run
    python test/run_tests.py --generate-ground-truth  # Generate new ground truth files
    python test/run_tests.py --test-name enhance  # Run tests matching a name
    python test/run_tests.py --verbose          # Verbose output
    python test/run_tests.py --keep-test-data   # Don't cleanup test data after tests
"""

import os
import re
import sys
import subprocess
import argparse
import shutil
import json
import difflib
import filecmp
import time
from pathlib import Path
from datetime import datetime
from colorama import Fore, Style, init

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from lib.utils import strip_ansi  # noqa: E402

# Initialize colorama
init(autoreset=True)


def flip_byte(path, offset_fraction=0.6):
    """Inverts one payload byte of a checkpoint in place"""
    raw = bytearray(Path(path).read_bytes())
    pos = int(len(raw) * offset_fraction)
    raw[pos] ^= 0xFF
    Path(path).write_bytes(bytes(raw))


def truncate(path, keep_fraction=0.5):
    raw = Path(path).read_bytes()
    Path(path).write_bytes(raw[:int(len(raw) * keep_fraction)])


class TestFramework:
    """Main test framework class"""

    def __init__(self, generate_ground_truth=False, verbose=False, keep_test_data=False, slow=False):
        self.generate_ground_truth = generate_ground_truth
        self.verbose = verbose
        self.keep_test_data = keep_test_data
        self.slow = slow

        # Paths
        self.test_dir = Path(__file__).parent
        self.root_dir = self.test_dir.parent
        self.test_data_dir = self.test_dir / "test_data"
        self.ground_truth_dir = self.test_dir / "ground_truth"
        self.results_dir = self.test_dir / "results"

        # Test results
        self.passed_tests = []
        self.failed_tests = []
        self.skipped_tests = []

        # Ensure directories exist
        self.ground_truth_dir.mkdir(exist_ok=True)
        self.results_dir.mkdir(exist_ok=True)

    def log(self, message, level="INFO"):
        """Log message with timestamp and level"""
        timestamp = datetime.now().strftime("%H:%M:%S")
        if level == "INFO":
            color = Fore.BLUE
        elif level == "SUCCESS":
            color = Fore.GREEN
        elif level == "WARNING":
            color = Fore.YELLOW
        elif level == "ERROR":
            color = Fore.RED
        else:
            color = ""

        print(f"{color}[{timestamp}] {level}: {message}{Style.RESET_ALL}")

    def setup_test_data(self):
        """Generate test inputs"""
        self.log("Setting up test data...")

        cmd = [
            sys.executable, str(self.test_dir / "setup_test_data.py"),
            "--output-dir", str(self.test_data_dir.absolute()),
            "--cleanup"
        ]

        try:
            result = subprocess.run(cmd, capture_output=True, text=True, timeout=120)
            if result.returncode != 0:
                self.log(f"Failed to generate test data: {result.stdout}{result.stderr}", "ERROR")
                return False

            if self.verbose:
                self.log("Test data generation output:", "INFO")
                print(result.stdout)

        except subprocess.TimeoutExpired:
            self.log("Test data generation timed out", "ERROR")
            return False
        except Exception as e:
            self.log(f"Error generating test data: {e}", "ERROR")
            return False

        self.log("Test data setup complete", "SUCCESS")
        return True

    def run_command(self, cmd, timeout=60, env=None):
        """Run a command and capture stdout/stderr"""
        run_env = dict(os.environ)
        # Scenario runs must not pick up a developer's overrides
        for key in ('TML_SEED', 'TML_DTYPE', 'TML_LOG_LEVEL', 'TML_DEBUG'):
            run_env.pop(key, None)
        run_env.update(env or {})
        started = time.monotonic()
        try:
            result = subprocess.run(
                cmd,
                capture_output=True,
                text=True,
                encoding='utf-8',
                timeout=timeout,
                cwd=self.root_dir,
                env=run_env
            )

            return {
                'stdout': strip_ansi(result.stdout),
                'stderr': strip_ansi(result.stderr),
                'returncode': result.returncode,
                'elapsed': time.monotonic() - started,
                'cmd': ' '.join(str(c) for c in cmd)
            }

        except subprocess.TimeoutExpired:
            self.log(f"Command timed out after {timeout}s: {' '.join(str(c) for c in cmd)}", "ERROR")
            return None
        except Exception as e:
            self.log(f"Error running command: {e}", "ERROR")
            return None

    def get_test_scenarios(self):
        """
        Define all test scenarios

        Keys: description, cmd, expect_code (default 0), stdout / stderr (regexes
        that must match), stdout_min ((regex with one number group, minimum) pairs),
        max_seconds (wall clock for cmd plus post_cmd), exists / absent (paths), same_files (pairs that must be
        byte-identical), file_patterns ((path, regex) pairs), golden_files (paths
        compared with ground truth), prepare (callable run first), post_cmd,
        needs (scenarios run before this one), env, timeout, slow.
        """
        td = os.path.relpath(self.test_data_dir, self.root_dir)
        runs = os.path.join(td, 'runs')
        tiny = os.path.join(td, 'tiny.toml')
        tml = [sys.executable, 'tml.py']

        def p(*parts):
            return os.path.join(td, *parts)

        def r(*parts):
            return os.path.join(runs, *parts)

        scenarios = {
            'synth_corpus': {
                'description': 'Synthetic corpus and manifest from the tiny config',
                'cmd': tml + ['synth', '--config', tiny, '--out', p('corpus')],
                'stdout': [r'Manifest written to'],
                'exists': [p('corpus', 'manifest.csv'), p('corpus', 'resolved_config.toml'), p('corpus', 'tml.log'),
                           p('corpus', 'train_pairs', 'low', 'train_pairs_0000.ppm'),
                           p('corpus', 'train_pairs', 'normal', 'train_pairs_0003.ppm'),
                           p('corpus', 'normals', 'normals_0005.ppm'),
                           p('corpus', 'test', 'low', 'test_0001.ppm')],
                'absent': [p('corpus', 'pseudo')],
                'golden_files': [p('corpus', 'manifest.csv')],
            },

            'synth_determinism': {
                'description': 'Same seed writes byte-identical corpus files',
                'needs': ['synth_corpus'],
                'cmd': tml + ['synth', '--config', tiny, '--out', p('corpus_again')],
                'same_files': [(p('corpus', 'manifest.csv'), p('corpus_again', 'manifest.csv')),
                               (p('corpus', 'test', 'low', 'test_0000.ppm'),
                                p('corpus_again', 'test', 'low', 'test_0000.ppm'))],
            },

            'synth_env_seed': {
                'description': 'TML_SEED from the environment reaches the resolved config',
                'cmd': tml + ['synth', '--config', tiny, '--out', p('corpus_env')],
                'env': {'TML_SEED': '11'},
                'file_patterns': [(p('corpus_env', 'resolved_config.toml'), r'^seed = 11$')],
            },

            'synth_flag_beats_env': {
                'description': '--seed overrides TML_SEED',
                'cmd': tml + ['synth', '--config', tiny, '--seed', '5', '--out', p('corpus_flag')],
                'env': {'TML_SEED': '11'},
                'file_patterns': [(p('corpus_flag', 'resolved_config.toml'), r'^seed = 5$')],
            },

            'train_tm': {
                'description': 'Step 1: troublemaker training',
                'cmd': tml + ['train-tm', '--config', tiny, '--out', r('tm')],
                'stdout': [r'Step 1: training TM on 4 pairs for 2 epochs', r'Checkpoint: .*tm\.tmlc'],
                'exists': [r('tm', 'tm.tmlc'), r('tm', 'train_log.csv')],
                'file_patterns': [(r('tm', 'train_log.csv'), r'^tm,1,'),
                                  (r('tm', 'resolved_config.toml'), r'^# replay: .*train-tm')],
                'timeout': 300,
            },

            'train_tm_determinism': {
                'description': 'Second step 1 run with the same seed is bit-identical',
                'needs': ['train_tm'],
                'cmd': tml + ['train-tm', '--config', tiny, '--out', r('tm_again')],
                'same_files': [(r('tm', 'train_log.csv'), r('tm_again', 'train_log.csv')),
                               (r('tm', 'tm.tmlc'), r('tm_again', 'tm.tmlc'))],
                'timeout': 300,
            },

            'train_tm_replay': {
                'description': 'Replaying from resolved_config.toml reproduces the run',
                'needs': ['train_tm'],
                'cmd': tml + ['train-tm', '--config', r('tm', 'resolved_config.toml'), '--out', r('tm_replay')],
                'same_files': [(r('tm', 'train_log.csv'), r('tm_replay', 'train_log.csv'))],
                'timeout': 300,
            },

            'train_missing_tm': {
                'description': 'Step 2 without a troublemaker checkpoint is refused',
                'cmd': tml + ['train', '--config', tiny, '--checkpoint', r('no_such_tm.tmlc'), '--out', r('orphan')],
                'expect_code': 2,
                'stderr': [r'missing troublemaker checkpoint'],
                'absent': [r('orphan', 'pm.tmlc')],
            },

            'train_pipeline': {
                'description': 'Step 2: PM and EM with the troublemaker frozen',
                'needs': ['train_tm'],
                'cmd': tml + ['train', '--config', tiny, '--checkpoint', r('tm', 'tm.tmlc'), '--out', r('pipeline')],
                'stdout': [r'TM unchanged; step 2 opened 0 low-light files', r'Held-out evaluation \(2 pairs\)',
                           r'PSNR gain: [+-]\d+\.\d{3} dB'],
                'exists': [r('pipeline', 'pm.tmlc'), r('pipeline', 'em.tmlc'), r('pipeline', 'train_log.csv')],
                'file_patterns': [(r('pipeline', 'train_log.csv'), r'^pm,2,'),
                                  (r('pipeline', 'train_log.csv'), r'^em,2,')],
                'timeout': 600,
            },

            'train_pm_only': {
                'description': 'Step 2 without an enhancing model',
                'needs': ['train_tm'],
                'cmd': tml + ['train', '--config', tiny, '--checkpoint', r('tm', 'tm.tmlc'), '--no-em',
                              '--out', r('pm_only')],
                'stdout': [r', no EM on 6 normal-light images'],
                'exists': [r('pm_only', 'pm.tmlc')],
                'absent': [r('pm_only', 'em.tmlc')],
                'timeout': 300,
            },

            'train_config_mismatch': {
                'description': 'TM checkpoint written for another architecture is rejected',
                'needs': ['train_tm'],
                'cmd': tml + ['train', '--config', tiny, '--checkpoint', r('tm', 'tm.tmlc'), '--gdc-tm', 'off',
                              '--out', r('mismatch')],
                'expect_code': 2,
                'stderr': [r'different model config'],
            },

            'enhance_dir': {
                'description': 'Enhance a directory with residual maps',
                'needs': ['synth_corpus', 'train_pipeline'],
                'cmd': tml + ['enhance', '--checkpoint', r('pipeline'), '--out', p('enhanced'),
                              '--residual-dir', p('maps'), p('corpus', 'test', 'low')],
                'stdout': [r'Enhancing 2 image\(s\) \(EM residual\)', r'Enhanced 2 of 2 image\(s\)'],
                'exists': [p('enhanced', 'test_0000.ppm'), p('enhanced', 'test_0001.ppm'),
                           p('maps', 'test_0000.ppm'), p('enhanced', 'resolved_config.toml')],
            },

            'enhance_odd_sizes': {
                'description': 'Sizes not divisible by the network stride and a 16-bit input',
                'needs': ['train_pipeline'],
                'cmd': tml + ['enhance', '--checkpoint', r('pipeline'), '--out', p('enhanced_odd'), p('images')],
                'stdout': [r'Enhanced 4 of 4 image\(s\)'],
                'exists': [p('enhanced_odd', 'dark_37x29.ppm'), p('enhanced_odd', 'dark_50x18.ppm'),
                           p('enhanced_odd', 'dark_16bit.ppm')],
                'file_patterns': [(p('enhanced_odd', 'dark_37x29.ppm'), r'^P6\n37 29\n255\n')],
            },

            'enhance_file_list': {
                'description': 'Inputs from a file list, PM only',
                'needs': ['train_pm_only'],
                'cmd': tml + ['enhance', '--checkpoint', r('pm_only'), '--out', p('enhanced_list'),
                              '--file-list', p('images', 'file_list.txt')],
                'stdout': [r'\(PM only\)', r'Enhanced 2 of 2 image\(s\)'],
                'exists': [p('enhanced_list', 'dark_37x29.ppm'), p('enhanced_list', 'dark_16bit.ppm')],
            },

            'enhance_missing_pm': {
                'description': 'Run directory without pm.tmlc is refused',
                'needs': ['train_tm'],
                'cmd': tml + ['enhance', '--checkpoint', r('tm'), '--out', p('enhanced_none'), p('images')],
                'expect_code': 2,
                'stderr': [r'missing predicting-model checkpoint'],
            },

            'enhance_broken_image': {
                'description': 'Truncated PPM is reported and the run fails',
                'needs': ['train_pipeline'],
                'cmd': tml + ['enhance', '--checkpoint', r('pipeline'), '--out', p('enhanced_broken'),
                              p('broken.ppm')],
                'expect_code': 1,
                'stderr': [r'raster too short'],
                'stdout': [r'Enhanced 0 of 1 image\(s\)'],
            },

            'corrupted_checkpoint': {
                'description': 'Flipped checkpoint byte fails the checksum',
                'needs': ['train_pipeline'],
                'prepare': lambda: (shutil.copytree(self.root_dir / r('pipeline'), self.root_dir / r('corrupt'),
                                                    dirs_exist_ok=True),
                                    flip_byte(self.root_dir / r('corrupt', 'pm.tmlc'))),
                'cmd': tml + ['enhance', '--checkpoint', r('corrupt'), '--out', p('enhanced_corrupt'), p('images')],
                'expect_code': 1,
                'stderr': [r'checksum mismatch'],
            },

            'truncated_checkpoint': {
                'description': 'Truncated checkpoint is rejected',
                'needs': ['train_pipeline'],
                'prepare': lambda: (shutil.copytree(self.root_dir / r('pipeline'), self.root_dir / r('truncated'),
                                                    dirs_exist_ok=True),
                                    truncate(self.root_dir / r('truncated', 'em.tmlc'))),
                'cmd': tml + ['enhance', '--checkpoint', r('truncated'), '--out', p('enhanced_trunc'), p('images')],
                'expect_code': 1,
                'stderr': [r'Checkpoint truncated'],
            },

            'metrics_identity': {
                'description': 'Identical images score the PSNR cap and SSIM 1',
                'cmd': tml + ['metrics', p('images', 'dark_32x32.ppm'), p('images', 'dark_32x32.ppm')],
                'stdout': [r'^dark_32x32\.ppm: PSNR 99\.000 dB  SSIM 1\.000000$'],
            },

            'metrics_dirs': {
                'description': 'Predictions matched to references by name',
                'needs': ['synth_corpus', 'enhance_dir'],
                'cmd': tml + ['metrics', '--pred-dir', p('enhanced'), '--ref-dir', p('corpus', 'test', 'normal')],
                'stdout': [r'^test_0000\.ppm: PSNR \d+\.\d{3} dB', r'Mean over 2 pairs'],
            },

            'metrics_unpaired': {
                'description': 'Odd number of metric arguments is a usage error',
                'cmd': tml + ['metrics', p('images', 'dark_32x32.ppm')],
                'expect_code': 2,
                'stderr': [r'PRED REF pairs'],
            },

            'check_equiv': {
                'description': 'Attention map through dynamic convolution equals Q K^T',
                'cmd': tml + ['check-equiv'],
                'stdout': [r"max\|A'-QK\^T\| = \S+ \(tolerance 1e-05\)"],
                'timeout': 300,
            },

            'check_grad_ops': {
                'description': 'Gradient checks for a handful of ops plus the loop oracles',
                'cmd': tml + ['check-grad', '--ops', 'add', 'matmul', 'softmax', 'conv2d', 'gdc_block',
                              '--oracle-cases', '20'],
                'stdout': [r'conv2d\s+max abs', r'All 5 gradient checks passed'],
                'timeout': 600,
            },

            'check_grad_unknown_op': {
                'description': 'Unknown gradient case name is a usage error',
                'cmd': tml + ['check-grad', '--ops', 'no_such_op', '--skip-oracles'],
                'expect_code': 2,
                'stderr': [r'no_such_op'],
            },

            'check_grad_full': {
                'description': 'Complete gradient suite and 100 oracle cases',
                'cmd': tml + ['check-grad'],
                'stdout': [r'All \d+ gradient checks passed'],
                'timeout': 3600,
                'slow': True,
            },

            'bench_quick': {
                'description': 'GDC timing at two sizes plus the model report',
                'cmd': tml + ['bench', '--block', 'gdc', '--sizes', '32,64', '--out', p('bench'), '--model-report'],
                'stdout': [r'n=\s+1024', r'n=\s+4096', r'Model complexity at 400x640'],
                'exists': [p('bench', 'bench.csv')],
                'file_patterns': [(p('bench', 'bench.csv'), r'^gdc,')],
                'timeout': 300,
            },

            'bench_envelopes': {
                'description': 'Linear GDC and quadratic self-attention growth',
                'cmd': tml + ['bench', '--check', '--out', p('bench_full')],
                'stdout': [r'GDC grows linearly, self-attention quadratically'],
                'timeout': 3600,
                'slow': True,
            },

            'bad_config_key': {
                'description': 'Unknown config key is rejected',
                'cmd': tml + ['train-tm', '--config', p('bad_key.toml'), '--out', r('bad')],
                'expect_code': 2,
                'stderr': [r"Unknown key\(s\) in \[train\]: \['learning_rate'\]"],
            },

            'bad_config_type': {
                'description': 'Wrongly typed config value is rejected',
                'cmd': tml + ['train-tm', '--config', p('bad_type.toml'), '--out', r('bad')],
                'expect_code': 2,
                'stderr': [r'train\.epochs_tm must be an integer'],
            },

            'bad_config_section': {
                'description': 'Unknown config section is rejected',
                'cmd': tml + ['train-tm', '--config', p('bad_section.toml'), '--out', r('bad')],
                'expect_code': 2,
                'stderr': [r"Unknown section\(s\): \['optimizer'\]"],
            },

            'ablate_tiny': {
                'description': 'Ablation settings A and G end to end',
                'cmd': tml + ['ablate', '--config', tiny, '--settings', 'AG', '--out', p('ablation')],
                'stdout': [r'Ablation on held-out pairs', r'^\s+A\s+\d+\.\d{3}', r'^\s+G\s+\d+\.\d{3}'],
                'exists': [p('ablation', 'ablation.csv'), p('ablation', 'ablation.txt'),
                           p('ablation', 'tm_gdc_off', 'tm.tmlc'), p('ablation', 'tm_gdc_on', 'tm.tmlc'),
                           p('ablation', 'setting_A', 'pm.tmlc'), p('ablation', 'setting_G', 'em.tmlc')],
                'absent': [p('ablation', 'setting_A', 'em.tmlc')],
                'timeout': 1200,
            },

            'desk_end_to_end': {
                'description': 'Desk config: step 1 then step 2',
                'cmd': tml + ['train-tm', '--config', 'configs/desk.toml', '--out', r('desk_tm')],
                'post_cmd': tml + ['train', '--config', 'configs/desk.toml', '--checkpoint', r('desk_tm', 'tm.tmlc'),
                                   '--out', r('desk')],
                'stdout': [r'TM unchanged; step 2 opened 0 low-light files'],
                'stdout_min': [(r'PSNR gain: ([+-]?\d+\.\d+) dB', 2.0)],
                'exists': [r('desk', 'pm.tmlc'), r('desk', 'em.tmlc')],
                'max_seconds': 1200,
                'timeout': 7200,
                'slow': True,
            },
        }

        return scenarios

    def save_result(self, test_name, result, output_files_content):
        """Save test result to ground truth or results directory"""
        if self.generate_ground_truth:
            output_dir = self.ground_truth_dir
        else:
            output_dir = self.results_dir

        # Save stdout
        stdout_file = output_dir / f"{test_name}_stdout.txt"
        with open(stdout_file, 'w', encoding='utf-8') as f:
            f.write(result['stdout'])

        # Save stderr if not empty
        if result['stderr'].strip():
            stderr_file = output_dir / f"{test_name}_stderr.txt"
            with open(stderr_file, 'w', encoding='utf-8') as f:
                f.write(result['stderr'])

        # Save output files
        for filename, content in output_files_content.items():
            output_file = output_dir / f"{test_name}_{filename}"
            with open(output_file, 'w', encoding='utf-8') as f:
                f.write(content)

        # Save metadata
        metadata = {
            'test_name': test_name,
            'cmd': result['cmd'],
            'returncode': result['returncode'],
            'output_files': list(output_files_content.keys())
        }

        metadata_file = output_dir / f"{test_name}_metadata.json"
        with open(metadata_file, 'w', encoding='utf-8') as f:
            json.dump(metadata, f, indent=2)

    def compare_results(self, test_name):
        """Compare golden output files with ground truth; missing ground truth only warns"""
        metadata_file = self.ground_truth_dir / f"{test_name}_metadata.json"
        if not metadata_file.exists():
            self.log(f"No ground truth found for {test_name}, skipping golden comparison", "WARNING")
            return True

        with open(metadata_file, 'r', encoding='utf-8') as f:
            metadata = json.load(f)

        for output_file in metadata.get('output_files', []):
            ground_truth_file = self.ground_truth_dir / f"{test_name}_{output_file}"
            result_file = self.results_dir / f"{test_name}_{output_file}"

            if not result_file.exists():
                self.log(f"Output file {output_file} missing for {test_name}", "ERROR")
                return False

            with open(ground_truth_file, 'r', encoding='utf-8') as f:
                gt_content = f.read()
            with open(result_file, 'r', encoding='utf-8') as f:
                res_content = f.read()

            if gt_content != res_content:
                self.log(f"Output file {output_file} differs for {test_name}", "ERROR")
                self.show_diff(gt_content, res_content, f"{test_name} {output_file}")
                return False

        return True

    def show_diff(self, expected, actual, context=""):
        """Show colored diff between expected and actual content"""
        print(f"\n{Fore.RED}=== DIFF for {context} ==={Style.RESET_ALL}")

        expected_lines = expected.splitlines(keepends=True)
        actual_lines = actual.splitlines(keepends=True)

        diff = difflib.unified_diff(
            expected_lines,
            actual_lines,
            fromfile="expected",
            tofile="actual",
            lineterm=""
        )

        for line in diff:
            if line.startswith('+++') or line.startswith('---'):
                print(f"{Fore.BLUE}{line}{Style.RESET_ALL}", end='')
            elif line.startswith('+'):
                print(f"{Fore.GREEN}{line}{Style.RESET_ALL}", end='')
            elif line.startswith('-'):
                print(f"{Fore.RED}{line}{Style.RESET_ALL}", end='')
            elif line.startswith('@@'):
                print(f"{Fore.CYAN}{line}{Style.RESET_ALL}", end='')
            else:
                print(line, end='')

        print(f"{Fore.RED}=== END DIFF ==={Style.RESET_ALL}\n")

    def check_expectations(self, test_name, scenario, result):
        """Exit code, output patterns and file checks; returns a list of problems"""
        problems = []
        expected_code = scenario.get('expect_code', 0)
        if result['returncode'] != expected_code:
            problems.append(f"exit code {result['returncode']}, expected {expected_code}")

        for stream in ('stdout', 'stderr'):
            for pattern in scenario.get(stream, []):
                if not re.search(pattern, result[stream], re.MULTILINE):
                    problems.append(f"{stream} does not match /{pattern}/")

        for pattern, minimum in scenario.get('stdout_min', []):
            match = re.search(pattern, result['stdout'], re.MULTILINE)
            if not match:
                problems.append(f"stdout does not match /{pattern}/")
            elif float(match.group(1)) < minimum:
                problems.append(f"/{pattern}/ captured {match.group(1)}, expected at least {minimum}")

        max_seconds = scenario.get('max_seconds')
        if max_seconds is not None and result['elapsed'] > max_seconds:
            problems.append(f"took {result['elapsed']:.0f}s, limit {max_seconds}s")

        for rel in scenario.get('exists', []):
            if not (self.root_dir / rel).exists():
                problems.append(f"missing output {rel}")
        for rel in scenario.get('absent', []):
            if (self.root_dir / rel).exists():
                problems.append(f"unexpected output {rel}")

        for a, b in scenario.get('same_files', []):
            path_a, path_b = self.root_dir / a, self.root_dir / b
            if not (path_a.exists() and path_b.exists()):
                problems.append(f"cannot compare {a} and {b}: file missing")
            elif not filecmp.cmp(path_a, path_b, shallow=False):
                problems.append(f"{a} and {b} differ")

        for rel, pattern in scenario.get('file_patterns', []):
            path = self.root_dir / rel
            if not path.exists():
                problems.append(f"missing output {rel}")
                continue
            text = path.read_bytes().decode('latin-1')
            if not re.search(pattern, text, re.MULTILINE):
                problems.append(f"{rel} does not match /{pattern}/")
        return problems

    def run_test(self, test_name, scenario):
        """Run a single test scenario"""
        self.log(f"Running test: {test_name} - {scenario['description']}")
        timeout = scenario.get('timeout', 120)

        if 'prepare' in scenario:
            try:
                scenario['prepare']()
            except Exception as e:
                self.log(f"Prepare step failed for {test_name}: {e}", "ERROR")
                self.failed_tests.append(test_name)
                return False

        # Run the command
        result = self.run_command(scenario['cmd'], timeout, scenario.get('env'))
        if result is None:
            self.log(f"Failed to run test {test_name}", "ERROR")
            self.failed_tests.append(test_name)
            return False

        # Run post command if specified
        if 'post_cmd' in scenario and result['returncode'] == 0:
            self.log(f"Running post command for {test_name}")
            post_result = self.run_command(scenario['post_cmd'], timeout, scenario.get('env'))
            if post_result is None:
                self.log(f"Failed to run post command for {test_name}", "ERROR")
                self.failed_tests.append(test_name)
                return False

            # Combine output from both commands
            result['stdout'] += f"\n--- POST COMMAND OUTPUT ---\n{post_result['stdout']}"
            if post_result['stderr'].strip():
                result['stderr'] += f"\n--- POST COMMAND STDERR ---\n{post_result['stderr']}"
            result['returncode'] = post_result['returncode']
            result['elapsed'] += post_result['elapsed']

        if self.verbose:
            print(result['stdout'])

        # Collect golden output files
        output_files_content = {}
        for rel in scenario.get('golden_files', []):
            file_path = self.root_dir / rel
            if file_path.exists():
                output_files_content[Path(rel).name] = file_path.read_text(encoding='utf-8')

        self.save_result(test_name, result, output_files_content)

        problems = self.check_expectations(test_name, scenario, result)
        if problems:
            for problem in problems:
                self.log(f"{test_name}: {problem}", "ERROR")
            if result['stderr'].strip():
                print(f"{Fore.RED}STDERR:{Style.RESET_ALL}")
                print(f"{Fore.RED}{result['stderr'][-2000:]}{Style.RESET_ALL}")
            self.failed_tests.append(test_name)
            return False

        if self.generate_ground_truth:
            self.log(f"Ground truth saved for {test_name}", "SUCCESS")
            self.passed_tests.append(test_name)
            return True

        if self.compare_results(test_name):
            self.log(f"Test {test_name} PASSED", "SUCCESS")
            self.passed_tests.append(test_name)
            return True
        self.log(f"Test {test_name} FAILED", "ERROR")
        self.failed_tests.append(test_name)
        return False

    def select(self, scenarios, test_filter):
        """Matching scenarios plus everything they need, in definition order"""
        wanted = set()

        def add(name):
            if name in wanted:
                return
            wanted.add(name)
            for dependency in scenarios[name].get('needs', []):
                add(dependency)

        for name, scenario in scenarios.items():
            if test_filter and test_filter not in name:
                continue
            if scenario.get('slow') and not self.slow and not test_filter:
                self.skipped_tests.append(name)
                continue
            add(name)
        return {name: scenario for name, scenario in scenarios.items() if name in wanted}

    def run_all_tests(self, test_filter=None):
        """Run all test scenarios"""
        scenarios = self.select(self.get_test_scenarios(), test_filter)

        if not scenarios:
            self.log("No tests to run", "WARNING")
            return False

        self.log(f"Running {len(scenarios)} test scenarios...")

        for test_name, scenario in scenarios.items():
            try:
                self.run_test(test_name, scenario)
            except Exception as e:
                self.log(f"Exception in test {test_name}: {e}", "ERROR")
                self.failed_tests.append(test_name)

        return True

    def cleanup(self):
        """Clean up test data"""
        if not self.keep_test_data and self.test_data_dir.exists():
            self.log("Cleaning up test data...")
            shutil.rmtree(self.test_data_dir)

    def print_summary(self):
        """Print test results summary"""
        total_tests = len(self.passed_tests) + len(self.failed_tests)

        print(f"\n{Fore.CYAN}=== TEST SUMMARY ==={Style.RESET_ALL}")
        print(f"Total tests: {total_tests}")
        print(f"{Fore.GREEN}Passed: {len(self.passed_tests)}{Style.RESET_ALL}")
        print(f"{Fore.RED}Failed: {len(self.failed_tests)}{Style.RESET_ALL}")
        if self.skipped_tests:
            print(f"{Fore.YELLOW}Skipped (slow, use --slow): {len(self.skipped_tests)}{Style.RESET_ALL}")

        if self.passed_tests:
            print(f"\n{Fore.GREEN}Passed tests:{Style.RESET_ALL}")
            for test in self.passed_tests:
                print(f"  ✓ {test}")

        if self.failed_tests:
            print(f"\n{Fore.RED}Failed tests:{Style.RESET_ALL}")
            for test in self.failed_tests:
                print(f"  ✗ {test}")

        if self.generate_ground_truth:
            print(f"\n{Fore.YELLOW}Ground truth files generated in: {self.ground_truth_dir}{Style.RESET_ALL}")

        return len(self.failed_tests) == 0


def main():
    parser = argparse.ArgumentParser(
        description='Scenario test framework for tml.py',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__
    )

    parser.add_argument(
        '--generate-ground-truth',
        action='store_true',
        help='Generate ground truth files instead of comparing with them'
    )

    parser.add_argument(
        '--test-name',
        help='Run only tests matching this name pattern (and the scenarios they need)'
    )

    parser.add_argument(
        '--slow',
        action='store_true',
        help='Include slow scenarios (full gradient suite, complexity envelopes, desk run)'
    )

    parser.add_argument(
        '--verbose', '-v',
        action='store_true',
        help='Verbose output'
    )

    parser.add_argument(
        '--keep-test-data',
        action='store_true',
        help='Keep test data after tests complete'
    )

    args = parser.parse_args()

    # Create test framework
    framework = TestFramework(
        generate_ground_truth=args.generate_ground_truth,
        verbose=args.verbose,
        keep_test_data=args.keep_test_data,
        slow=args.slow
    )

    try:
        # Setup test data
        if not framework.setup_test_data():
            framework.log("Failed to setup test data", "ERROR")
            return 1

        # Run tests
        if not framework.run_all_tests(args.test_name):
            framework.log("Failed to run tests", "ERROR")
            return 1

        # Print summary
        success = framework.print_summary()

        return 0 if success else 1

    except KeyboardInterrupt:
        framework.log("Tests interrupted by user", "WARNING")
        return 1
    except Exception as e:
        framework.log(f"Unexpected error: {e}", "ERROR")
        return 1
    finally:
        framework.cleanup()


if __name__ == "__main__":
    sys.exit(main())
