#!/usr/bin/env python3
"""
DDCN - dilated fully-convolutional depth estimation: analyze, gradcheck, synth, train, predict, eval
"""

import os
import sys

# Однопоточный BLAS задаётся до импорта numpy
if '--deterministic' in sys.argv[1:]:
    for _var in ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS', 'MKL_NUM_THREADS'):
        os.environ[_var] = '1'

import argparse
import logging
from fractions import Fraction
from typing import Callable, Dict, List, Optional

import numpy as np

# Импорты из src
sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), 'src'))
from arch_model import builtin_arch, count_parameters, geometry_report, render_geometry
from checkpoint import load_checkpoint
from config import Config, load_config_file, parse_bool, parse_size
from dataset_io import (
    ManifestEntry, load_manifest_dataset, read_ppm, resize_bilinear, save_pair,
    synth_scene, synthetic_dataset, write_manifest, write_pgm,
)
from errors import ConfigError, DdcnError, DivergenceError, GradcheckError
from gradcheck import run_gradcheck
from network import build_network
from tensor_core import Precision, Tensor4
from trainer import (
    TrainConfig, evaluate, network_from_checkpoint, train_both, train_phase1, train_phase2,
)

logger = logging.getLogger('ddcn')

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

# Всё, что не DdcnError: сбой арифметики numpy / fsum, код выхода 3
NUMERIC_FAILURES = (ArithmeticError, ValueError)


def setup_logging(level: str, log_dir: str):
    os.makedirs(log_dir, exist_ok=True)
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=[
            logging.FileHandler(os.path.join(log_dir, 'ddcn.log'), encoding='utf-8'),
            logging.StreamHandler()
        ]
    )


class CliParser(argparse.ArgumentParser):
    """Ошибка использования: код выхода 1"""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _fraction(text: str) -> Fraction:
    try:
        return Fraction(str(text))
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"ожидалось рациональное число, получено: {text}")


class Resolver:
    """Флаг > файл --config > Config (окружение / .env)"""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.file = load_config_file(args.config) if getattr(args, 'config', None) else {}
        self.resolved: Dict[str, object] = {}

    def get(self, key: str, default, cast: Callable = str):
        value = getattr(self.args, key, None)
        if value is None and key in self.file:
            value = self.file[key]
        if value is None:
            value = default
        try:
            value = cast(value) if value is not None else None
        except (TypeError, ValueError) as e:
            if isinstance(e, DdcnError):
                raise
            raise ConfigError(f"{key}: неверное значение {value!r}")
        self.resolved[key] = value
        return value

    def echo(self):
        for key, value in self.resolved.items():
            if isinstance(value, tuple):
                value = _size_text(value)
            elif isinstance(value, bool):
                value = str(value).lower()
            sys.stderr.write(f"# {key}={value}\n")
        sys.stderr.flush()


def _size_text(size) -> str:
    return f"{size[0]}x{size[1]}"


# ---------------------------------------------------------------- команды

def cmd_analyze(args, res: Resolver) -> int:
    size = res.get('input', '80x60', parse_size)
    width = res.get('width_scale', Config.WIDTH_SCALE, _fraction)
    pool = res.get('pool_after_fine_conv', Config.POOL_AFTER_FINE_CONV, parse_bool)
    upsample = res.get('vgg_upsample', Config.VGG_UPSAMPLE)
    res.echo()

    arch = builtin_arch(args.which, width, size, pool, upsample)
    report = count_parameters(arch)
    sys.stdout.write(arch.to_text())
    if args.geometry:
        sys.stdout.write("\n" + "\n".join(render_geometry(geometry_report(arch))) + "\n")
    sys.stdout.write("\n" + "\n".join(report.summary_lines()) + "\n")
    return 0


def cmd_gradcheck(args, res: Resolver) -> int:
    seed = res.get('seed', Config.SEED, int)
    precision = res.get('precision', 'f64', Precision.parse)
    instances = res.get('instances', 20, int)
    res.echo()

    results = run_gradcheck(seed, precision, instances, sabotage=args.sabotage)
    for result in results:
        print(result.line())
    failed = [r.op for r in results if not r.passed]
    if failed:
        raise GradcheckError(f"gradcheck FAIL: {', '.join(failed)}")
    return 0


def cmd_synth(args, res: Resolver) -> int:
    count = res.get('count', 8, int)
    out = res.get('out', None)
    size = res.get('input', '80x60', parse_size)
    seed = res.get('seed', Config.SEED, int)
    res.echo()
    if not out:
        raise ConfigError("synth: нужен --out")
    if count < 1:
        raise ConfigError(f"--count должен быть >= 1, получено {count}")

    os.makedirs(out, exist_ok=True)
    entries = []
    for i in range(count):
        sample = synth_scene(seed, size, i)
        rgb_name, depth_name = f"{sample.id}.ppm", f"{sample.id}.pgm"
        save_pair(sample, os.path.join(out, rgb_name), os.path.join(out, depth_name))
        entries.append(ManifestEntry(sample.id, rgb_name, depth_name))
    manifest = os.path.join(out, 'manifest.tsv')
    write_manifest(manifest, entries)
    logger.info(f"🖼️ Записано {count} синтетических пар, манифест {manifest}")
    print(manifest)
    return 0


def _dataset_source(res: Resolver):
    manifest = res.get('manifest', None)
    synthetic = res.get('synthetic', None, int)
    if (manifest is None) == (synthetic is None):
        raise ConfigError("нужен ровно один из --manifest и --synthetic")
    return manifest, synthetic


def _load_dataset(source, size, seed: int, threads: int):
    manifest, synthetic = source
    if synthetic is not None:
        return synthetic_dataset(synthetic, seed, size)
    return load_manifest_dataset(manifest, size, seed, workers=threads)


def _threads(res: Resolver, deterministic: bool) -> int:
    threads = res.get('threads', Config.THREADS, int)
    if deterministic:
        threads = 1
        res.resolved['threads'] = 1
    if threads < 1:
        raise ConfigError(f"threads должен быть >= 1, получено {threads}")
    return threads


def cmd_train(args, res: Resolver) -> int:
    arch = res.get('arch', 'ours')
    width = res.get('width_scale', Config.WIDTH_SCALE, _fraction)
    size = res.get('input', '80x60', parse_size)
    epochs = res.get('epochs', Config.EPOCHS, int)
    config = TrainConfig(
        learning_rate=res.get('lr', Config.LEARNING_RATE, float),
        momentum=res.get('momentum', Config.MOMENTUM, float),
        batch_size=res.get('batch', Config.BATCH_SIZE, int),
        epochs_phase1=epochs,
        epochs_phase2=res.get('epochs_phase2', epochs, int),
        seed=res.get('seed', Config.SEED, int),
        width_scale=width,
        freeze_coarse_in_phase2=res.get('freeze_coarse', True, parse_bool),
        threads=_threads(res, args.deterministic),
        snapshot_every=res.get('snapshot_every', 0, int),
        zero_init_fine_output=res.get('zero_init_fine_output', False, parse_bool),
    )
    phase = res.get('phase', 'both')
    pool = res.get('pool_after_fine_conv', Config.POOL_AFTER_FINE_CONV, parse_bool)
    upsample = res.get('vgg_upsample', Config.VGG_UPSAMPLE)
    out = res.get('out', None)
    resume_path = res.get('resume', None)
    coarse_path = res.get('coarse_checkpoint', None)
    res.get('deterministic', args.deterministic, parse_bool)
    source = _dataset_source(res)
    res.echo()
    dataset = _load_dataset(source, size, config.seed, config.threads)
    if not out:
        raise ConfigError("train: нужен --out")
    if phase not in ('1', '2', 'both'):
        raise ConfigError(f"--phase: 1, 2 или both, получено {phase}")

    network = build_network(arch, width, size, config.seed, Precision.F32, pool, upsample,
                            config.zero_init_fine_output)
    resume = load_checkpoint(resume_path, network.fingerprint()) if resume_path else None

    if phase == '1':
        final = train_phase1(network, dataset, config, out, resume)
    elif phase == '2':
        coarse = load_checkpoint(coarse_path, network.fingerprint()) if coarse_path else None
        if coarse is None and resume is None:
            logger.warning("⚠️ Фаза 2 без чекпоинта фазы 1: coarse-стек остаётся случайным")
        final = train_phase2(coarse, network, dataset, config, out, resume)
    else:
        final = train_both(network, dataset, config, out, resume)

    print(f"phase={final.metadata['phase']} epoch={final.metadata['epoch']} out={out}")
    return 0


def _prepare_rgb(path: str, size, coarse_size):
    rgb = read_ppm(path).astype(np.float64) / 255.0
    fine, _ = resize_bilinear(rgb, size)
    coarse, _ = resize_bilinear(rgb, coarse_size)
    return (Tensor4(fine[None].astype(np.float32)), Tensor4(coarse[None].astype(np.float32)))


def cmd_predict(args, res: Resolver) -> int:
    checkpoint_path = res.get('checkpoint', None)
    rgb_path = res.get('rgb', None)
    out = res.get('out', None)
    preview = res.get('preview', None)
    res.echo()
    if not (checkpoint_path and rgb_path and out):
        raise ConfigError("predict: нужны --checkpoint, --rgb и --out")

    network = network_from_checkpoint(load_checkpoint(checkpoint_path))
    rgb, rgb_coarse = _prepare_rgb(rgb_path, network.output_size, network.coarse_input_size)
    log_depth = network.predict(rgb, rgb_coarse).data[0, 0].astype(np.float64)
    depth_m = np.exp(log_depth)
    depth_mm = np.clip(np.rint(depth_m * 1000.0), 1, 65535).astype(np.uint16)
    write_pgm(out, depth_mm, 65535)

    if preview:
        lo, hi = float(depth_m.min()), float(depth_m.max())
        span = hi - lo if hi > lo else 1.0
        write_pgm(preview, np.rint((depth_m - lo) / span * 255.0).astype(np.uint8), 255)

    stored = depth_mm.astype(np.float64) / 1000.0
    print(f"min={stored.min():.3f} max={stored.max():.3f} mean={stored.mean():.3f} "
          f"size={_size_text(depth_mm.shape)}")
    return 0


def cmd_eval(args, res: Resolver) -> int:
    mode = res.get('mode', 'model')
    scale = res.get('scale', 2.0, float)
    split = res.get('split', 'test')
    seed = res.get('seed', Config.SEED, int)
    checkpoint_path = res.get('checkpoint', None)
    threads = _threads(res, args.deterministic)
    if mode != 'model':
        size = res.get('input', '80x60', parse_size)
    source = _dataset_source(res)
    res.echo()

    network = None
    if mode == 'model':
        if not checkpoint_path:
            raise ConfigError("eval --mode model требует --checkpoint")
        network = network_from_checkpoint(load_checkpoint(checkpoint_path))
        size = network.output_size
    dataset = _load_dataset(source, size, seed, threads)

    metrics = evaluate(network, dataset, split, mode, scale)
    print(metrics.line())
    return 0


# ---------------------------------------------------------------- парсер

def build_parser() -> CliParser:
    parser = CliParser(prog='ddcn', description=__doc__.strip())
    sub = parser.add_subparsers(dest='command', required=True, parser_class=CliParser)

    common = CliParser(add_help=False)
    common.add_argument('--config', help='key=value файл; флаги имеют приоритет')
    common.add_argument('--deterministic', action='store_true',
                        help='однопоточный режим, побитово воспроизводимый')

    analyze = sub.add_parser('analyze', parents=[common], help='таблица слоёв и число параметров')
    analyze.add_argument('which', nargs='?', default='both', choices=['ours', 'vgg', 'both'])
    analyze.add_argument('--input')
    analyze.add_argument('--width-scale', dest='width_scale')
    analyze.add_argument('--pool-after-fine-conv', dest='pool_after_fine_conv')
    analyze.add_argument('--vgg-upsample', dest='vgg_upsample', choices=['reshape', 'nearest'])
    analyze.add_argument('--geometry', action='store_true', help='размеры и рецептивные поля по слоям')

    gradcheck = sub.add_parser('gradcheck', parents=[common], help='конечные разности против backward')
    gradcheck.add_argument('--seed')
    gradcheck.add_argument('--precision')
    gradcheck.add_argument('--instances')
    gradcheck.add_argument('--sabotage', action='store_true', help='испортить градиент свёртки')

    synth = sub.add_parser('synth', parents=[common], help='синтетические пары PPM/PGM и манифест')
    synth.add_argument('--count')
    synth.add_argument('--out')
    synth.add_argument('--input')
    synth.add_argument('--seed')

    train = sub.add_parser('train', parents=[common], help='двухфазное обучение')
    train.add_argument('--arch', choices=['ours', 'vgg'])
    train.add_argument('--width-scale', dest='width_scale')
    train.add_argument('--input')
    train.add_argument('--lr')
    train.add_argument('--momentum')
    train.add_argument('--batch')
    train.add_argument('--epochs')
    train.add_argument('--epochs-phase2', dest='epochs_phase2')
    train.add_argument('--seed')
    train.add_argument('--phase', choices=['1', '2', 'both'])
    train.add_argument('--freeze-coarse', dest='freeze_coarse')
    train.add_argument('--manifest')
    train.add_argument('--synthetic')
    train.add_argument('--out')
    train.add_argument('--resume')
    train.add_argument('--coarse-checkpoint', dest='coarse_checkpoint')
    train.add_argument('--snapshot-every', dest='snapshot_every')
    train.add_argument('--zero-init-fine-output', dest='zero_init_fine_output')
    train.add_argument('--pool-after-fine-conv', dest='pool_after_fine_conv')
    train.add_argument('--vgg-upsample', dest='vgg_upsample', choices=['reshape', 'nearest'])
    train.add_argument('--threads')

    predict = sub.add_parser('predict', parents=[common], help='карта глубины для одного PPM')
    predict.add_argument('--checkpoint')
    predict.add_argument('--rgb')
    predict.add_argument('--out')
    predict.add_argument('--preview')

    ev = sub.add_parser('eval', parents=[common], help='метрики L, D, rmse_log по сплиту')
    ev.add_argument('--checkpoint')
    ev.add_argument('--manifest')
    ev.add_argument('--synthetic')
    ev.add_argument('--split', choices=['train', 'val', 'test'])
    ev.add_argument('--mode', choices=['model', 'passthrough', 'scaled'])
    ev.add_argument('--scale')
    ev.add_argument('--input')
    ev.add_argument('--seed')
    ev.add_argument('--threads')
    return parser


COMMANDS = {
    'analyze': cmd_analyze,
    'gradcheck': cmd_gradcheck,
    'synth': cmd_synth,
    'train': cmd_train,
    'predict': cmd_predict,
    'eval': cmd_eval,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        Config.validate()
        setup_logging(Config.LOG_LEVEL, Config.LOG_DIR)
        return COMMANDS[args.command](args, Resolver(args))
    except DdcnError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        sys.stderr.write(f"error: {e}\n")
        return e.exit_code
    except KeyboardInterrupt:
        logger.info("Получен Ctrl+C, останавливаем...")
        return 130
    except NUMERIC_FAILURES as e:
        logger.exception(f"❌ Численный сбой: {type(e).__name__}: {e}")
        sys.stderr.write(f"error: numeric failure: {e}\n")
        return DivergenceError.exit_code
    except Exception as e:
        logger.exception(f"❌ Непредвиденная ошибка: {type(e).__name__}: {e}")
        sys.stderr.write(f"error: {type(e).__name__}: {e}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
