#!/usr/bin/env python3
"""
Смоук-тесты обучения на синтетике.
Уменьшенное переобучение при lr 0.1 и моменте 0.9 идёт всегда; полный прогон
на 8 сценах 80x60 включается переменной DDCN_SLOW_TESTS=1.
"""

import math
import os
import sys
import logging
import tempfile
from fractions import Fraction
from unittest import SkipTest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from config import Config
from dataset_io import synthetic_dataset
from network import build_network
from trainer import TrainConfig, Trainer, evaluate, train_both

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

SLOW = os.getenv('DDCN_SLOW_TESTS', '0') == '1'


def _train_losses(trainer: Trainer, phase: int = 1):
    return [train for p, _, train, _ in trainer.history if p == phase]


def test_zero_lr_gives_flat_curve():
    dataset = synthetic_dataset(2, 0, (16, 12))
    network = build_network("ours", Fraction(1, 16), (16, 12))
    config = TrainConfig(learning_rate=0.0, batch_size=2, epochs_phase1=3, seed=0)
    trainer = Trainer(network, dataset, config)
    trainer.run_phase(1)
    losses = _train_losses(trainer)
    assert len(losses) == 3
    assert losses[0] == losses[1] == losses[2]


def test_full_batch_descent_lowers_loss():
    dataset = synthetic_dataset(2, 1, (16, 12))
    network = build_network("ours", Fraction(1, 16), (16, 12), seed=1)
    config = TrainConfig(learning_rate=0.1, momentum=0.0, batch_size=2, epochs_phase1=5, seed=1)
    trainer = Trainer(network, dataset, config)
    trainer.run_phase(1)
    losses = _train_losses(trainer)
    logger.info(f"📉 train loss: {losses[0]:.6g} -> {losses[-1]:.6g}")
    assert losses[-1] < losses[0]


def test_default_schedule_overfits_small_set():
    """lr 0.1, момент 0.9 (значения по умолчанию): 4 сцены 32x24, width 1/16, обе фазы без расхождения"""
    defaults = TrainConfig()
    assert (defaults.learning_rate, defaults.momentum) == (0.1, 0.9)
    dataset = synthetic_dataset(4, 3, (32, 24))
    network = build_network("ours", Fraction(1, 16), (32, 24), seed=3)
    config = TrainConfig(batch_size=4, epochs_phase1=120, epochs_phase2=40, seed=3,
                         width_scale=Fraction(1, 16), threads=Config.THREADS)
    trainer = Trainer(network, dataset, config)

    trainer.run_phase(1)
    coarse = _train_losses(trainer, 1)
    logger.info(f"📉 фаза 1: {coarse[0]:.6g} -> {coarse[-1]:.6g}")
    assert all(math.isfinite(loss) for loss in coarse)
    assert max(coarse[len(coarse) // 2:]) < 10 * coarse[0]
    assert coarse[-1] < 0.5 * coarse[0]

    trainer.run_phase(2)
    fine = _train_losses(trainer, 2)
    logger.info(f"📉 фаза 2: {fine[0]:.6g} -> {fine[-1]:.6g}")
    assert all(math.isfinite(loss) for loss in fine)
    assert fine[-1] < fine[0]


def test_vgg_baseline_trains():
    dataset = synthetic_dataset(2, 2, (80, 60))
    network = build_network("vgg", Fraction(1, 8), (80, 60), seed=2)
    config = TrainConfig(batch_size=2, epochs_phase1=2, epochs_phase2=1, seed=2)
    with tempfile.TemporaryDirectory() as tmp:
        final = train_both(network, dataset, config, tmp)
        assert (final.phase, final.epoch) == (2, 1)
        with open(os.path.join(tmp, 'train.log'), encoding='utf-8') as f:
            assert len(f.read().splitlines()) == 3


def test_overfit_eight_scenes():
    """Переобучение 8 сцен 80x60 при width_scale 1/8: фаза 1 до L < 0.01, обе фазы до L < 0.02"""
    if not SLOW:
        raise SkipTest("DDCN_SLOW_TESTS не задан")
    dataset = synthetic_dataset(8, 0, (80, 60))
    network = build_network("ours", Fraction(1, 8), (80, 60), seed=0)
    config = TrainConfig(batch_size=8, epochs_phase1=300, epochs_phase2=300, seed=0,
                         width_scale=Fraction(1, 8), threads=Config.THREADS)
    trainer = Trainer(network, dataset, config)
    trainer.run_phase(1)
    coarse_loss = _train_losses(trainer)[-1]
    logger.info(f"📏 после фазы 1: train L={coarse_loss:.6g}")
    assert coarse_loss < 0.01

    trainer.run_phase(2)
    both = evaluate(network, dataset, 'train')
    logger.info(f"📏 после фазы 2: {both.line()}")
    assert both.L < 0.02


if __name__ == "__main__":
    tests = [
        test_zero_lr_gives_flat_curve,
        test_full_batch_descent_lowers_loss,
        test_default_schedule_overfits_small_set,
        test_vgg_baseline_trains,
        test_overfit_eight_scenes,
    ]
    failed = 0
    for test in tests:
        try:
            test()
            logger.info(f"✅ {test.__name__}")
        except SkipTest as e:
            logger.info(f"⏭️ {test.__name__}: пропущен ({e})")
        except Exception as e:
            logger.error(f"❌ {test.__name__}: {e!r}")
            failed += 1
    sys.exit(1 if failed else 0)
