"""
SGD с моментом, двухфазное обучение (coarse, затем fine при замороженном coarse),
чекпоинты по эпохам и оценка по сплиту
"""

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, Optional, Tuple

import numpy as np

from arch_model import LayerKind
from checkpoint import Checkpoint, save_checkpoint
from config import parse_bool, parse_size
from dataset_io import Batch, Dataset, batch_iter
from errors import ConfigError, DatasetError, DdcnError, DivergenceError, FingerprintError, ShapeError
from network import DepthNetwork, build_network
from si_loss import LogDepthPair, loss_pairwise, loss_reformulated, rmse_log, scale_invariant_D
from tensor_core import Precision, Tensor4

logger = logging.getLogger(__name__)

PHASE_COARSE = 1
PHASE_FINE = 2

# theta в чекпоинте, рабочий вес: sqrt(2 / fan_in) * theta
WEIGHT_INIT = "uniform_fanin_gain"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    batch_size: int = 16
    epochs_phase1: int = 30
    epochs_phase2: int = 30
    seed: int = 0
    width_scale: Fraction = Fraction(1)
    freeze_coarse_in_phase2: bool = True
    threads: int = 1
    snapshot_every: int = 0
    zero_init_fine_output: bool = False

    def __post_init__(self):
        errors = []
        # lr = 0 допустим: оптимизатор вырождается в no-op
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            errors.append(f"learning_rate={self.learning_rate}")
        if not 0 <= self.momentum < 1:
            errors.append(f"momentum={self.momentum} (нужно [0, 1))")
        if self.batch_size < 1:
            errors.append(f"batch_size={self.batch_size}")
        if self.epochs_phase1 < 0 or self.epochs_phase2 < 0:
            errors.append("число эпох не может быть отрицательным")
        if self.threads < 1:
            errors.append(f"threads={self.threads}")
        if self.snapshot_every < 0:
            errors.append(f"snapshot_every={self.snapshot_every}")
        if errors:
            raise ConfigError(f"Ошибки конфигурации обучения: {', '.join(errors)}")


def sgd_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
             velocities: Dict[str, np.ndarray],
             config: TrainConfig) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """v <- m*v - lr*g; p <- p + v. Возвращает новые словари, входные не меняются"""
    if set(params) != set(grads) or set(params) != set(velocities):
        raise ShapeError("sgd_step: наборы params, grads и velocities не совпадают")
    new_params, new_velocities = {}, {}
    for name, value in params.items():
        grad, velocity = grads[name], velocities[name]
        if not (value.shape == grad.shape == velocity.shape):
            raise ShapeError(f"sgd_step: {name}: {value.shape}, {grad.shape}, {velocity.shape}")
        v = (config.momentum * velocity - config.learning_rate * grad).astype(value.dtype)
        new_velocities[name] = v
        new_params[name] = (value + v).astype(value.dtype)
    return new_params, new_velocities


@dataclass(frozen=True)
class EvalMetrics:
    L: float
    D: float
    rmse_log: float
    n_images: int

    def line(self) -> str:
        return f"L={self.L:.17g} D={self.D:.17g} rmse_log={self.rmse_log:.17g} n_images={self.n_images}"


def network_metadata(network: DepthNetwork, config: TrainConfig, phase: int, epoch: int) -> Dict[str, str]:
    """Всё, что нужно для пересборки той же сети из чекпоинта, плюс эхо конфигурации"""
    pool = any(layer.kind is LayerKind.MAXPOOL for layer in network.fine.spec.layers)
    nearest = any(layer.kind is LayerKind.UPSAMPLE for layer in network.coarse.spec.layers)
    h, w = network.output_size
    return {
        'arch_fingerprint': network.fingerprint(),
        'arch': network.arch,
        'width_scale': str(network.width_scale),
        'input': f"{h}x{w}",
        'pool_after_fine_conv': str(pool).lower(),
        'vgg_upsample': 'nearest' if nearest else 'reshape',
        'precision': network.coarse.precision.value,
        'init': WEIGHT_INIT,
        'phase': str(phase),
        'epoch': str(epoch),
        'seed': str(config.seed),
        'lr': repr(config.learning_rate),
        'momentum': repr(config.momentum),
        'batch': str(config.batch_size),
        'epochs_phase1': str(config.epochs_phase1),
        'epochs_phase2': str(config.epochs_phase2),
        'freeze_coarse': str(config.freeze_coarse_in_phase2).lower(),
    }


def network_from_checkpoint(checkpoint: Checkpoint) -> DepthNetwork:
    """Собирает сеть по метаданным и загружает параметры; сверяет отпечаток архитектуры"""
    meta = checkpoint.metadata
    if meta.get('init', WEIGHT_INIT) != WEIGHT_INIT:
        raise FingerprintError(f"init={meta['init']}: веса сохранены в другой параметризации, нужна {WEIGHT_INIT}")
    try:
        network = build_network(
            arch=meta['arch'],
            width_scale=Fraction(meta['width_scale']),
            input_size=parse_size(meta['input']),
            precision=Precision.parse(meta.get('precision', 'f32')),
            pool_after_conv=parse_bool(meta.get('pool_after_fine_conv', 'true')),
            upsample_mode=meta.get('vgg_upsample', 'reshape'),
        )
    except KeyError as e:
        raise FingerprintError(f"в метаданных чекпоинта нет ключа {e}")
    if network.fingerprint() != checkpoint.fingerprint:
        raise FingerprintError("отпечаток архитектуры чекпоинта не совпадает с собранной сетью")
    network.load_params(checkpoint.params)
    return network


class Trainer:
    """
    Единственный писатель параметров. Прямой/обратный проход батча
    распараллелен по образцам; градиенты суммируются в порядке образцов.
    """

    def __init__(self, network: DepthNetwork, dataset: Dataset, config: TrainConfig,
                 out_dir: Optional[str] = None, append_log: bool = False):
        self.network = network
        self.dataset = dataset
        self.config = config
        self.out_dir = out_dir
        self.velocities = {name: np.zeros_like(value) for name, value in network.params.items()}
        self.history: List[Tuple[int, int, float, float]] = []
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            if not append_log:
                open(self._log_path(), 'w', encoding='utf-8').close()

    def _log_path(self) -> str:
        return os.path.join(self.out_dir, 'train.log')

    def restore(self, checkpoint: Checkpoint):
        """Параметры и скорости из чекпоинта: продолжение той же траектории"""
        if checkpoint.fingerprint != self.network.fingerprint():
            raise FingerprintError("чекпоинт собран для другой архитектуры")
        self.network.load_params(checkpoint.params)
        for name in self.velocities:
            if name in checkpoint.velocities:
                self.velocities[name] = np.array(checkpoint.velocities[name],
                                                 dtype=self.velocities[name].dtype, copy=True)

    def checkpoint(self, phase: int, epoch: int) -> Checkpoint:
        return Checkpoint(
            params={name: value.copy() for name, value in self.network.params.items()},
            velocities={name: value.copy() for name, value in self.velocities.items()},
            metadata=network_metadata(self.network, self.config, phase, epoch),
        )

    # ------------------------------------------------------------ шаг

    def _trainable(self, phase: int) -> List[str]:
        names = list(self.network.fine.params) if phase == PHASE_FINE else []
        if phase == PHASE_COARSE or not self.config.freeze_coarse_in_phase2:
            names = list(self.network.coarse.params) + names
        return names

    def _sample_step(self, phase: int, batch: Batch, i: int) -> Tuple[Optional[float], Dict[str, np.ndarray]]:
        """Loss одного изображения и его вклад в градиент среднего по батчу"""
        mask = batch.mask[i, 0]
        if int(mask.sum()) < 2:
            logger.warning(f"⚠️ {batch.ids[i]}: меньше 2 валидных пикселей, образец пропущен")
            return None, {}
        rgb = Tensor4(batch.rgb.data[i:i + 1])
        rgb_coarse = Tensor4(batch.rgb_coarse.data[i:i + 1])
        coarse = self.network.coarse
        coarse_out, coarse_tape = coarse.forward(rgb_coarse)

        if phase == PHASE_COARSE:
            out = coarse_out
        else:
            out, fine_tape = self.network.fine.forward(rgb, side=coarse_out)

        if not np.all(np.isfinite(out.data)):
            logger.error(f"❌ {batch.ids[i]}: выход сети содержит inf/NaN")
            return float('nan'), {}
        try:
            report = loss_pairwise(LogDepthPair(out.data[0, 0], batch.depth[i, 0], mask))
        except DdcnError:
            raise
        except (ValueError, ArithmeticError) as e:
            logger.error(f"❌ {batch.ids[i]}: численный сбой в функции потерь: {e}")
            return float('nan'), {}
        if not math.isfinite(report.loss) or not np.all(np.isfinite(report.grad)):
            return float('nan'), {}
        upstream = Tensor4((report.grad / len(batch))[None, None].astype(out.data.dtype))

        if phase == PHASE_COARSE:
            return report.loss, coarse.backward(coarse_tape, upstream).params
        fine_grads = self.network.fine.backward(fine_tape, upstream)
        grads = dict(fine_grads.params)
        if not self.config.freeze_coarse_in_phase2:
            grads.update(coarse.backward(coarse_tape, fine_grads.d_side).params)
        return report.loss, grads

    def _batch_grads(self, phase: int, batch: Batch) -> Tuple[List[float], Dict[str, np.ndarray]]:
        def step(i: int):
            return self._sample_step(phase, batch, i)

        if self.config.threads > 1 and len(batch) > 1:
            with ThreadPoolExecutor(max_workers=min(self.config.threads, len(batch))) as pool:
                results = list(pool.map(step, range(len(batch))))
        else:
            results = [step(i) for i in range(len(batch))]

        losses: List[float] = []
        total: Dict[str, np.ndarray] = {}
        for loss, grads in results:
            if loss is None:
                continue
            losses.append(loss)
            for name, grad in grads.items():
                if name in total:
                    total[name] = total[name] + grad.astype(np.float64)
                else:
                    total[name] = grad.astype(np.float64)
        # пропущенные образцы не входят в среднее: градиенты нормированы на len(batch)
        if losses and len(losses) != len(batch):
            scale = len(batch) / len(losses)
            total = {name: grad * scale for name, grad in total.items()}
        return losses, total

    # ------------------------------------------------------------ фазы

    def _split_loss(self, phase: int, split: str) -> float:
        try:
            samples = self.dataset.split(split)
        except DatasetError:
            return float('nan')
        if not samples:
            return float('nan')
        losses = []
        for batch in batch_iter(self.dataset, split, self.config.batch_size, 0,
                                self.network.coarse_input_size):
            stages = "coarse" if phase == PHASE_COARSE else "both"
            out = self.network.predict(batch.rgb, batch.rgb_coarse, stages)
            for i in range(len(batch)):
                pair = LogDepthPair(out.data[i, 0], batch.depth[i, 0], batch.mask[i, 0])
                if pair.n_valid >= 2:
                    losses.append(loss_reformulated(pair))
        return math.fsum(losses) / len(losses) if losses else float('nan')

    def _write_log(self, line: str):
        if self.out_dir:
            with open(self._log_path(), 'a', encoding='utf-8') as f:
                f.write(line + "\n")

    def run_phase(self, phase: int, start_epoch: int = 0) -> Checkpoint:
        epochs = self.config.epochs_phase1 if phase == PHASE_COARSE else self.config.epochs_phase2
        trainable = self._trainable(phase)
        label = "coarse" if phase == PHASE_COARSE else "fine"
        logger.info(f"🚀 Фаза {phase} ({label}): эпохи {start_epoch + 1}..{epochs}, "
                    f"обучаемых тензоров {len(trainable)}")

        for epoch in range(start_epoch, epochs):
            image_losses: List[float] = []
            for batch_index, batch in enumerate(batch_iter(self.dataset, 'train', self.config.batch_size,
                                                           epoch, self.network.coarse_input_size)):
                losses, grads = self._batch_grads(phase, batch)
                if not losses:
                    logger.warning(f"⚠️ Батч {batch_index}: нет валидных образцов, шаг пропущен")
                    continue
                if not all(math.isfinite(loss) for loss in losses) \
                        or not all(np.all(np.isfinite(g)) for g in grads.values()):
                    bad = next((loss for loss in losses if not math.isfinite(loss)), float('nan'))
                    raise DivergenceError(phase, epoch + 1, batch_index, batch.ids, bad)
                batch_loss = math.fsum(losses) / len(losses)
                if logger.isEnabledFor(logging.DEBUG):
                    norms = ", ".join(f"{name}={float(np.linalg.norm(grads[name])):.3e}" for name in trainable)
                    logger.debug(f"🔍 Батч {batch_index} ({', '.join(batch.ids)}): loss {batch_loss:.6g}; {norms}")

                params = self.network.params
                current = {name: params[name] for name in trainable}
                cast = {name: grads[name].astype(current[name].dtype) for name in trainable}
                velocity = {name: self.velocities[name] for name in trainable}
                updated, velocity = sgd_step(current, cast, velocity, self.config)
                self.network.coarse.load_params(updated, strict=False)
                self.network.fine.load_params(updated, strict=False)
                self.velocities.update(velocity)
                image_losses.extend(losses)

            train_loss = math.fsum(image_losses) / len(image_losses) if image_losses else float('nan')
            val_loss = self._split_loss(phase, 'val')
            self.history.append((phase, epoch + 1, train_loss, val_loss))
            self._write_log(f"epoch {epoch + 1} phase {phase} train_loss {train_loss:.17g} val_loss {val_loss:.17g}")
            logger.info(f"📈 Фаза {phase}, эпоха {epoch + 1}/{epochs}: train {train_loss:.6g}, val {val_loss:.6g}")

            if self.out_dir:
                ckpt = self.checkpoint(phase, epoch + 1)
                save_checkpoint(os.path.join(self.out_dir, f"phase{phase}_latest.ddcn"), ckpt)
                if self.config.snapshot_every and (epoch + 1) % self.config.snapshot_every == 0:
                    save_checkpoint(os.path.join(self.out_dir, f"phase{phase}_epoch{epoch + 1:04d}.ddcn"), ckpt)

        return self.checkpoint(phase, max(epochs, start_epoch))


def train_phase1(network: DepthNetwork, dataset: Dataset, config: TrainConfig,
                 out_dir: Optional[str] = None, resume: Optional[Checkpoint] = None) -> Checkpoint:
    trainer = Trainer(network, dataset, config, out_dir, append_log=resume is not None)
    start = 0
    if resume is not None:
        trainer.restore(resume)
        start = resume.epoch if resume.phase == PHASE_COARSE else config.epochs_phase1
    return trainer.run_phase(PHASE_COARSE, start)


def train_phase2(coarse_checkpoint: Optional[Checkpoint], network: DepthNetwork, dataset: Dataset,
                 config: TrainConfig, out_dir: Optional[str] = None,
                 resume: Optional[Checkpoint] = None) -> Checkpoint:
    """coarse_checkpoint: результат фазы 1; его отпечаток обязан совпасть с сетью"""
    trainer = Trainer(network, dataset, config, out_dir, append_log=resume is not None)
    start = 0
    if resume is not None:
        trainer.restore(resume)
        start = resume.epoch if resume.phase == PHASE_FINE else 0
    elif coarse_checkpoint is not None:
        if coarse_checkpoint.fingerprint != network.fingerprint():
            raise FingerprintError("чекпоинт фазы 1 собран для другой архитектуры")
        network.coarse.load_params(coarse_checkpoint.params)
        trainer.velocities.update({name: coarse_checkpoint.velocities[name].copy()
                                   for name in network.coarse.params
                                   if name in coarse_checkpoint.velocities})
    return trainer.run_phase(PHASE_FINE, start)


def train_both(network: DepthNetwork, dataset: Dataset, config: TrainConfig,
               out_dir: Optional[str] = None, resume: Optional[Checkpoint] = None) -> Checkpoint:
    """Фаза 1, затем фаза 2 в одном Trainer; resume продолжает с сохранённой фазы и эпохи"""
    trainer = Trainer(network, dataset, config, out_dir, append_log=resume is not None)
    start1, start2 = 0, 0
    if resume is not None:
        trainer.restore(resume)
        if resume.phase == PHASE_COARSE:
            start1 = resume.epoch
        else:
            start1, start2 = config.epochs_phase1, resume.epoch
    if start1 < config.epochs_phase1:
        trainer.run_phase(PHASE_COARSE, start1)
    return trainer.run_phase(PHASE_FINE, start2)


def evaluate(network: Optional[DepthNetwork], dataset: Dataset, split: str = 'test',
             mode: str = 'model', scale: float = 2.0, batch_size: int = 16) -> EvalMetrics:
    """
    Метрики усредняются по пикселям изображения, затем по изображениям.
    mode: model: предсказание сети; passthrough: сама ground truth; scaled: truth * scale.
    """
    if mode not in ('model', 'passthrough', 'scaled'):
        raise ConfigError(f"--mode: model, passthrough или scaled, получено {mode}")
    if mode == 'model' and network is None:
        raise ConfigError("режим model требует чекпоинт")
    if mode == 'scaled' and not scale > 0:
        raise ConfigError(f"--scale должен быть > 0, получено {scale}")

    coarse_size = network.coarse_input_size if network is not None else None
    values: Dict[str, List[float]] = {'L': [], 'D': [], 'rmse_log': []}
    for batch in batch_iter(dataset, split, batch_size, 0, coarse_size):
        if mode == 'model':
            log_pred = network.predict(batch.rgb, batch.rgb_coarse).data[:, 0].astype(np.float64)
        for i in range(len(batch)):
            depth, mask = batch.depth[i, 0], batch.mask[i, 0]
            if mode == 'model':
                pair = LogDepthPair(log_pred[i], depth, mask)
            else:
                factor = scale if mode == 'scaled' else 1.0
                pair = LogDepthPair.from_depths(np.where(mask, depth * factor, 1.0), depth, mask)
            if pair.n_valid < 2:
                logger.warning(f"⚠️ {batch.ids[i]}: меньше 2 валидных пикселей, пропущен")
                continue
            values['L'].append(loss_reformulated(pair))
            values['D'].append(scale_invariant_D(pair))
            values['rmse_log'].append(rmse_log(pair))

    count = len(values['L'])
    if count == 0:
        raise DatasetError(f"сплит {split}: нет изображений для оценки")
    mean = {key: math.fsum(items) / count for key, items in values.items()}
    metrics = EvalMetrics(mean['L'], mean['D'], mean['rmse_log'], count)
    logger.info(f"📏 Оценка {split} ({mode}): {metrics.line()}")
    return metrics
