"""
Масштабно-инвариантная ошибка: сдвиг alpha, D, парная функция потерь L,
её O(n) переформулировка и аналитический градиент с маскированием невалидной глубины
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np

from errors import DomainError, EmptyMaskError, ShapeError
from tensor_core import Tensor4

logger = logging.getLogger(__name__)

# Нижняя граница глубины перед логарифмом, м
DEPTH_FLOOR_M = 1e-3

ArrayLike = Union[Tensor4, np.ndarray]


def _as_array(values: ArrayLike) -> np.ndarray:
    if isinstance(values, Tensor4):
        values = values.data
    return np.asarray(values, dtype=np.float64)


def _exact_sum(values) -> float:
    """Точная сумма fsum; при inf/NaN или переполнении отдаёт обычную сумму numpy, не бросая исключений"""
    values = np.asarray(values, dtype=np.float64)
    if np.all(np.isfinite(values)):
        try:
            return math.fsum(values)
        except OverflowError:
            pass
    with np.errstate(all='ignore'):
        return float(np.sum(values))


@dataclass(frozen=True, eq=False)
class LogDepthPair:
    """
    y_pred: предсказанная log-глубина, y_true: глубина в метрах (логарифмируется здесь),
    mask: валидные пиксели. Пиксели вне маски не входят ни в одну сумму.
    """
    y_pred: np.ndarray
    y_true: np.ndarray
    mask: np.ndarray
    log_true: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        y_pred = _as_array(self.y_pred)
        y_true = _as_array(self.y_true)
        mask = np.asarray(self.mask, dtype=bool)
        if not (y_pred.shape == y_true.shape == mask.shape):
            raise ShapeError(f"формы не совпадают: {y_pred.shape}, {y_true.shape}, {mask.shape}")
        if np.any(mask & ~(y_true > 0)):
            raise DomainError("неположительная глубина ground truth на валидном пикселе")
        if not np.all(np.isfinite(y_true[mask])):
            raise DomainError("ground truth содержит inf/NaN на валидном пикселе")

        log_true = np.zeros_like(y_true)
        log_true[mask] = np.log(np.maximum(y_true[mask], DEPTH_FLOOR_M))
        object.__setattr__(self, 'y_pred', y_pred)
        object.__setattr__(self, 'y_true', y_true)
        object.__setattr__(self, 'mask', mask)
        object.__setattr__(self, 'log_true', log_true)

    @classmethod
    def from_log_prediction(cls, y_pred: ArrayLike, depth_true: ArrayLike,
                            mask: Optional[np.ndarray] = None) -> "LogDepthPair":
        """Маска по умолчанию: глубина > 0 (нулевые показания сенсора исключаются)"""
        depth = _as_array(depth_true)
        if mask is None:
            mask = depth > 0
        return cls(_as_array(y_pred), depth, mask)

    @classmethod
    def from_depths(cls, depth_pred: ArrayLike, depth_true: ArrayLike,
                    mask: Optional[np.ndarray] = None) -> "LogDepthPair":
        pred = _as_array(depth_pred)
        depth = _as_array(depth_true)
        if mask is None:
            mask = depth > 0
        mask = np.asarray(mask, dtype=bool)
        if np.any(mask & ~(pred > 0)):
            raise DomainError("неположительная предсказанная глубина на валидном пикселе")
        log_pred = np.zeros_like(pred)
        log_pred[mask] = np.log(pred[mask])
        return cls(log_pred, depth, mask)

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())

    def d_values(self) -> np.ndarray:
        """d_i = log y_i - log y*_i по валидным пикселям"""
        return self.y_pred[self.mask] - self.log_true[self.mask]

    def d_field(self) -> np.ndarray:
        out = np.zeros_like(self.y_pred)
        out[self.mask] = self.d_values()
        return out

    def require(self, minimum: int):
        if self.n_valid < minimum:
            raise EmptyMaskError(f"валидных пикселей {self.n_valid}, нужно минимум {minimum}")


@dataclass(frozen=True, eq=False)
class LossReport:
    loss: float
    d_field: np.ndarray
    alpha: float
    grad: np.ndarray


def alpha(pair: LogDepthPair) -> float:
    """(1/n) sum(log y*_i - log y_i): точный минимизатор D по сдвигу"""
    pair.require(1)
    return -_exact_sum(pair.d_values()) / pair.n_valid


def scale_invariant_D(pair: LogDepthPair, shift: Optional[float] = None) -> float:
    """D = 1/(2n) sum (d_i + alpha)^2; shift позволяет подставить произвольный сдвиг"""
    pair.require(1)
    t = alpha(pair) if shift is None else shift
    d = pair.d_values()
    return _exact_sum((d + t) ** 2) / (2 * pair.n_valid)


def loss_reformulated(pair: LogDepthPair) -> float:
    """(1/n) sum d_i^2 - (1/n^2)(sum d_i)^2, считается как дисперсия поля d"""
    pair.require(2)
    d = pair.d_values()
    centered = d - _exact_sum(d) / d.size
    return _exact_sum(centered * centered) / d.size


def loss_pairwise_bruteforce(pair: LogDepthPair) -> float:
    """Явная двойная сумма O(n^2). Только как оракул"""
    pair.require(2)
    y = pair.y_pred[pair.mask]
    t = pair.log_true[pair.mask]
    n = y.size
    total = 0.0
    for i in range(n):
        for j in range(n):
            diff = (y[i] - y[j]) - (t[i] - t[j])
            total += diff * diff
    return total / (2 * n * n)


def loss_gradient(pair: LogDepthPair) -> np.ndarray:
    """dL/dd_i = (2/n) d_i - (2/n^2) sum d_j; d_i линейна по log-предсказанию; ноль вне маски"""
    pair.require(2)
    n = pair.n_valid
    d = pair.d_values()
    grad = np.zeros_like(pair.y_pred)
    grad[pair.mask] = (2.0 / n) * (d - _exact_sum(d) / n)
    return grad


def loss_pairwise(pair: LogDepthPair) -> LossReport:
    """Функция потерь обучения; считается через O(n) форму"""
    pair.require(2)
    return LossReport(
        loss=loss_reformulated(pair),
        d_field=pair.d_field(),
        alpha=alpha(pair),
        grad=loss_gradient(pair),
    )


def rmse_log(pair: LogDepthPair) -> float:
    pair.require(1)
    d = pair.d_values()
    return math.sqrt(_exact_sum(d * d) / d.size)


def batch_loss(log_pred: np.ndarray, depth_true: np.ndarray,
               mask: np.ndarray) -> Tuple[float, np.ndarray, List[float]]:
    """
    Среднее по изображениям батча и градиент этого среднего.
    Формулы заданы на одну карту глубины, поэтому пиксели разных изображений не смешиваются.
    """
    losses = []
    grad = np.zeros(log_pred.shape, dtype=np.float64)
    batch = log_pred.shape[0]
    for b in range(batch):
        pair = LogDepthPair(log_pred[b], depth_true[b], mask[b])
        report = loss_pairwise(pair)
        losses.append(report.loss)
        grad[b] = report.grad / batch
    return _exact_sum(losses) / batch, grad, losses
