"""
Проверка аналитических градиентов центральными конечными разностями (64 бита, шаг 1e-5).
Скаляризация: s = sum(R * f(x)) со случайной проекцией R, аналитически ds/dx = backward(R).
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from errors import ConfigError
from nn_ops import (
    ConvParams, concat_channels, conv2d_dilated, conv_output_size, maxpool2d, relu,
    reshape_op, same_padding, upsample_nearest,
)
from si_loss import LogDepthPair, loss_gradient, loss_reformulated
from tensor_core import Precision, Rng, Tensor4

logger = logging.getLogger(__name__)

STEP = 1e-5
OP_TOLERANCE = 1e-4
LOSS_TOLERANCE = 1e-6


@dataclass
class OpResult:
    op: str
    instances: int
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"op={self.op} instances={self.instances} max_rel_err={self.max_rel_err:.3e} {status}"


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = STEP) -> np.ndarray:
    """Центральные разности по каждому элементу x"""
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = f(x)
        flat[i] = orig - step
        minus = f(x)
        flat[i] = orig
        out[i] = (plus - minus) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| / max(max|a|, max|n|); нормировка по всему тензору"""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(analytic), initial=0.0)),
                float(np.max(np.abs(numeric), initial=0.0)), 1e-12)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def _projected(op: Callable[[Tensor4], Tensor4], projection: np.ndarray) -> Callable[[np.ndarray], float]:
    def value(x: np.ndarray) -> float:
        return float(np.sum(projection * op(Tensor4(np.array(x))).data))
    return value


def _dims(rng: Rng, low: int, high: int) -> int:
    return int(rng.integers(low, high + 1))


def check_conv(rng: Rng, sabotage: bool = False) -> float:
    n, c, o = _dims(rng, 1, 2), _dims(rng, 1, 3), _dims(rng, 1, 3)
    h, w = _dims(rng, 4, 7), _dims(rng, 4, 7)
    k = int(rng.integers(0, 3)) * 2 + 1
    dilation = _dims(rng, 1, 3)
    stride = _dims(rng, 1, 2)
    padding = same_padding(k, dilation)
    if rng.integers(0, 2) and dilation * (k - 1) + 1 <= min(h, w):
        padding = (0, 0)
    x = rng.normal((n, c, h, w))
    weights = rng.normal((o, c, k, k))
    bias = rng.normal((o,))

    def forward(inp: np.ndarray, wts: np.ndarray, b: np.ndarray) -> Tensor4:
        p = ConvParams(Tensor4(np.array(wts)), b, dilation=dilation, stride=stride, padding=padding)
        return conv2d_dilated(Tensor4(np.array(inp)), p).output

    oh, ow = conv_output_size((h, w), k, dilation, padding, stride)
    projection = rng.normal((n, o, oh, ow))
    step = conv2d_dilated(Tensor4(x), ConvParams(Tensor4(weights), bias, dilation, stride, padding))
    analytic = step.backward(Tensor4(projection))
    d_weights = analytic.params['weight'] * (1.5 if sabotage else 1.0)

    errors = [
        relative_error(analytic.input.data,
                       numeric_grad(lambda v: float(np.sum(projection * forward(v, weights, bias).data)), x)),
        relative_error(d_weights,
                       numeric_grad(lambda v: float(np.sum(projection * forward(x, v, bias).data)), weights)),
        relative_error(analytic.params['bias'],
                       numeric_grad(lambda v: float(np.sum(projection * forward(x, weights, v).data)), bias)),
    ]
    return max(errors)


def check_relu(rng: Rng) -> float:
    shape = (_dims(rng, 1, 2), _dims(rng, 1, 3), _dims(rng, 2, 6), _dims(rng, 2, 6))
    # |x| > 0.01: шаг разностей не пересекает излом
    x = rng.uniform(0.01, 1.0, shape) * np.where(rng.uniform(0, 1, shape) < 0.5, -1.0, 1.0)
    projection = rng.normal(shape)
    analytic = relu(Tensor4(x)).backward(Tensor4(projection)).input.data
    return relative_error(analytic, numeric_grad(_projected(lambda t: relu(t).output, projection), x))


def check_maxpool(rng: Rng) -> float:
    n, c = _dims(rng, 1, 2), _dims(rng, 1, 2)
    h, w = _dims(rng, 4, 7), _dims(rng, 4, 7)
    window = _dims(rng, 2, 3)
    stride = _dims(rng, 1, 2)
    padding = (window - 1) // 2 if window % 2 and rng.integers(0, 2) else 0
    # различные значения с шагом 0.1: argmax не меняется от возмущения
    x = (rng.permutation(n * c * h * w).astype(np.float64) * 0.1).reshape(n, c, h, w)
    out = maxpool2d(Tensor4(x), window, stride, padding)
    projection = rng.normal(out.output.shape)
    analytic = out.backward(Tensor4(projection)).input.data
    numeric = numeric_grad(_projected(lambda t: maxpool2d(t, window, stride, padding).output, projection), x)
    return relative_error(analytic, numeric)


def check_upsample(rng: Rng) -> float:
    shape = (_dims(rng, 1, 2), _dims(rng, 1, 3), _dims(rng, 2, 5), _dims(rng, 2, 5))
    factor = (_dims(rng, 1, 3), _dims(rng, 1, 3))
    x = rng.normal(shape)
    out = upsample_nearest(Tensor4(x), factor)
    projection = rng.normal(out.output.shape)
    analytic = out.backward(Tensor4(projection)).input.data
    numeric = numeric_grad(_projected(lambda t: upsample_nearest(t, factor).output, projection), x)
    return relative_error(analytic, numeric)


def check_concat(rng: Rng) -> float:
    n, h, w = _dims(rng, 1, 2), _dims(rng, 2, 5), _dims(rng, 2, 5)
    a = rng.normal((n, _dims(rng, 1, 3), h, w))
    b = rng.normal((n, _dims(rng, 1, 3), h, w))
    out = concat_channels(Tensor4(a), Tensor4(b))
    projection = rng.normal(out.output.shape)
    analytic = out.backward(Tensor4(projection))
    num_a = numeric_grad(lambda v: float(np.sum(projection * concat_channels(Tensor4(np.array(v)), Tensor4(b)).output.data)), a)
    num_b = numeric_grad(lambda v: float(np.sum(projection * concat_channels(Tensor4(a), Tensor4(np.array(v))).output.data)), b)
    return max(relative_error(analytic.inputs[0].data, num_a), relative_error(analytic.inputs[1].data, num_b))


def check_reshape(rng: Rng) -> float:
    n, h, w = _dims(rng, 1, 2), _dims(rng, 2, 4), _dims(rng, 2, 4)
    x = rng.normal((n, h * w, 1, 1))
    target = (n, 1, h, w)
    out = reshape_op(Tensor4(x), target)
    projection = rng.normal(target)
    analytic = out.backward(Tensor4(projection)).input.data
    numeric = numeric_grad(_projected(lambda t: reshape_op(t, target).output, projection), x)
    return relative_error(analytic, numeric)


def check_loss(rng: Rng) -> float:
    h, w = _dims(rng, 2, 6), _dims(rng, 2, 6)
    y_pred = rng.normal((h, w))
    depth = rng.uniform(0.5, 10.0, (h, w))
    mask = rng.uniform(0, 1, (h, w)) < 0.8
    if mask.sum() < 2:
        mask[:] = True
    analytic = loss_gradient(LogDepthPair(y_pred, depth, mask))
    numeric = numeric_grad(lambda v: loss_reformulated(LogDepthPair(v, depth, mask)), y_pred)
    return relative_error(analytic, numeric)


def run_gradcheck(seed: int = 0, precision: Precision = Precision.F64, instances: int = 20,
                  sabotage: bool = False) -> List[OpResult]:
    """Все наборы по порядку; sabotage портит градиент весов свёртки (отрицательный контроль)"""
    if precision is not Precision.F64:
        raise ConfigError("gradcheck требует 64-битной точности (--precision f64)")
    if instances < 1:
        raise ConfigError(f"instances должен быть >= 1, получено {instances}")

    suites: Dict[str, Callable[[Rng], float]] = {
        'conv2d_dilated': lambda r: check_conv(r, sabotage),
        'relu': check_relu,
        'maxpool2d': check_maxpool,
        'upsample_nearest': check_upsample,
        'concat_channels': check_concat,
        'reshape': check_reshape,
        'loss_gradient': check_loss,
    }
    root = Rng(seed)
    results = []
    for suite_index, (op, check) in enumerate(suites.items()):
        rng = root.derive(suite_index)
        worst = max(check(rng) for _ in range(instances))
        tolerance = LOSS_TOLERANCE if op == 'loss_gradient' else OP_TOLERANCE
        result = OpResult(op, instances, worst, tolerance)
        if result.passed:
            logger.info(f"✅ {result.line()}")
        else:
            logger.error(f"❌ {result.line()}")
        results.append(result)
    return results
