"""
Плотный тензор ранга 4 (n, c, h, w), поэлементные операции, редукции и сидированный RNG
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence, Tuple, Union

import numpy as np

from errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

Shape4 = Tuple[int, int, int, int]

# Предел числа элементов: индексация numpy должна помещаться в intp
MAX_ELEMENTS = np.iinfo(np.intp).max // 8


class Precision(Enum):
    F32 = "f32"
    F64 = "f64"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32) if self is Precision.F32 else np.dtype(np.float64)

    @property
    def tag(self) -> int:
        """Тег точности в бинарном формате чекпоинта"""
        return 0 if self is Precision.F32 else 1

    @classmethod
    def from_tag(cls, tag: int) -> "Precision":
        if tag == 0:
            return cls.F32
        if tag == 1:
            return cls.F64
        raise ValueError(f"неизвестный тег точности: {tag}")

    @classmethod
    def from_dtype(cls, dtype) -> "Precision":
        dtype = np.dtype(dtype)
        if dtype == np.float32:
            return cls.F32
        if dtype == np.float64:
            return cls.F64
        raise ShapeError(f"поддерживаются только float32/float64, получено {dtype}")

    @classmethod
    def parse(cls, text: str) -> "Precision":
        try:
            return cls(str(text).lower())
        except ValueError:
            raise ConfigError(f"точность должна быть f32 или f64, получено: {text}")


def check_shape(shape: Sequence[int]) -> Shape4:
    """Проверяет 4-кортеж размерностей: все >= 1, без переполнения"""
    if len(shape) != 4:
        raise ShapeError(f"ожидалась форма ранга 4, получено {tuple(shape)}")
    dims = tuple(int(d) for d in shape)
    if any(d < 1 for d in dims):
        raise ShapeError(f"все размерности должны быть >= 1, получено {dims}")
    if math.prod(dims) > MAX_ELEMENTS:
        raise ShapeError(f"слишком много элементов для формы {dims}")
    return dims


@dataclass(frozen=True, eq=False)
class Tensor4:
    """
    Неизменяемый тензор (n, c, h, w) в row-major порядке.
    Данные хранятся в numpy-массиве только для чтения.
    """
    data: np.ndarray

    def __post_init__(self):
        arr = self.data
        if not isinstance(arr, np.ndarray):
            raise ShapeError(f"Tensor4 строится из numpy-массива, получено {type(arr).__name__}")
        if arr.ndim != 4:
            raise ShapeError(f"ожидался ранг 4, получено {arr.ndim}")
        check_shape(arr.shape)
        Precision.from_dtype(arr.dtype)
        arr = np.ascontiguousarray(arr)
        if arr.flags.writeable:
            arr = arr.view()
            arr.flags.writeable = False
        object.__setattr__(self, 'data', arr)

    @classmethod
    def from_array(cls, values, precision: Precision = None) -> "Tensor4":
        arr = np.asarray(values)
        if precision is None:
            precision = Precision.F64 if arr.dtype == np.float64 else Precision.F32
        return cls(np.array(arr, dtype=precision.dtype, copy=True))

    @property
    def shape(self) -> Shape4:
        return tuple(self.data.shape)

    @property
    def precision(self) -> Precision:
        return Precision.from_dtype(self.data.dtype)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def reshape(self, shape: Sequence[int]) -> "Tensor4":
        dims = check_shape(shape)
        if math.prod(dims) != self.size:
            raise ShapeError(f"reshape {self.shape} -> {dims}: число элементов не совпадает")
        return Tensor4(self.data.reshape(dims))

    def to_precision(self, precision: Precision) -> "Tensor4":
        if precision is self.precision:
            return self
        return Tensor4(self.data.astype(precision.dtype))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor4(shape={self.shape}, precision={self.precision.value})"


def tensor_fill(shape: Sequence[int], value: float, precision: Precision = Precision.F32) -> Tensor4:
    dims = check_shape(shape)
    return Tensor4(np.full(dims, value, dtype=precision.dtype))


_BINARY_OPS = {
    'add': np.add,
    'sub': np.subtract,
    'mul': np.multiply,
    'max': np.maximum,
    'min': np.minimum,
}


def tensor_map2(a: Tensor4, b: Tensor4, f: Union[str, Callable]) -> Tensor4:
    """Поэлементное f(a_i, b_i); f: имя операции или векторизуемая функция"""
    if a.shape != b.shape:
        raise ShapeError(f"формы не совпадают: {a.shape} vs {b.shape}")
    op = _BINARY_OPS.get(f) if isinstance(f, str) else f
    if op is None:
        raise ConfigError(f"неизвестная операция: {f}")
    precision = a.precision if a.precision is b.precision else Precision.F64
    result = np.asarray(op(a.data, b.data), dtype=precision.dtype)
    return Tensor4(result.reshape(a.shape))


def tensor_reduce(a: Tensor4, op: str) -> float:
    """Редукция sum / max / mean; суммирование точное (fsum) в 64 битах"""
    values = a.data.ravel()
    if op == 'sum':
        return math.fsum(values.astype(np.float64))
    if op == 'mean':
        return math.fsum(values.astype(np.float64)) / values.size
    if op == 'max':
        return float(values.max())
    raise ConfigError(f"неизвестная редукция: {op}")


class Rng:
    """
    Детерминированный генератор: numpy PCG64.
    Одинаковый seed (и ключ) дают побитово одинаковый поток.
    """

    def __init__(self, seed: int, key: Sequence[int] = ()):
        if not 0 <= int(seed) < 2 ** 64:
            raise ConfigError(f"seed должен быть 64-битным беззнаковым, получено {seed}")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        entropy = [self.seed, *self.key] if self.key else self.seed
        self.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def derive(self, *key: int) -> "Rng":
        """Независимый дочерний поток, например (seed, epoch)"""
        return Rng(self.seed, self.key + tuple(key))

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self.generator.uniform(low, high, size=shape)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self.generator.normal(0.0, scale, size=shape)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


def init_uniform_fanin(shape: Sequence[int], fan_in: int, rng: Rng,
                       precision: Precision = Precision.F32) -> Tensor4:
    """Равномерная инициализация в [-sqrt(6/fan_in), +sqrt(6/fan_in)]"""
    if fan_in < 1:
        raise ConfigError(f"fan_in должен быть >= 1, получено {fan_in}")
    dims = check_shape(shape)
    bound = math.sqrt(6.0 / fan_in)
    samples = rng.uniform(-bound, bound, dims)
    return Tensor4(np.clip(samples, -bound, bound).astype(precision.dtype))
