#!/usr/bin/env python3
"""
Тесты Tensor4, поэлементных операций, редукций и RNG
"""

import math
import os
import sys
import logging

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from errors import ConfigError, ShapeError
from tensor_core import (
    Precision, Rng, Tensor4, check_shape, init_uniform_fanin, tensor_fill, tensor_map2, tensor_reduce,
)

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


def _raises(exc, fn, *args, **kwargs):
    try:
        fn(*args, **kwargs)
    except exc:
        return
    raise AssertionError(f"{fn.__name__} не выбросил {exc.__name__}")


def test_tensor_is_immutable():
    source = np.arange(24, dtype=np.float32).reshape(1, 2, 3, 4)
    t = Tensor4.from_array(source)
    source[0, 0, 0, 0] = 100
    assert t.data[0, 0, 0, 0] == 0
    assert not t.data.flags.writeable
    _raises(ValueError, t.data.__setitem__, (0, 0, 0, 0), 1.0)
    assert t.shape == (1, 2, 3, 4)
    assert t.precision is Precision.F32


def test_shape_validation():
    _raises(ShapeError, check_shape, (1, 2, 3))
    _raises(ShapeError, check_shape, (1, 0, 3, 3))
    _raises(ShapeError, Tensor4, np.zeros((2, 2)))
    _raises(ShapeError, Tensor4, np.zeros((1, 1, 2, 2), dtype=np.int32))
    t = tensor_fill((1, 2, 3, 4), 1.5)
    assert t.reshape((1, 1, 6, 4)).shape == (1, 1, 6, 4)
    _raises(ShapeError, t.reshape, (1, 1, 5, 5))


def test_map2_and_reduce():
    a = tensor_fill((1, 1, 2, 2), 2.0)
    b = Tensor4.from_array(np.arange(4, dtype=np.float32).reshape(1, 1, 2, 2))
    assert tensor_reduce(tensor_map2(a, b, 'add'), 'sum') == 14.0
    assert tensor_reduce(tensor_map2(a, b, 'mul'), 'max') == 6.0
    assert tensor_reduce(tensor_map2(a, b, np.hypot), 'mean') > 0
    assert tensor_map2(a, b.to_precision(Precision.F64), 'sub').precision is Precision.F64
    _raises(ShapeError, tensor_map2, a, tensor_fill((1, 1, 2, 3), 0.0), 'add')
    _raises(ConfigError, tensor_map2, a, b, 'pow')
    _raises(ConfigError, tensor_reduce, a, 'median')


def test_reduce_sum_is_exact():
    values = np.array([1e16, 1.0, -1e16, 1.0], dtype=np.float64).reshape(1, 1, 2, 2)
    assert tensor_reduce(Tensor4(values), 'sum') == 2.0


def test_rng_determinism():
    a = Rng(42).uniform(0, 1, (5,))
    b = Rng(42).uniform(0, 1, (5,))
    assert np.array_equal(a, b)
    assert not np.array_equal(Rng(42).derive(0).uniform(0, 1, (5,)), Rng(42).derive(1).uniform(0, 1, (5,)))
    assert np.array_equal(Rng(7).derive(3).permutation(10), Rng(7, key=(3,)).permutation(10))
    _raises(ConfigError, Rng, -1)
    _raises(ConfigError, Rng, 2 ** 64)


def test_init_uniform_fanin_bounds():
    t = init_uniform_fanin((8, 4, 3, 3), 36, Rng(0))
    bound = math.sqrt(6.0 / 36)
    assert t.precision is Precision.F32
    assert float(np.abs(t.data).max()) <= bound + 1e-7
    assert float(np.abs(t.data).max()) > bound / 2
    _raises(ConfigError, init_uniform_fanin, (1, 1, 1, 1), 0, Rng(0))


def test_precision_tags():
    for p in Precision:
        assert Precision.from_tag(p.tag) is p
        assert Precision.from_dtype(p.dtype) is p
        assert Precision.parse(p.value.upper()) is p
    _raises(ConfigError, Precision.parse, 'f16')


def test_map2_add_commutative_and_associative():
    rng = Rng(21)
    a, b, c = (Tensor4(rng.normal((2, 3, 4, 5))) for _ in range(3))
    assert np.array_equal(tensor_map2(a, b, 'add').data, tensor_map2(b, a, 'add').data)
    left = tensor_map2(tensor_map2(a, b, 'add'), c, 'add')
    right = tensor_map2(a, tensor_map2(b, c, 'add'), 'add')
    assert np.allclose(left.data, right.data, rtol=1e-12, atol=1e-12)

    # на целых значениях сложение точное, и ассоциативность побитовая
    i, j, k = (Tensor4(rng.integers(-1000, 1000, (1, 2, 3, 4)).astype(np.float64)) for _ in range(3))
    left = tensor_map2(tensor_map2(i, j, 'add'), k, 'add')
    right = tensor_map2(i, tensor_map2(j, k, 'add'), 'add')
    assert np.array_equal(left.data, right.data)


def test_reduce_ignores_permutation():
    rng = Rng(22)
    values = rng.normal((3, 4, 5, 6), 1e3)
    values.flat[::7] *= 1e12
    base = Tensor4(values)
    for _ in range(5):
        shuffled = Tensor4(values.ravel()[rng.permutation(values.size)].reshape(values.shape))
        assert tensor_reduce(shuffled, 'sum') == tensor_reduce(base, 'sum')
        assert tensor_reduce(shuffled, 'mean') == tensor_reduce(base, 'mean')
        assert tensor_reduce(shuffled, 'max') == tensor_reduce(base, 'max')


def test_reshape_round_trip():
    t = Tensor4(Rng(23).normal((2, 3, 4, 5)))
    for shape in ((1, 1, 1, 120), (5, 4, 3, 2), (120, 1, 1, 1), (2, 60, 1, 1)):
        moved = t.reshape(shape)
        assert moved.shape == shape
        # row-major порядок сохраняется
        assert np.array_equal(moved.data.ravel(), t.data.ravel())
        back = moved.reshape(t.shape)
        assert back.shape == t.shape and np.array_equal(back.data, t.data)
    try:
        t.reshape((2, 3, 4, 6))
    except ShapeError:
        pass
    else:
        raise AssertionError("reshape с другим числом элементов должен падать")


def test_init_uniform_fanin_statistics():
    """10^6 значений: все в [-b, b], среднее в пределах 3 sigma, дисперсия около b^2/3"""
    fan_in = 27
    bound = math.sqrt(6.0 / fan_in)
    draws = init_uniform_fanin((100, 10, 10, 100), fan_in, Rng(24), Precision.F64).data.ravel()
    assert draws.size == 10 ** 6
    assert float(np.abs(draws).max()) <= bound
    sigma = bound / math.sqrt(3.0)
    mean = math.fsum(draws) / draws.size
    assert abs(mean) <= 3.0 * sigma / math.sqrt(draws.size), mean
    variance = float(np.var(draws))
    assert abs(variance - sigma ** 2) <= 0.01 * sigma ** 2, variance
    # обе половины интервала заполнены
    assert float(draws.min()) < -0.99 * bound and float(draws.max()) > 0.99 * bound


if __name__ == "__main__":
    tests = [
        test_tensor_is_immutable,
        test_shape_validation,
        test_map2_and_reduce,
        test_reduce_sum_is_exact,
        test_rng_determinism,
        test_init_uniform_fanin_bounds,
        test_precision_tags,
        test_map2_add_commutative_and_associative,
        test_reduce_ignores_permutation,
        test_reshape_round_trip,
        test_init_uniform_fanin_statistics,
    ]
    failed = 0
    for test in tests:
        try:
            test()
            logger.info(f"✅ {test.__name__}")
        except Exception as e:
            logger.error(f"❌ {test.__name__}: {e!r}")
            failed += 1
    sys.exit(1 if failed else 0)
