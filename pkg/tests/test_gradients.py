#!/usr/bin/env python3
"""
Проверка градиентов конечными разностями: все операции, отрицательный контроль и требование f64
"""

import os
import sys
import logging

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from errors import ConfigError
from gradcheck import OpResult, numeric_grad, relative_error, run_gradcheck
from tensor_core import Precision

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

OPS = ['conv2d_dilated', 'relu', 'maxpool2d', 'upsample_nearest', 'concat_channels', 'reshape', 'loss_gradient']


def test_all_ops_pass():
    results = run_gradcheck(seed=0, instances=20)
    assert [r.op for r in results] == OPS
    for r in results:
        logger.info(r.line())
        assert r.passed, r.line()
        assert r.instances == 20
    assert next(r for r in results if r.op == 'loss_gradient').tolerance == 1e-6


def test_sabotage_fails_conv_only():
    results = {r.op: r for r in run_gradcheck(seed=3, instances=5, sabotage=True)}
    assert not results['conv2d_dilated'].passed
    assert results['conv2d_dilated'].line().endswith('FAIL')
    assert all(r.passed for op, r in results.items() if op != 'conv2d_dilated')


def test_requires_f64():
    try:
        run_gradcheck(precision=Precision.F32)
    except ConfigError as e:
        assert e.exit_code == 1
    else:
        raise AssertionError("f32 должен отклоняться")


def test_numeric_grad_of_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    grad = numeric_grad(lambda v: float(np.sum(v ** 2)), x)
    assert relative_error(grad, 2 * x) < 1e-9
    # исходный массив не портится
    assert np.array_equal(x, [1.0, -2.0, 0.5])


def test_result_line_format():
    line = OpResult('relu', 20, 1.5e-11, 1e-4).line()
    assert line == 'op=relu instances=20 max_rel_err=1.500e-11 PASS'


if __name__ == "__main__":
    tests = [
        test_all_ops_pass,
        test_sabotage_fails_conv_only,
        test_requires_f64,
        test_numeric_grad_of_quadratic,
        test_result_line_format,
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
