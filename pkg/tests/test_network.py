#!/usr/bin/env python3
"""
Тесты сборки стеков: формы выхода, dilations, concat в fine-стеке,
обратный проход против конечных разностей на маленькой сети
"""

import math
import os
import sys
import logging
from fractions import Fraction

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from errors import ConfigError, GeometryError, ShapeError
from network import (
    build_coarse_dilated, build_coarse_vgg_baseline, build_fine_stack, build_network, param_name,
)
from tensor_core import Precision, Rng, Tensor4

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

TINY = Fraction(1, 16)


def _raises(exc, fn, *args, **kwargs):
    try:
        fn(*args, **kwargs)
    except exc as e:
        return e
    raise AssertionError(f"{fn.__name__} не выбросил {exc.__name__}")


def _rgb(shape, seed=0, precision=Precision.F32) -> Tensor4:
    return Tensor4(Rng(seed).uniform(0, 1, shape).astype(precision.dtype))


def test_coarse_dilated_keeps_resolution():
    stack = build_coarse_dilated(TINY)
    out, tape = stack.forward(_rgb((2, 3, 80, 60)))
    assert out.shape == (2, 1, 80, 60)
    assert stack.dilations() == (1, 2, 3, 2, 3, 4, 1, 1)
    # 2+2+3+3+3 свёрток в блоках, затем 1.6, 1.7, 1.8
    assert sum(1 for e in tape.entries if e.kind == "conv") == 16


def test_coarse_vgg_shapes_and_mismatch():
    stack = build_coarse_vgg_baseline(TINY, output_size=(16, 12))
    assert stack.spec.input_size == (32, 24)
    out, _ = stack.forward(_rgb((1, 3, 32, 24)))
    assert out.shape == (1, 1, 16, 12)
    e = _raises(GeometryError, stack.forward, _rgb((1, 3, 48, 24)))
    assert "1.6" in str(e)


def test_coarse_vgg_nearest_upsample():
    stack = build_coarse_vgg_baseline(TINY, output_size=(16, 12), upsample_mode="nearest")
    out, _ = stack.forward(_rgb((1, 3, 32, 24)))
    assert out.shape == (1, 1, 16, 12)
    block = out.data[0, 0, :4, :4]
    assert np.all(block == block[0, 0])


def test_fine_stack_concat():
    fine = build_fine_stack(TINY, input_size=(16, 12))
    side = Tensor4(np.full((1, 1, 16, 12), 0.5, dtype=np.float32))
    out, tape = fine.forward(_rgb((1, 3, 16, 12)), side=side)
    assert out.shape == (1, 1, 16, 12)
    assert [e.kind for e in tape.entries if e.kind != "relu"] == ["conv", "maxpool", "concat", "conv", "conv"]
    _raises(ShapeError, fine.forward, _rgb((1, 3, 16, 12)))
    _raises(ShapeError, fine.forward, _rgb((1, 3, 16, 12)), Tensor4(np.zeros((1, 2, 16, 12), dtype=np.float32)))
    _raises(ShapeError, fine.forward, _rgb((1, 4, 16, 12)), side)


def test_fine_without_pool():
    fine = build_fine_stack(TINY, input_size=(16, 12), pool_after_conv=False)
    assert [l.name for l in fine.spec.layers] == ["2.1", "2.2", "2.3", "2.4"]


def test_zero_init_output():
    fine = build_fine_stack(TINY, input_size=(16, 12), zero_init_output=True)
    out, _ = fine.forward(_rgb((1, 3, 16, 12)), side=Tensor4(np.ones((1, 1, 16, 12), dtype=np.float32)))
    assert np.all(out.data == 0.0)
    assert np.all(fine.params[param_name("fine", "2.4", 0, "weight")] == 0.0)


def test_parameter_count_matches_analyzer():
    network = build_network("ours", TINY, (16, 12))
    counted = network.coarse.parameter_count() + network.fine.parameter_count()
    assert counted == sum(int(v.size) for v in network.params.values())
    assert network.coarse.parameter_count() == sum(l.parameter_count() for l in network.coarse.spec.layers)


def test_build_network_determinism():
    a = build_network("ours", TINY, (16, 12), seed=5)
    b = build_network("ours", TINY, (16, 12), seed=5)
    c = build_network("ours", TINY, (16, 12), seed=6)
    name = param_name("coarse_ours", "1.1", 0, "weight")
    assert np.array_equal(a.params[name], b.params[name])
    assert not np.array_equal(a.params[name], c.params[name])
    assert a.fingerprint() == c.fingerprint()
    _raises(ConfigError, build_network, "resnet", TINY, (16, 12))


def test_predict_stages():
    network = build_network("vgg", TINY, (16, 12))
    assert network.arch == "vgg"
    assert network.coarse_input_size == (32, 24)
    rgb, rgb_coarse = _rgb((1, 3, 16, 12)), _rgb((1, 3, 32, 24), seed=1)
    assert network.predict(rgb, rgb_coarse, "coarse").shape == (1, 1, 16, 12)
    assert network.predict(rgb, rgb_coarse).shape == (1, 1, 16, 12)


def test_load_params_validation():
    network = build_network("ours", TINY, (16, 12))
    params = network.params
    name = param_name("fine", "2.3", 0, "bias")
    broken = dict(params)
    broken[name] = np.zeros(99, dtype=np.float32)
    _raises(ShapeError, network.load_params, broken)
    missing = dict(params)
    del missing[name]
    _raises(ShapeError, network.load_params, missing)


def test_backward_matches_finite_differences():
    """Цепочка coarse -> fine в 64 битах: градиент s = sum(R * out) по нескольким весам"""
    network = build_network("ours", TINY, (8, 8), seed=3, precision=Precision.F64)
    rgb = _rgb((1, 3, 8, 8), seed=4, precision=Precision.F64)
    projection = Rng(5).normal((1, 1, 8, 8))

    def scalar() -> float:
        return float(np.sum(projection * network.predict(rgb).data))

    coarse_out, coarse_tape = network.coarse.forward(rgb)
    _, fine_tape = network.fine.forward(rgb, side=coarse_out)
    fine_grads = network.fine.backward(fine_tape, Tensor4(projection))
    coarse_grads = network.coarse.backward(coarse_tape, fine_grads.d_side)
    analytic = {**coarse_grads.params, **fine_grads.params}
    assert set(analytic) == set(network.params)

    step = 1e-6
    checked = [
        (network.coarse, param_name("coarse_ours", "1.1", 0, "weight"), 7),
        (network.coarse, param_name("coarse_ours", "1.8", 0, "bias"), 0),
        (network.fine, param_name("fine", "2.1", 0, "weight"), 11),
        (network.fine, param_name("fine", "2.4", 0, "weight"), 3),
    ]
    for stack, name, index in checked:
        values = stack.params[name]
        original = values.flat[index]
        values.flat[index] = original + step
        plus = scalar()
        values.flat[index] = original - step
        minus = scalar()
        values.flat[index] = original
        numeric = (plus - minus) / (2 * step)
        exact = float(analytic[name].flat[index])
        logger.info(f"🔍 {name}[{index}]: analytic {exact:.6e}, numeric {numeric:.6e}")
        assert abs(exact - numeric) <= 1e-4 * max(1.0, abs(numeric))


def test_weight_gain_parameterization():
    """Рабочий вес: sqrt(2/fan_in) * theta; он лежит в [-sqrt(6/fan_in), sqrt(6/fan_in)], theta в [-sqrt(3), sqrt(3)]"""
    network = build_network("ours", Fraction(1, 8), (16, 12), seed=9, precision=Precision.F64)
    for stack in (network.coarse, network.fine):
        weights = [name for name in stack.params if name.endswith("/weight")]
        assert set(weights) == set(stack.gains)
        for name in weights:
            theta = stack.params[name]
            fan_in = theta.shape[1] * theta.shape[2] * theta.shape[3]
            assert math.isclose(stack.gains[name], math.sqrt(2.0 / fan_in), rel_tol=1e-15)
            effective = stack.effective_weight(name)
            assert float(np.abs(effective).max()) <= math.sqrt(6.0 / fan_in) * (1 + 1e-12), name
            assert float(np.abs(theta).max()) <= math.sqrt(3.0) * (1 + 1e-12), name
            if theta.size >= 200:
                assert float(np.abs(theta).max()) > 1.0, name


if __name__ == "__main__":
    tests = [
        test_coarse_dilated_keeps_resolution,
        test_coarse_vgg_shapes_and_mismatch,
        test_coarse_vgg_nearest_upsample,
        test_fine_stack_concat,
        test_fine_without_pool,
        test_zero_init_output,
        test_parameter_count_matches_analyzer,
        test_build_network_determinism,
        test_predict_stages,
        test_load_params_validation,
        test_backward_matches_finite_differences,
        test_weight_gain_parameterization,
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
