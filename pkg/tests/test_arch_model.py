#!/usr/bin/env python3
"""
Тесты анализатора архитектуры: число параметров, отношение VGG/OUR, геометрия,
рецептивные поля, текстовая таблица
"""

import os
import sys
import logging
from fractions import Fraction

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from arch_model import (
    COARSE_OURS, COARSE_VGG, FINE, ArchSpec, LayerKind, LayerSpec, StackSpec, builtin_arch,
    coarse_dilated_spec, coarse_vgg_spec, count_parameters, fine_spec, geometry_report,
    render_geometry, scale_channels, stack_geometry,
)
from errors import ConfigError, GeometryError

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

GOLDEN = os.path.join(os.path.dirname(__file__), 'golden', 'analyze_both.txt')


def _raises(exc, fn, *args, **kwargs):
    try:
        fn(*args, **kwargs)
    except exc as e:
        return e
    raise AssertionError(f"{fn.__name__} не выбросил {exc.__name__}")


def test_parameter_totals():
    report = count_parameters(builtin_arch("both"))
    assert report.stack_totals[COARSE_OURS] == 27823425
    assert report.stack_totals[COARSE_VGG] == 197966336
    assert report.stack_totals[FINE] == 119437
    assert report.framework_totals == {"ours": 27942862, "vgg": 198085773}
    assert abs(float(report.ratio_vgg_over_ours) - 7.115096) < 5e-7
    assert 7.0 <= float(report.ratio_vgg_over_ours) <= 7.3
    per_layer = dict(report.per_layer)
    assert per_layer["coarse_ours/1.1"] == 38720
    assert per_layer["coarse_vgg/1.6"] == 146804736
    assert per_layer["fine/2.1"] == 15372


def test_dilations():
    dilations = [layer.dilation for layer in coarse_dilated_spec().layers]
    assert dilations == [1, 2, 3, 2, 3, 4, 1, 1]


def test_sizes_preserved_in_dilated_stack():
    for row in stack_geometry(coarse_dilated_spec()):
        assert row.out_size == (80, 60), row
    for row in stack_geometry(fine_spec()):
        assert row.out_size == (80, 60), row


def test_vgg_pyramid():
    rows = {row.layer: row for row in stack_geometry(coarse_vgg_spec())}
    assert [rows[f"p{i}"].out_size for i in range(1, 5)] == [(80, 60), (40, 30), (20, 15), (10, 7)]
    assert rows["1.6"].out_size == (1, 1)
    assert rows["upsamp"].out_size == (80, 60)
    assert rows["upsamp"].receptive_field is None


def test_vgg_nearest_mode():
    stack = coarse_vgg_spec(upsample_mode="nearest")
    rows = {row.layer: row for row in stack_geometry(stack)}
    assert rows["1.8r"].out_size == (20, 15)
    assert rows["upsamp"].out_size == (80, 60)
    assert next(l for l in stack.layers if l.name == "1.8").out_channels == 300
    _raises(GeometryError, coarse_vgg_spec, upsample_mode="nearest", output_size=(82, 60))
    _raises(ConfigError, coarse_vgg_spec, upsample_mode="bicubic")


def test_receptive_fields():
    rows = {row.layer: row for row in stack_geometry(coarse_dilated_spec())}
    # 1 + 2*(2*1 + 2*2 + 3*3 + 3*2 + 3*3) = 61, затем 7x7 с l=4 добавляет 24
    assert rows["1.5"].receptive_field == (61, 61)
    assert rows["1.6"].receptive_field == (85, 85)
    assert rows["1.8"].receptive_field == (85, 85)
    fine = {row.layer: row for row in stack_geometry(fine_spec())}
    assert fine["2.1"].receptive_field == (9, 9)
    assert fine["2.1p"].receptive_field == (11, 11)


def test_geometry_mismatch_names_layer():
    arch = builtin_arch("vgg")
    e = _raises(GeometryError, geometry_report, arch, (96, 72))
    assert "1.6" in str(e)
    lines = render_geometry(geometry_report(builtin_arch("ours")))
    assert lines[0].split("\t") == ["stack", "layer", "kind", "in", "out", "receptive_field"]
    assert lines[1].startswith("coarse_ours\t1.1\tconv\t80x60\t80x60\t5x5")


def test_golden_table():
    arch = builtin_arch("both")
    text = arch.to_text() + "\n" + "\n".join(count_parameters(arch).summary_lines()) + "\n"
    with open(GOLDEN, encoding='utf-8') as f:
        assert text == f.read()


def test_table_round_trip():
    for upsample in ("reshape", "nearest"):
        arch = builtin_arch("both", Fraction(1, 4), (40, 32), False, upsample)
        parsed = ArchSpec.from_text(arch.to_text())
        assert parsed == arch
        assert parsed.fingerprint() == arch.fingerprint()


def test_fingerprint_changes_with_architecture():
    base = builtin_arch("ours").fingerprint()
    assert len(base) == 64
    assert builtin_arch("ours", Fraction(1, 2)).fingerprint() != base
    assert builtin_arch("ours", pool_after_conv=False).fingerprint() != base


def test_width_scale():
    assert scale_channels(64, Fraction(1, 16)) == 4
    assert scale_channels(4096, Fraction(1, 16)) == 256
    assert scale_channels(63, Fraction(1, 2)) == 32
    _raises(ConfigError, scale_channels, 3, Fraction(1, 16), "x")
    _raises(ConfigError, scale_channels, 64, Fraction(2))
    stack = fine_spec(Fraction(1, 16))
    assert [l.out_channels for l in stack.layers] == [3, 3, 4, 4, 1]
    # свёртки и плотные слои масштабируются примерно как s^2
    full = count_parameters(builtin_arch("ours")).stack_totals[COARSE_OURS]
    half = count_parameters(builtin_arch("ours", Fraction(1, 2))).stack_totals[COARSE_OURS]
    assert 0.2 < half / full < 0.3


def test_invalid_specs():
    _raises(ConfigError, LayerSpec, "p", LayerKind.MAXPOOL, dilation=2)
    _raises(ConfigError, LayerSpec, "bad name", LayerKind.CONV)
    conv = LayerSpec("a", LayerKind.CONV, 1, 3, 8, (3, 3))
    _raises(ConfigError, StackSpec, "s", (8, 8), 1, (conv,))
    _raises(ConfigError, StackSpec, "s", (8, 8), 3, ())
    _raises(ConfigError, builtin_arch, "resnet")
    _raises(ConfigError, ArchSpec.from_text, "nothing here\n")
    _raises(GeometryError, coarse_vgg_spec, input_size=(8, 8))


def test_parameter_count_formula():
    layer = LayerSpec("x", LayerKind.CONV, 3, 16, 32, (3, 3), 2)
    assert layer.parameter_count() == (32 * 16 * 9 + 32) + 2 * (32 * 32 * 9 + 32)
    assert LayerSpec("p", LayerKind.MAXPOOL, in_channels=4, out_channels=4).parameter_count() == 0


if __name__ == "__main__":
    tests = [
        test_parameter_totals,
        test_dilations,
        test_sizes_preserved_in_dilated_stack,
        test_vgg_pyramid,
        test_vgg_nearest_mode,
        test_receptive_fields,
        test_geometry_mismatch_names_layer,
        test_golden_table,
        test_table_round_trip,
        test_fingerprint_changes_with_architecture,
        test_width_scale,
        test_invalid_specs,
        test_parameter_count_formula,
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
