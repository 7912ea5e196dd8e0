"""
Исполняемые стеки, собранные по StackSpec: параметры, прямой проход с лентой
обратных замыканий и обратный проход по этой ленте
"""

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Tuple

import numpy as np

from arch_model import (
    COARSE_VGG, DILATED_INPUT, OUTPUT_SIZE,
    ArchSpec, LayerKind, LayerSpec, PARAMETRIC, StackSpec,
    coarse_dilated_spec, coarse_vgg_spec, fine_spec, layer_padding, stack_geometry,
)
from errors import ConfigError, GeometryError, ShapeError
from nn_ops import (
    ConvParams, concat_channels, conv2d_dilated, maxpool2d, relu, reshape_op, upsample_nearest,
)
from tensor_core import Precision, Rng, Tensor4, init_uniform_fanin

logger = logging.getLogger(__name__)


def param_name(stack: str, layer: str, index: int, kind: str) -> str:
    return f"{stack}/{layer}.{index}/{kind}"


def weight_gain(fan_in: int) -> float:
    return math.sqrt(2.0 / fan_in)


@dataclass
class TapeEntry:
    kind: str
    backward: object
    prefix: Optional[str] = None


@dataclass
class Tape:
    entries: List[TapeEntry] = field(default_factory=list)


@dataclass
class StackGrads:
    params: Dict[str, np.ndarray]
    d_input: Tensor4
    d_side: Optional[Tensor4] = None


class StackModel:
    """Один стек: спецификация + именованные тензоры весов"""

    def __init__(self, spec: StackSpec, precision: Precision = Precision.F32,
                 rng: Optional[Rng] = None):
        # геометрия проверяется при сборке: битая спецификация не строится
        stack_geometry(spec)
        self.spec = spec
        self.precision = precision
        self.params: Dict[str, np.ndarray] = {}
        self.gains: Dict[str, float] = {}
        self._init_params(rng or Rng(0))

    def _conv_slots(self) -> List[Tuple[LayerSpec, int, Tuple[int, int, int, int]]]:
        slots = []
        for layer in self.spec.layers:
            for index, (cin, cout) in enumerate(layer.conv_shapes()):
                slots.append((layer, index, (cout, cin, layer.kernel[0], layer.kernel[1])))
        return slots

    def _init_params(self, rng: Rng):
        """
        В params хранится theta; свёртка работает с весом gain * theta, gain = sqrt(2 / fan_in).
        Начальный рабочий вес распределён как init_uniform_fanin, градиент отдаётся по theta.
        """
        for slot, (layer, index, shape) in enumerate(self._conv_slots()):
            fan_in = shape[1] * shape[2] * shape[3]
            weights = init_uniform_fanin(shape, fan_in, rng.derive(slot), Precision.F64)
            name = param_name(self.spec.name, layer.name, index, "weight")
            self.gains[name] = weight_gain(fan_in)
            self.params[name] = (weights.data / self.gains[name]).astype(self.precision.dtype)
            self.params[param_name(self.spec.name, layer.name, index, "bias")] = \
                np.zeros(shape[0], dtype=self.precision.dtype)

    def effective_weight(self, name: str) -> np.ndarray:
        """Вес, которым реально сворачивается вход"""
        return (self.params[name] * self.precision.dtype.type(self.gains[name])).astype(self.precision.dtype)

    @property
    def name(self) -> str:
        return self.spec.name

    def parameter_count(self) -> int:
        return sum(int(value.size) for value in self.params.values())

    def dilations(self) -> Tuple[int, ...]:
        """Dilation каждого слоя со свёртками, в порядке стека"""
        return tuple(layer.dilation for layer in self.spec.layers if layer.kind in PARAMETRIC)

    def zero_output_layer(self):
        """Обнуляет последний параметрический слой: выход стека: константа 0"""
        layer, index, _ = self._conv_slots()[-1]
        for kind in ("weight", "bias"):
            name = param_name(self.name, layer.name, index, kind)
            self.params[name] = np.zeros_like(self.params[name])

    def load_params(self, values: Dict[str, np.ndarray], strict: bool = True):
        """Подменяет параметры; формы и точность должны совпадать"""
        missing = [name for name in self.params if name not in values]
        if strict and missing:
            raise ShapeError(f"стек {self.name}: нет параметров {', '.join(missing[:3])}")
        for name, current in self.params.items():
            if name not in values:
                continue
            new = np.asarray(values[name])
            if new.shape != current.shape:
                raise ShapeError(f"{name}: форма {new.shape}, ожидалось {current.shape}")
            self.params[name] = np.array(new, dtype=self.precision.dtype, copy=True)

    def _conv(self, layer: LayerSpec, index: int) -> ConvParams:
        weights = Tensor4(self.effective_weight(param_name(self.name, layer.name, index, "weight")))
        bias = self.params[param_name(self.name, layer.name, index, "bias")]
        return ConvParams(weights, bias, dilation=layer.dilation, padding=layer_padding(layer))

    def forward(self, x: Tensor4, side: Optional[Tensor4] = None) -> Tuple[Tensor4, Tape]:
        """side: второй вход слоя concat (выход coarse-стека для fine-стека)"""
        if x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"стек {self.name}: вход {x.shape[1]} каналов, ожидалось {self.spec.in_channels}")
        tape = Tape()
        h = x.to_precision(self.precision)
        for layer in self.spec.layers:
            if layer.kind in PARAMETRIC:
                if layer.kind is LayerKind.FC_AS_CONV and tuple(h.shape[2:]) != layer.kernel:
                    raise GeometryError(
                        f"слой {layer.name}: полносвязный слой ждёт карту "
                        f"{layer.kernel[0]}x{layer.kernel[1]}, пришла {h.shape[2]}x{h.shape[3]}"
                    )
                for index in range(layer.conv_count):
                    step = conv2d_dilated(h, self._conv(layer, index))
                    tape.entries.append(TapeEntry("conv", step.backward,
                                                  param_name(self.name, layer.name, index, "")))
                    h = step.output
                    if layer.relu:
                        step = relu(h)
                        tape.entries.append(TapeEntry("relu", step.backward))
                        h = step.output
                continue

            if layer.kind is LayerKind.MAXPOOL:
                step = maxpool2d(h, layer.kernel, layer.stride, layer_padding(layer))
            elif layer.kind is LayerKind.UPSAMPLE:
                step = upsample_nearest(h, layer.kernel)
            elif layer.kind is LayerKind.RESHAPE:
                step = reshape_op(h, (h.shape[0], layer.out_channels) + layer.kernel)
            elif layer.kind is LayerKind.CONCAT:
                if side is None:
                    raise ShapeError(f"слой {layer.name}: concat требует второй вход")
                if side.shape[1] != layer.out_channels - layer.in_channels:
                    raise ShapeError(f"слой {layer.name}: второй вход {side.shape[1]} каналов, "
                                     f"ожидалось {layer.out_channels - layer.in_channels}")
                step = concat_channels(h, side.to_precision(self.precision))
            else:
                step = relu(h)
            tape.entries.append(TapeEntry(layer.kind.value, step.backward))
            h = step.output
        return h, tape

    def backward(self, tape: Tape, upstream: Tensor4) -> StackGrads:
        grads: Dict[str, np.ndarray] = {}
        d_side = None
        g = upstream
        for entry in reversed(tape.entries):
            result = entry.backward(g)
            if entry.kind == "conv":
                name = entry.prefix + "weight"
                grads[name] = (result.params['weight'] * self.gains[name]).astype(result.params['weight'].dtype)
                grads[entry.prefix + "bias"] = result.params['bias']
            elif entry.kind == LayerKind.CONCAT.value:
                d_side = result.inputs[1]
            g = result.input
        return StackGrads(grads, g, d_side)


class DepthNetwork:
    """
    Coarse-стек + fine-стек. Fine-стек получает RGB и выход coarse-стека;
    выход обоих: log-глубина 80x60.
    """

    def __init__(self, coarse: StackModel, fine: StackModel, width_scale: Fraction = Fraction(1)):
        if coarse.spec.out_channels != 1:
            raise ShapeError(f"coarse-стек должен выдавать 1 канал, выдаёт {coarse.spec.out_channels}")
        coarse_out = stack_geometry(coarse.spec)[-1].out_size
        if coarse_out != fine.spec.input_size:
            raise GeometryError(
                f"выход coarse {coarse_out[0]}x{coarse_out[1]} не совпадает со входом fine "
                f"{fine.spec.input_size[0]}x{fine.spec.input_size[1]}"
            )
        self.coarse = coarse
        self.fine = fine
        self.width_scale = Fraction(width_scale)

    @property
    def arch(self) -> str:
        return "vgg" if self.coarse.name == COARSE_VGG else "ours"

    @property
    def coarse_input_size(self) -> Tuple[int, int]:
        return self.coarse.spec.input_size

    @property
    def output_size(self) -> Tuple[int, int]:
        return self.fine.spec.input_size

    def arch_spec(self) -> ArchSpec:
        return ArchSpec((self.coarse.spec, self.fine.spec), self.width_scale)

    def fingerprint(self) -> str:
        return self.arch_spec().fingerprint()

    @property
    def params(self) -> Dict[str, np.ndarray]:
        merged = dict(self.coarse.params)
        merged.update(self.fine.params)
        return merged

    def load_params(self, values: Dict[str, np.ndarray]):
        self.coarse.load_params(values)
        self.fine.load_params(values)

    def predict(self, rgb: Tensor4, rgb_coarse: Optional[Tensor4] = None,
                stages: str = "both") -> Tensor4:
        """log-глубина; stages=coarse возвращает выход первого стека"""
        coarse_out, _ = self.coarse.forward(rgb_coarse if rgb_coarse is not None else rgb)
        if stages == "coarse":
            return coarse_out
        fine_out, _ = self.fine.forward(rgb, side=coarse_out)
        return fine_out


def build_coarse_dilated(width_scale: Fraction = Fraction(1), precision: Precision = Precision.F32,
                         rng: Optional[Rng] = None, input_size=DILATED_INPUT) -> StackModel:
    return StackModel(coarse_dilated_spec(width_scale, input_size), precision, rng)


def build_coarse_vgg_baseline(width_scale: Fraction = Fraction(1), precision: Precision = Precision.F32,
                              rng: Optional[Rng] = None, output_size=OUTPUT_SIZE,
                              upsample_mode: str = "reshape") -> StackModel:
    """Вход вдвое больше выхода: 160x120 для 80x60"""
    input_size = (output_size[0] * 2, output_size[1] * 2)
    return StackModel(coarse_vgg_spec(width_scale, input_size, output_size, upsample_mode), precision, rng)


def build_fine_stack(width_scale: Fraction = Fraction(1), precision: Precision = Precision.F32,
                     rng: Optional[Rng] = None, input_size=OUTPUT_SIZE,
                     pool_after_conv: bool = True, zero_init_output: bool = False) -> StackModel:
    model = StackModel(fine_spec(width_scale, input_size, pool_after_conv), precision, rng)
    if zero_init_output:
        model.zero_output_layer()
    return model


def build_network(arch: str = "ours", width_scale: Fraction = Fraction(1), input_size=OUTPUT_SIZE,
                  seed: int = 0, precision: Precision = Precision.F32, pool_after_conv: bool = True,
                  upsample_mode: str = "reshape", zero_init_fine_output: bool = False) -> DepthNetwork:
    """Полная двухстековая сеть; веса coarse и fine инициализируются из независимых потоков seed"""
    root = Rng(seed)
    if arch == "ours":
        coarse = build_coarse_dilated(width_scale, precision, root.derive(0), input_size)
    elif arch == "vgg":
        coarse = build_coarse_vgg_baseline(width_scale, precision, root.derive(0), input_size, upsample_mode)
    else:
        raise ConfigError(f"--arch: ours или vgg, получено {arch}")
    fine = build_fine_stack(width_scale, precision, root.derive(1), input_size,
                            pool_after_conv, zero_init_fine_output)
    logger.info(f"🧱 Сеть {arch}: coarse {coarse.parameter_count()} параметров, "
                f"fine {fine.parameter_count()}, width_scale {width_scale}")
    return DepthNetwork(coarse, fine, width_scale)
