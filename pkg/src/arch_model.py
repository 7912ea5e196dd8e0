"""
Декларативное описание стеков: dilated coarse, VGG baseline, fine.
Анализатор: геометрия по слоям, рецептивное поле и число параметров.
"""

import hashlib
import logging
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

from errors import ConfigError, GeometryError
from nn_ops import conv_output_size, receptive_field, same_padding

logger = logging.getLogger(__name__)

Pair = Tuple[int, int]

COARSE_OURS = "coarse_ours"
COARSE_VGG = "coarse_vgg"
FINE = "fine"

# Разрешение выхода обоих coarse-стеков и fine-стека
OUTPUT_SIZE = (80, 60)
DILATED_INPUT = (80, 60)
VGG_INPUT = (160, 120)

UPSAMPLE_MODES = ("reshape", "nearest")


class LayerKind(str, Enum):
    CONV = "conv"
    FC_AS_CONV = "fc_as_conv"
    RELU = "relu"
    MAXPOOL = "maxpool"
    UPSAMPLE = "upsample"
    CONCAT = "concat"
    RESHAPE = "reshape"


PARAMETRIC = (LayerKind.CONV, LayerKind.FC_AS_CONV)


@dataclass(frozen=True)
class LayerSpec:
    """
    Один столбец таблицы архитектуры. conv_count: число свёрток в блоке (первая in->out, остальные out->out).
    kernel: для conv/fc: ядро, для maxpool: окно, для upsample: коэффициент,
    для reshape: целевой пространственный размер.
    """
    name: str
    kind: LayerKind
    conv_count: int = 1
    in_channels: int = 1
    out_channels: int = 1
    kernel: Pair = (1, 1)
    dilation: int = 1
    stride: int = 1
    relu: bool = False
    notes: str = ""

    def __post_init__(self):
        object.__setattr__(self, 'kind', LayerKind(self.kind))
        object.__setattr__(self, 'kernel', (int(self.kernel[0]), int(self.kernel[1])))
        if self.dilation > 1 and self.kind not in PARAMETRIC:
            raise ConfigError(f"слой {self.name}: dilation > 1 допустим только у свёрток")
        if self.conv_count < 1 or self.dilation < 1 or self.stride < 1 or min(self.kernel) < 1:
            raise ConfigError(f"слой {self.name}: conv_count, dilation, stride и ядро должны быть >= 1")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError(f"слой {self.name}: число каналов должно быть >= 1")
        if any(ch in self.notes for ch in "\t\n") or any(ch in self.name for ch in "\t\n "):
            raise ConfigError(f"слой {self.name}: имя и notes не должны содержать пробельных разделителей")

    def conv_shapes(self) -> List[Tuple[int, int]]:
        """(in, out) каждой свёртки блока"""
        if self.kind not in PARAMETRIC:
            return []
        return [(self.in_channels, self.out_channels)] + \
            [(self.out_channels, self.out_channels)] * (self.conv_count - 1)

    def parameter_count(self) -> int:
        kh, kw = self.kernel
        return sum(o * i * kh * kw + o for i, o in self.conv_shapes())


@dataclass(frozen=True)
class StackSpec:
    name: str
    input_size: Pair
    in_channels: int
    layers: Tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, 'layers', tuple(self.layers))
        object.__setattr__(self, 'input_size', (int(self.input_size[0]), int(self.input_size[1])))
        if not self.layers:
            raise ConfigError(f"стек {self.name}: нет слоёв")
        channels = self.in_channels
        for layer in self.layers:
            if layer.in_channels != channels:
                raise ConfigError(
                    f"стек {self.name}, слой {layer.name}: in_channels {layer.in_channels}, "
                    f"предыдущий слой выдаёт {channels}"
                )
            if layer.kind is LayerKind.CONCAT and layer.out_channels <= layer.in_channels:
                raise ConfigError(f"слой {layer.name}: concat должен добавлять каналы")
            if layer.kind in (LayerKind.RELU, LayerKind.MAXPOOL, LayerKind.UPSAMPLE) \
                    and layer.out_channels != layer.in_channels:
                raise ConfigError(f"слой {layer.name}: {layer.kind.value} не меняет число каналов")
            channels = layer.out_channels

    @property
    def out_channels(self) -> int:
        return self.layers[-1].out_channels


@dataclass(frozen=True)
class ArchSpec:
    stacks: Tuple[StackSpec, ...]
    width_scale: Fraction = Fraction(1)

    def __post_init__(self):
        object.__setattr__(self, 'stacks', tuple(self.stacks))
        object.__setattr__(self, 'width_scale', Fraction(self.width_scale))

    def stack(self, name: str) -> StackSpec:
        for stack in self.stacks:
            if stack.name == name:
                return stack
        raise KeyError(name)

    def names(self) -> List[str]:
        return [stack.name for stack in self.stacks]

    def to_text(self) -> str:
        return "\n\n".join(
            "\n".join(render_stack(stack, self.width_scale)) for stack in self.stacks
        ) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ArchSpec":
        return parse_table(text)

    def fingerprint(self) -> str:
        """SHA-256 текстовой таблицы; сверяется при загрузке чекпоинта"""
        return hashlib.sha256(self.to_text().encode('utf-8')).hexdigest()


# ---------------------------------------------------------------- встроенные стеки

def scale_channels(channels: int, width_scale: Fraction, layer: str = "") -> int:
    """round(c * s) с округлением половины вверх; меньше 1: ошибка конфигурации"""
    scale = Fraction(width_scale)
    if not 0 < scale <= 1:
        raise ConfigError(f"width_scale должен быть в (0, 1], получено {scale}")
    scaled = int(Fraction(channels) * scale + Fraction(1, 2))
    if scaled < 1:
        raise ConfigError(f"слой {layer}: {channels} каналов при width_scale {scale} дают {scaled}")
    return scaled


_COARSE_BLOCKS = (
    # name, conv, chan, dilation
    ("1.1", 2, 64, 1),
    ("1.2", 2, 128, 2),
    ("1.3", 3, 256, 3),
    ("1.4", 3, 512, 2),
    ("1.5", 3, 512, 3),
)


def coarse_dilated_spec(width_scale: Fraction = Fraction(1),
                        input_size: Pair = DILATED_INPUT) -> StackSpec:
    """Stack 1 (OUR): dilations 1, 2, 3, 2, 3 и 4; везде same padding"""
    layers = []
    channels = 3
    for name, convs, chan, dilation in _COARSE_BLOCKS:
        out = scale_channels(chan, width_scale, name)
        layers.append(LayerSpec(name, LayerKind.CONV, convs, channels, out, (3, 3), dilation,
                                relu=True, notes="same"))
        channels = out
    c6 = scale_channels(512, width_scale, "1.6")
    c7 = scale_channels(512, width_scale, "1.7")
    layers.append(LayerSpec("1.6", LayerKind.CONV, 1, channels, c6, (7, 7), 4, relu=True, notes="same"))
    layers.append(LayerSpec("1.7", LayerKind.CONV, 1, c6, c7, (1, 1), 1, relu=True, notes="same"))
    layers.append(LayerSpec("1.8", LayerKind.CONV, 1, c7, 1, (1, 1), 1, relu=False, notes="same"))
    return StackSpec(COARSE_OURS, input_size, 3, layers)


def _pool_pyramid(input_size: Pair, levels: int) -> List[Pair]:
    sizes = [tuple(input_size)]
    for level in range(levels):
        h, w = sizes[-1]
        nxt = (h // 2, w // 2)
        if min(nxt) < 1:
            raise GeometryError(f"слой p{level + 1}: пулинг 2x2 уменьшает {h}x{w} до нуля")
        sizes.append(nxt)
    return sizes


def coarse_vgg_spec(width_scale: Fraction = Fraction(1), input_size: Pair = VGG_INPUT,
                    output_size: Pair = OUTPUT_SIZE, upsample_mode: str = "reshape") -> StackSpec:
    """
    Stack 1 (VGG): блоки свёрток с пулингом 2x2/2 между ними, затем полносвязные
    слои 4096, 4096, 4800 (как свёртки с ядром на всю карту) и reshape 4800 -> 1x80x60.
    В режиме nearest: 1.8 выдаёт карту в 4 раза меньше, затем nearest upsample x4.
    """
    if upsample_mode not in UPSAMPLE_MODES:
        raise ConfigError(f"upsample_mode: {UPSAMPLE_MODES}, получено {upsample_mode}")
    pyramid = _pool_pyramid(input_size, 4)
    layers = []
    channels = 3
    for index, (name, convs, chan, _) in enumerate(_COARSE_BLOCKS):
        out = scale_channels(chan, width_scale, name)
        layers.append(LayerSpec(name, LayerKind.CONV, convs, channels, out, (3, 3), 1,
                                relu=True, notes="same"))
        channels = out
        if index < 4:
            layers.append(LayerSpec(f"p{index + 1}", LayerKind.MAXPOOL, 1, channels, channels,
                                    (2, 2), 1, stride=2, notes="floor"))

    oh, ow = output_size
    if upsample_mode == "reshape":
        fc_out, grid = oh * ow, (oh, ow)
    else:
        if oh % 4 or ow % 4:
            raise GeometryError(f"слой upsamp: {oh}x{ow} не делится на 4")
        grid = (oh // 4, ow // 4)
        fc_out = grid[0] * grid[1]

    f6 = scale_channels(4096, width_scale, "1.6")
    f7 = scale_channels(4096, width_scale, "1.7")
    layers.append(LayerSpec("1.6", LayerKind.FC_AS_CONV, 1, channels, f6, pyramid[-1],
                            relu=True, notes="dense"))
    layers.append(LayerSpec("1.7", LayerKind.FC_AS_CONV, 1, f6, f7, (1, 1), relu=True, notes="dense"))
    layers.append(LayerSpec("1.8", LayerKind.FC_AS_CONV, 1, f7, fc_out, (1, 1), notes="dense"))
    if upsample_mode == "reshape":
        layers.append(LayerSpec("upsamp", LayerKind.RESHAPE, 1, fc_out, 1, grid))
    else:
        layers.append(LayerSpec("1.8r", LayerKind.RESHAPE, 1, fc_out, 1, grid))
        layers.append(LayerSpec("upsamp", LayerKind.UPSAMPLE, 1, 1, 1, (4, 4), notes="nearest"))
    return StackSpec(COARSE_VGG, input_size, 3, layers)


def fine_spec(width_scale: Fraction = Fraction(1), input_size: Pair = OUTPUT_SIZE,
              pool_after_conv: bool = True) -> StackSpec:
    """
    Stack 2: 9x9 свёртка (63 канала), max pool 3x3 stride 1 с сохранением размера,
    конкатенация с 1-канальным выходом coarse-стека (64), две свёртки 5x5.
    """
    joined = scale_channels(64, width_scale, "2.2")
    edge = joined - 1
    if edge < 1:
        raise ConfigError(f"слой 2.1: при width_scale {width_scale} не остаётся каналов")
    hidden = scale_channels(64, width_scale, "2.3")
    layers = [LayerSpec("2.1", LayerKind.CONV, 1, 3, edge, (9, 9), relu=True, notes="same")]
    if pool_after_conv:
        layers.append(LayerSpec("2.1p", LayerKind.MAXPOOL, 1, edge, edge, (3, 3), 1, stride=1,
                                notes="same"))
    layers.append(LayerSpec("2.2", LayerKind.CONCAT, 1, edge, joined, notes="+coarse"))
    layers.append(LayerSpec("2.3", LayerKind.CONV, 1, joined, hidden, (5, 5), relu=True, notes="same"))
    layers.append(LayerSpec("2.4", LayerKind.CONV, 1, hidden, 1, (5, 5), notes="same"))
    return StackSpec(FINE, input_size, 3, layers)


def builtin_arch(which: str = "both", width_scale: Fraction = Fraction(1),
               input_size: Pair = DILATED_INPUT, pool_after_conv: bool = True,
               upsample_mode: str = "reshape") -> ArchSpec:
    """Стеки для analyze: ours | vgg | both; VGG получает вход вдвое больше (160x120 при 80x60)"""
    stacks = []
    if which in ("ours", "both"):
        stacks.append(coarse_dilated_spec(width_scale, input_size))
    if which in ("vgg", "both"):
        vgg_input = (input_size[0] * 2, input_size[1] * 2)
        stacks.append(coarse_vgg_spec(width_scale, vgg_input, input_size, upsample_mode))
    if not stacks:
        raise ConfigError(f"архитектура: ours, vgg или both, получено {which}")
    stacks.append(fine_spec(width_scale, input_size, pool_after_conv))
    return ArchSpec(tuple(stacks), width_scale)


# ---------------------------------------------------------------- геометрия

@dataclass(frozen=True)
class GeometryRow:
    stack: str
    layer: str
    kind: LayerKind
    in_size: Pair
    out_size: Pair
    channels: int
    receptive_field: Optional[Pair]


def layer_padding(layer: LayerSpec) -> Pair:
    """Свёртки и пулинг со stride 1 сохраняют размер (same), полносвязные слои без padding, иначе floor"""
    if layer.kind is LayerKind.CONV:
        return same_padding(layer.kernel, layer.dilation)
    if layer.kind is LayerKind.MAXPOOL and layer.stride == 1:
        return same_padding(layer.kernel, 1)
    return 0, 0


def stack_geometry(stack: StackSpec, input_size: Optional[Pair] = None) -> List[GeometryRow]:
    size = tuple(input_size or stack.input_size)
    rows = []
    rf_layers = []
    rf: Optional[Pair] = (1, 1)
    channels = stack.in_channels
    for layer in stack.layers:
        in_size = size
        if layer.kind in PARAMETRIC:
            if layer.kind is LayerKind.FC_AS_CONV and layer.kernel != size:
                raise GeometryError(
                    f"слой {layer.name}: полносвязный слой ждёт карту "
                    f"{layer.kernel[0]}x{layer.kernel[1]}, пришла {size[0]}x{size[1]}"
                )
            for _ in range(layer.conv_count):
                size = conv_output_size(size, layer.kernel, layer.dilation, layer_padding(layer), 1)
                rf_layers.append((layer.kernel, layer.dilation, 1))
        elif layer.kind is LayerKind.MAXPOOL:
            size = conv_output_size(size, layer.kernel, 1, layer_padding(layer), layer.stride)
            rf_layers.append((layer.kernel, 1, layer.stride))
        elif layer.kind is LayerKind.UPSAMPLE:
            size = (size[0] * layer.kernel[0], size[1] * layer.kernel[1])
        elif layer.kind is LayerKind.RESHAPE:
            if channels * size[0] * size[1] != layer.out_channels * layer.kernel[0] * layer.kernel[1]:
                raise GeometryError(
                    f"слой {layer.name}: {channels}x{size[0]}x{size[1]} нельзя разложить в "
                    f"{layer.out_channels}x{layer.kernel[0]}x{layer.kernel[1]}"
                )
            size = layer.kernel
            rf = None
        if min(size) < 1:
            raise GeometryError(f"стек {stack.name}, слой {layer.name}: выход {size[0]}x{size[1]}")
        if rf is not None and rf_layers:
            rf = receptive_field(rf_layers)
        channels = layer.out_channels
        rows.append(GeometryRow(stack.name, layer.name, layer.kind, in_size, size, channels, rf))
    return rows


def geometry_report(arch: ArchSpec, input_size: Optional[Pair] = None) -> List[GeometryRow]:
    """Размер и рецептивное поле каждого слоя; input_size переопределяет вход всех стеков"""
    rows = []
    for stack in arch.stacks:
        rows.extend(stack_geometry(stack, input_size))
    return rows


# ---------------------------------------------------------------- параметры

@dataclass(frozen=True)
class ParamReport:
    per_layer: Tuple[Tuple[str, int], ...]
    stack_totals: Dict[str, int]
    framework_totals: Dict[str, int]
    ratio_vgg_over_ours: Optional[Fraction]
    ratio_framework_vgg_over_ours: Optional[Fraction]

    def summary_lines(self) -> List[str]:
        lines = [f"total_{name}={total}" for name, total in self.stack_totals.items()]
        lines += [f"total_framework_{name}={total}" for name, total in self.framework_totals.items()]
        if self.ratio_framework_vgg_over_ours is not None:
            lines.append(f"ratio_framework_vgg_over_ours={float(self.ratio_framework_vgg_over_ours):.6f}")
        if self.ratio_vgg_over_ours is not None:
            lines.append(f"ratio_vgg_over_ours={float(self.ratio_vgg_over_ours):.6f}")
        return lines


def count_parameters(arch: ArchSpec) -> ParamReport:
    """out*in*k_h*k_w + out на свёртку; полносвязные считаются так же (ядро на всю карту)"""
    per_layer = []
    totals: Dict[str, int] = {}
    for stack in arch.stacks:
        total = 0
        for layer in stack.layers:
            count = layer.parameter_count()
            per_layer.append((f"{stack.name}/{layer.name}", count))
            total += count
        totals[stack.name] = total

    framework = {}
    if FINE in totals:
        for coarse, label in ((COARSE_OURS, "ours"), (COARSE_VGG, "vgg")):
            if coarse in totals:
                framework[label] = totals[coarse] + totals[FINE]

    ratio = None
    if COARSE_OURS in totals and COARSE_VGG in totals:
        ratio = Fraction(totals[COARSE_VGG], totals[COARSE_OURS])
    framework_ratio = None
    if "ours" in framework and "vgg" in framework:
        framework_ratio = Fraction(framework["vgg"], framework["ours"])

    if ratio is not None:
        logger.info(f"📊 Параметры: VGG {totals[COARSE_VGG]}, OUR {totals[COARSE_OURS]}, "
                    f"отношение {float(ratio):.3f}")
    return ParamReport(tuple(per_layer), totals, framework, ratio, framework_ratio)


# ---------------------------------------------------------------- текстовая таблица

_ROWS = ("kind", "size", "conv", "in", "chan", "ker.sz", "dilation", "stride", "relu", "notes", "params")


def _fmt_size(size: Pair) -> str:
    return f"{size[0]}x{size[1]}"


def _parse_size(text: str) -> Pair:
    h, w = text.split("x")
    return int(h), int(w)


def render_stack(stack: StackSpec, width_scale: Fraction = Fraction(1)) -> List[str]:
    """Атрибуты по строкам, слои по столбцам через табуляцию"""
    geometry = {row.layer: row for row in stack_geometry(stack)}
    cells: Dict[str, List[str]] = {key: [] for key in _ROWS}
    total = 0
    for layer in stack.layers:
        params = layer.parameter_count()
        total += params
        cells["kind"].append(layer.kind.value)
        cells["size"].append(_fmt_size(geometry[layer.name].out_size))
        cells["conv"].append(str(layer.conv_count) if layer.kind in PARAMETRIC else "-")
        cells["in"].append(str(layer.in_channels))
        cells["chan"].append(str(layer.out_channels))
        cells["ker.sz"].append(_fmt_size(layer.kernel))
        cells["dilation"].append(str(layer.dilation))
        cells["stride"].append(str(layer.stride))
        cells["relu"].append("yes" if layer.relu else "no")
        cells["notes"].append(layer.notes or "-")
        cells["params"].append(str(params))

    lines = [
        f"stack\t{stack.name}",
        f"input\t{_fmt_size(stack.input_size)}",
        f"in_channels\t{stack.in_channels}",
        f"width_scale\t{Fraction(width_scale)}",
        "\t".join(["Layer"] + [layer.name for layer in stack.layers]),
    ]
    lines += ["\t".join([key] + cells[key]) for key in _ROWS]
    lines.append(f"total_params\t{total}")
    return lines


def parse_table(text: str) -> ArchSpec:
    """Обратный разбор render_stack; производные строки size/params игнорируются"""
    stacks = []
    width_scale = Fraction(1)
    for block in text.strip("\n").split("\n\n"):
        rows = {}
        for line in block.splitlines():
            if "\t" not in line:
                continue
            key, *values = line.split("\t")
            rows[key] = values
        if "stack" not in rows:
            continue
        try:
            width_scale = Fraction(rows["width_scale"][0])
            layers = []
            for i, name in enumerate(rows["Layer"]):
                conv = rows["conv"][i]
                notes = rows["notes"][i]
                layers.append(LayerSpec(
                    name=name,
                    kind=LayerKind(rows["kind"][i]),
                    conv_count=1 if conv == "-" else int(conv),
                    in_channels=int(rows["in"][i]),
                    out_channels=int(rows["chan"][i]),
                    kernel=_parse_size(rows["ker.sz"][i]),
                    dilation=int(rows["dilation"][i]),
                    stride=int(rows["stride"][i]),
                    relu=rows["relu"][i] == "yes",
                    notes="" if notes == "-" else notes,
                ))
            stacks.append(StackSpec(rows["stack"][0], _parse_size(rows["input"][0]),
                                    int(rows["in_channels"][0]), tuple(layers)))
        except (KeyError, IndexError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"таблица архитектуры не разбирается: {e}")
    if not stacks:
        raise ConfigError("таблица архитектуры не содержит стеков")
    return ArchSpec(tuple(stacks), width_scale)


def render_geometry(rows: Sequence[GeometryRow]) -> List[str]:
    lines = ["stack\tlayer\tkind\tin\tout\treceptive_field"]
    for row in rows:
        rf = _fmt_size(row.receptive_field) if row.receptive_field else "global"
        lines.append(f"{row.stack}\t{row.layer}\t{row.kind.value}\t{_fmt_size(row.in_size)}\t"
                     f"{_fmt_size(row.out_size)}\t{rf}")
    return lines
