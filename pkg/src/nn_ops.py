"""
Примитивы слоёв с прямым и обратным проходом: l-dilated свёртка, ReLU, max pooling,
nearest upsample, конкатенация каналов, reshape и калькулятор рецептивного поля
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import GeometryError, ShapeError
from tensor_core import Tensor4, check_shape

logger = logging.getLogger(__name__)

Pair = Tuple[int, int]


@dataclass(frozen=True)
class Backprop:
    """Результат обратного прохода: градиенты по входам и по параметрам"""
    inputs: Tuple[Tensor4, ...]
    params: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def input(self) -> Tensor4:
        return self.inputs[0]


@dataclass(frozen=True)
class GradPair:
    output: Tensor4
    backward: Callable[[Tensor4], Backprop]


def _pair(value: Union[int, Sequence[int]]) -> Pair:
    if isinstance(value, (int, np.integer)):
        return int(value), int(value)
    a, b = value
    return int(a), int(b)


def same_padding(kernel: Union[int, Pair], dilation: int = 1) -> Pair:
    """pad = l*(k-1)/2 на сторону; сохраняет размер при stride 1"""
    kh, kw = _pair(kernel)
    return dilation * (kh - 1) // 2, dilation * (kw - 1) // 2


def conv_output_size(size: Pair, kernel: Union[int, Pair], dilation: int = 1,
                     padding: Union[int, Pair] = 0, stride: int = 1) -> Pair:
    (h, w), (kh, kw), (ph, pw) = size, _pair(kernel), _pair(padding)
    span_h = dilation * (kh - 1) + 1
    span_w = dilation * (kw - 1) + 1
    return (h + 2 * ph - span_h) // stride + 1, (w + 2 * pw - span_w) // stride + 1


def _check_upstream(upstream: Tensor4, expected: Tuple[int, ...], op: str):
    if upstream.shape != tuple(expected):
        raise ShapeError(f"{op}: upstream {upstream.shape}, ожидалось {tuple(expected)}")


# ---------------------------------------------------------------- свёртка

@dataclass(frozen=True)
class ConvParams:
    """
    Параметры свёртки: weights (out, in, k_h, k_w), bias (out,), dilation l,
    stride и нулевой padding (pad_h, pad_w).
    Чётное ядро допустимо только без padding (плотный слой как свёртка).
    """
    weights: Tensor4
    bias: np.ndarray
    dilation: int = 1
    stride: int = 1
    padding: Pair = (0, 0)

    def __post_init__(self):
        bias = np.array(self.bias, dtype=self.weights.data.dtype, copy=True).reshape(-1)
        bias.flags.writeable = False
        object.__setattr__(self, 'bias', bias)
        object.__setattr__(self, 'padding', _pair(self.padding))
        if bias.shape[0] != self.out_channels:
            raise ShapeError(f"bias {bias.shape[0]} != out_channels {self.out_channels}")
        if self.dilation < 1 or self.stride < 1:
            raise GeometryError(f"dilation и stride должны быть >= 1: {self.dilation}, {self.stride}")
        if min(self.padding) < 0:
            raise GeometryError(f"padding не может быть отрицательным: {self.padding}")
        kh, kw = self.kernel
        if (kh % 2 == 0 or kw % 2 == 0) and self.padding != (0, 0):
            raise ShapeError(f"чётное ядро {kh}x{kw} допустимо только без padding")

    @classmethod
    def same(cls, weights: Tensor4, bias: np.ndarray, dilation: int = 1) -> "ConvParams":
        kernel = weights.shape[2:]
        return cls(weights, bias, dilation=dilation, padding=same_padding(kernel, dilation))

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self) -> Pair:
        return self.weights.shape[2], self.weights.shape[3]

    def parameter_count(self) -> int:
        # от dilation не зависит
        return self.weights.size + self.out_channels


@dataclass(frozen=True)
class ConvContext:
    """Сохранённое для обратного прохода"""
    input: Tensor4
    params: ConvParams
    output_shape: Tuple[int, int, int, int]


def _gather_patches(x: np.ndarray, p: ConvParams, out_hw: Pair) -> np.ndarray:
    """im2col: строки (n*oh*ow), столбцы (c*kh*kw) в порядке весов"""
    n, c = x.shape[:2]
    kh, kw = p.kernel
    ph, pw = p.padding
    l, s = p.dilation, p.stride
    oh, ow = out_hw
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    windows = sliding_window_view(xp, (l * (kh - 1) + 1, l * (kw - 1) + 1), axis=(2, 3))
    windows = windows[:, :, ::s, ::s, ::l, ::l][:, :, :oh, :ow]
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)


def conv2d_dilated(input: Tensor4, p: ConvParams) -> GradPair:
    """
    output(n,o,y,x) = bias(o) + sum_{c,i,j} input(n, c, y*s + l*i - pad_h, x*s + l*j - pad_w) * w(o,c,i,j)
    Вне входа: нули. Обычная свёртка идёт тем же путём при l = 1.
    """
    n, c, h, w = input.shape
    if c != p.in_channels:
        raise ShapeError(f"conv: вход {c} каналов, веса ожидают {p.in_channels}")
    oh, ow = conv_output_size((h, w), p.kernel, p.dilation, p.padding, p.stride)
    if oh < 1 or ow < 1:
        raise GeometryError(
            f"conv: выход {oh}x{ow} для входа {h}x{w}, ядра {p.kernel}, dilation {p.dilation}"
        )

    dtype = np.result_type(input.data.dtype, p.weights.data.dtype)
    cols = _gather_patches(input.data.astype(dtype, copy=False), p, (oh, ow))
    w_mat = p.weights.data.reshape(p.out_channels, -1).astype(dtype, copy=False)
    out = (cols @ w_mat.T).reshape(n, oh, ow, p.out_channels).transpose(0, 3, 1, 2)
    out = out + p.bias.astype(dtype)[None, :, None, None]
    output = Tensor4(np.ascontiguousarray(out))

    ctx = ConvContext(input, p, output.shape)

    def backward(upstream: Tensor4) -> Backprop:
        d_input, d_weights, d_bias = conv2d_backward(upstream, ctx)
        return Backprop((d_input,), {'weight': d_weights.data, 'bias': d_bias})

    return GradPair(output, backward)


def conv2d_backward(upstream: Tensor4, ctx: ConvContext) -> Tuple[Tensor4, Tensor4, np.ndarray]:
    """Сопряжённый к свёртке: (d_input, d_weights, d_bias)"""
    _check_upstream(upstream, ctx.output_shape, "conv2d_backward")
    p = ctx.params
    x = ctx.input.data
    n, c, h, w = x.shape
    _, o, oh, ow = ctx.output_shape
    kh, kw = p.kernel
    ph, pw = p.padding
    l, s = p.dilation, p.stride
    dtype = np.result_type(x.dtype, p.weights.data.dtype)

    g = upstream.data.astype(dtype, copy=False).transpose(0, 2, 3, 1).reshape(-1, o)
    d_bias = g.sum(axis=0, dtype=np.float64).astype(dtype)

    cols = _gather_patches(x.astype(dtype, copy=False), p, (oh, ow))
    d_weights = (g.T @ cols).reshape(p.weights.shape)

    w_mat = p.weights.data.reshape(o, -1).astype(dtype, copy=False)
    d_cols = (g @ w_mat).reshape(n, oh, ow, c, kh, kw)
    d_padded = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=dtype)
    for i in range(kh):
        for j in range(kw):
            y0, x0 = i * l, j * l
            d_padded[:, :, y0:y0 + s * (oh - 1) + 1:s, x0:x0 + s * (ow - 1) + 1:s] += \
                d_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    d_input = d_padded[:, :, ph:ph + h, pw:pw + w]

    return (Tensor4(d_input.astype(x.dtype, copy=False)),
            Tensor4(d_weights.astype(p.weights.data.dtype, copy=False)),
            d_bias.astype(p.weights.data.dtype, copy=False))


def conv2d_naive(input: np.ndarray, weights: np.ndarray, bias: np.ndarray,
                 dilation: int = 1, padding: Union[int, Pair] = 0, stride: int = 1) -> np.ndarray:
    """Прямая сумма по определению l-dilated свёртки. Только как оракул в тестах"""
    n, c, h, w = input.shape
    o, _, kh, kw = weights.shape
    ph, pw = _pair(padding)
    oh, ow = conv_output_size((h, w), (kh, kw), dilation, (ph, pw), stride)
    out = np.zeros((n, o, oh, ow), dtype=np.float64)
    for b in range(n):
        for oc in range(o):
            for y in range(oh):
                for x in range(ow):
                    acc = float(bias[oc])
                    for ic in range(c):
                        for i in range(kh):
                            sy = y * stride + dilation * i - ph
                            if sy < 0 or sy >= h:
                                continue
                            for j in range(kw):
                                sx = x * stride + dilation * j - pw
                                if 0 <= sx < w:
                                    acc += float(input[b, ic, sy, sx]) * float(weights[oc, ic, i, j])
                    out[b, oc, y, x] = acc
    return out


# ---------------------------------------------------------------- активации и пулинг

def relu(input: Tensor4) -> GradPair:
    """max(0, x); производная в нуле равна 0"""
    x = input.data
    mask = x > 0
    output = Tensor4(np.where(mask, x, 0).astype(x.dtype))

    def backward(upstream: Tensor4) -> Backprop:
        _check_upstream(upstream, input.shape, "relu")
        return Backprop((Tensor4(np.where(mask, upstream.data, 0).astype(upstream.data.dtype)),))

    return GradPair(output, backward)


def maxpool2d(input: Tensor4, window: Union[int, Pair], stride: Union[int, Pair],
              padding: Union[int, Pair] = 0) -> GradPair:
    """
    Максимум по окну; padding заполняется -inf.
    Обратный проход отдаёт upstream в позицию argmax (первую при равенстве, row-major).
    """
    (kh, kw), (sh, sw), (ph, pw) = _pair(window), _pair(stride), _pair(padding)
    n, c, h, w = input.shape
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    if kh > h + 2 * ph or kw > w + 2 * pw or oh < 1 or ow < 1:
        raise GeometryError(f"maxpool: окно {kh}x{kw} больше входа {h}x{w} (+pad {ph},{pw})")

    x = input.data
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=-np.inf) if ph or pw else x
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :oh, :ow]
    flat = windows.reshape(n, c, oh, ow, kh * kw)
    arg = flat.argmax(axis=-1)
    output = Tensor4(np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0].astype(x.dtype))

    def backward(upstream: Tensor4) -> Backprop:
        _check_upstream(upstream, output.shape, "maxpool2d")
        rows = np.arange(oh)[None, None, :, None] * sh + arg // kw
        cols = np.arange(ow)[None, None, None, :] * sw + arg % kw
        nn_idx = np.broadcast_to(np.arange(n)[:, None, None, None], arg.shape)
        cc_idx = np.broadcast_to(np.arange(c)[None, :, None, None], arg.shape)
        d_padded = np.zeros(xp.shape, dtype=upstream.data.dtype)
        np.add.at(d_padded, (nn_idx, cc_idx, rows, cols), upstream.data)
        return Backprop((Tensor4(np.ascontiguousarray(d_padded[:, :, ph:ph + h, pw:pw + w])),))

    return GradPair(output, backward)


def upsample_nearest(input: Tensor4, factor: Union[int, Pair]) -> GradPair:
    fh, fw = _pair(factor)
    if fh < 1 or fw < 1:
        raise GeometryError(f"upsample: коэффициент должен быть >= 1, получено {(fh, fw)}")
    n, c, h, w = input.shape
    output = Tensor4(np.repeat(np.repeat(input.data, fh, axis=2), fw, axis=3))

    def backward(upstream: Tensor4) -> Backprop:
        _check_upstream(upstream, output.shape, "upsample_nearest")
        blocks = upstream.data.reshape(n, c, h, fh, w, fw)
        return Backprop((Tensor4(blocks.sum(axis=(3, 5)).astype(upstream.data.dtype)),))

    return GradPair(output, backward)


def concat_channels(a: Tensor4, b: Tensor4) -> GradPair:
    """Каналы a, затем каналы b"""
    (na, ca, ha, wa), (nb, cb, hb, wb) = a.shape, b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(f"concat: n/h/w не совпадают: {a.shape} vs {b.shape}")
    dtype = np.result_type(a.data.dtype, b.data.dtype)
    output = Tensor4(np.concatenate([a.data.astype(dtype), b.data.astype(dtype)], axis=1))

    def backward(upstream: Tensor4) -> Backprop:
        _check_upstream(upstream, output.shape, "concat_channels")
        g = upstream.data
        return Backprop((Tensor4(np.ascontiguousarray(g[:, :ca])),
                         Tensor4(np.ascontiguousarray(g[:, ca:]))))

    return GradPair(output, backward)


def reshape_op(input: Tensor4, shape: Sequence[int]) -> GradPair:
    output = input.reshape(check_shape(shape))

    def backward(upstream: Tensor4) -> Backprop:
        _check_upstream(upstream, output.shape, "reshape")
        return Backprop((upstream.reshape(input.shape),))

    return GradPair(output, backward)


# ---------------------------------------------------------------- рецептивное поле

def receptive_field(layers: Sequence[Tuple]) -> Pair:
    """
    layers: (kernel, dilation, stride), kernel: int или (k_h, k_w).
    rf += (k - 1) * l * jump; jump *= stride; старт rf = 1, jump = 1.
    """
    if not layers:
        raise GeometryError("receptive_field: пустой список слоёв")
    rf_h = rf_w = 1
    jump_h = jump_w = 1
    for kernel, dilation, stride in layers:
        kh, kw = _pair(kernel)
        sh, sw = _pair(stride)
        rf_h += (kh - 1) * dilation * jump_h
        rf_w += (kw - 1) * dilation * jump_w
        jump_h *= sh
        jump_w *= sw
    return rf_h, rf_w
