"""
Пары RGB/глубина: PPM P6 и 16-битные PGM P5, манифест, bilinear resize с маской,
детерминированное разбиение train/val/test, синтетические сцены и батчи
"""

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigError, DatasetError, FormatError
from tensor_core import Rng, Tensor4

logger = logging.getLogger(__name__)

Size = Tuple[int, int]

# Разбиение размеченного NYU-V2: 800 + 200 + 449 = 1449
NYU_SPLIT = (800, 200, 449)
NYU_TOTAL = sum(NYU_SPLIT)

SPLITS = ("train", "val", "test")
MANIFEST_HEADER = {"depth_unit": "mm", "rgb_norm": "unit"}
MM_PER_M = 1000.0
MAX_DEPTH_MM = 65535


@dataclass(frozen=True, eq=False)
class Sample:
    """rgb (3, h, w) в [0, 1]; depth (1, h, w) в метрах, 0 вне маски; mask (1, h, w)"""
    id: str
    rgb: np.ndarray
    depth: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        rgb = np.asarray(self.rgb, dtype=np.float32)
        depth = np.asarray(self.depth, dtype=np.float32)
        mask = np.asarray(self.mask, dtype=bool)
        if rgb.ndim != 3 or rgb.shape[0] != 3:
            raise DatasetError(f"{self.id}: rgb должен быть (3, h, w), получено {rgb.shape}")
        if depth.shape != (1,) + rgb.shape[1:] or mask.shape != depth.shape:
            raise DatasetError(f"{self.id}: размеры rgb {rgb.shape}, depth {depth.shape}, mask {mask.shape}")
        if not np.all(np.isfinite(depth)) or np.any(depth < 0):
            raise DatasetError(f"{self.id}: глубина должна быть конечной и неотрицательной")
        depth = np.where(mask, depth, 0).astype(np.float32)
        object.__setattr__(self, 'rgb', rgb)
        object.__setattr__(self, 'depth', depth)
        object.__setattr__(self, 'mask', mask)

    @property
    def size(self) -> Size:
        return int(self.rgb.shape[1]), int(self.rgb.shape[2])


# ---------------------------------------------------------------- netpbm

def _read_netpbm(path: str, magic: bytes) -> Tuple[int, int, int, bytes]:
    """Заголовок: magic, ширина, высота, maxval через пробелы; '#': комментарий до конца строки"""
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise FormatError(path, f"не удаётся прочитать: {e.strerror}")

    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError(path, "заголовок оборван")
        tokens.append(data[start:pos])
    if tokens[0] != magic:
        raise FormatError(path, f"ожидался {magic.decode()}, получено {tokens[0][:8]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(path, "нечисловые поля в заголовке")
    if width < 1 or height < 1:
        raise FormatError(path, f"размер {width}x{height}")
    if not 0 < maxval <= 65535:
        raise FormatError(path, f"неподдерживаемый maxval {maxval}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError(path, "нет разделителя после заголовка")
    return width, height, maxval, data[pos + 1:]


def read_ppm(path: str) -> np.ndarray:
    """P6, maxval 255 -> uint8 (3, h, w)"""
    width, height, maxval, raster = _read_netpbm(path, b"P6")
    if maxval != 255:
        raise FormatError(path, f"неподдерживаемый maxval {maxval}: ожидается 255")
    expected = width * height * 3
    if len(raster) < expected:
        raise FormatError(path, f"растр оборван: {len(raster)} байт из {expected}")
    pixels = np.frombuffer(raster[:expected], dtype=np.uint8).reshape(height, width, 3)
    return np.ascontiguousarray(pixels.transpose(2, 0, 1))


def read_pgm(path: str) -> Tuple[np.ndarray, int]:
    """P5 -> (значения (h, w), maxval); при maxval > 255: 16 бит big-endian"""
    width, height, maxval, raster = _read_netpbm(path, b"P5")
    dtype = np.dtype('>u2') if maxval > 255 else np.dtype(np.uint8)
    expected = width * height * dtype.itemsize
    if len(raster) < expected:
        raise FormatError(path, f"растр оборван: {len(raster)} байт из {expected}")
    values = np.frombuffer(raster[:expected], dtype=dtype).reshape(height, width)
    return values.astype(np.uint16), maxval


def write_ppm(path: str, rgb: np.ndarray):
    rgb = np.asarray(rgb, dtype=np.uint8)
    _, height, width = rgb.shape
    with open(path, 'wb') as f:
        f.write(f"P6\n{width} {height}\n255\n".encode('ascii'))
        f.write(np.ascontiguousarray(rgb.transpose(1, 2, 0)).tobytes())


def write_pgm(path: str, values: np.ndarray, maxval: int = MAX_DEPTH_MM):
    values = np.asarray(values)
    height, width = values.shape
    dtype = np.dtype('>u2') if maxval > 255 else np.dtype(np.uint8)
    with open(path, 'wb') as f:
        f.write(f"P5\n{width} {height}\n{maxval}\n".encode('ascii'))
        f.write(values.astype(dtype).tobytes())


# ---------------------------------------------------------------- resize

def _axis_weights(n_in: int, n_out: int):
    # центры пикселей со смещением на половину
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * n_in / n_out - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def _interpolate(values: np.ndarray, ry, rx) -> np.ndarray:
    y0, y1, fy = ry
    x0, x1, fx = rx
    top = values[:, y0][:, :, x0] * (1 - fx) + values[:, y0][:, :, x1] * fx
    bottom = values[:, y1][:, :, x0] * (1 - fx) + values[:, y1][:, :, x1] * fx
    return top * (1 - fy)[:, None] + bottom * fy[:, None]


def resize_bilinear(values: np.ndarray, size: Size,
                    mask: Optional[np.ndarray] = None) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    values (c, h, w) -> (c, H, W). Если задана mask (h, w), целевой пиксель валиден,
    только когда ни один источник с ненулевым весом не замаскирован.
    """
    values = np.asarray(values, dtype=np.float64)
    _, h, w = values.shape
    if tuple(size) == (h, w):
        return values.copy(), None if mask is None else np.asarray(mask, dtype=bool).copy()
    ry, rx = _axis_weights(h, size[0]), _axis_weights(w, size[1])
    if mask is None:
        return _interpolate(values, ry, rx), None
    mask = np.asarray(mask, dtype=bool)
    invalid = _interpolate((~mask)[None].astype(np.float64), ry, rx)[0]
    out_mask = invalid <= 0.0
    out = _interpolate(np.where(mask[None], values, 0.0), ry, rx)
    return np.where(out_mask[None], out, 0.0), out_mask


# ---------------------------------------------------------------- пары

def load_pair(rgb_path: str, depth_path: str, size: Size, sample_id: Optional[str] = None) -> Sample:
    """PPM + 16-битный PGM (мм) -> Sample на целевом размере; нулевая глубина маскируется"""
    rgb = read_ppm(rgb_path)
    raw, maxval = read_pgm(depth_path)
    if maxval <= 255:
        raise FormatError(depth_path, f"неподдерживаемый maxval {maxval}: глубина должна быть 16-битной")
    if raw.shape != rgb.shape[1:]:
        raise FormatError(depth_path, f"размер {raw.shape[1]}x{raw.shape[0]} не совпадает с "
                                      f"{rgb.shape[2]}x{rgb.shape[1]} у {rgb_path}")
    rgb_out, _ = resize_bilinear(rgb.astype(np.float64) / 255.0, size)
    depth, mask = resize_bilinear(raw[None].astype(np.float64) / MM_PER_M, size, mask=raw > 0)
    return Sample(sample_id or os.path.splitext(os.path.basename(rgb_path))[0],
                  np.clip(rgb_out, 0.0, 1.0), depth, mask[None])


def save_pair(sample: Sample, rgb_path: str, depth_path: str):
    rgb = np.rint(np.clip(sample.rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    mm = np.rint(sample.depth[0].astype(np.float64) * MM_PER_M)
    # валидный пиксель не должен превратиться в 0 (= нет данных)
    mm = np.where(sample.mask[0], np.clip(mm, 1, MAX_DEPTH_MM), 0)
    write_ppm(rgb_path, rgb)
    write_pgm(depth_path, mm.astype(np.uint16), MAX_DEPTH_MM)


# ---------------------------------------------------------------- манифест

@dataclass(frozen=True)
class ManifestEntry:
    id: str
    rgb: str
    depth: str


def write_manifest(path: str, entries: Sequence[ManifestEntry], header: Optional[Dict[str, str]] = None):
    lines = [f"# {key}={value}" for key, value in (header or MANIFEST_HEADER).items()]
    lines += [f"{e.id}\t{e.rgb}\t{e.depth}" for e in entries]
    with open(path, 'w', encoding='utf-8') as f:
        f.write("\n".join(lines) + "\n")


def read_manifest(path: str) -> Tuple[Dict[str, str], List[ManifestEntry]]:
    """Относительные пути разрешаются от каталога манифеста"""
    try:
        with open(path, encoding='utf-8') as f:
            text = f.read()
    except OSError as e:
        raise FormatError(path, f"не удаётся прочитать: {e.strerror}")
    base = os.path.dirname(os.path.abspath(path))
    header: Dict[str, str] = {}
    entries: List[ManifestEntry] = []
    seen = set()
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, sep, value = line[1:].strip().partition("=")
            if sep:
                header[key.strip()] = value.strip()
            continue
        parts = line.split("\t")
        if len(parts) != 3 or not all(parts):
            raise FormatError(path, f"строка {number}: ожидается id<TAB>rgb<TAB>depth")
        sample_id, rgb, depth = parts
        if sample_id in seen:
            raise FormatError(path, f"строка {number}: повторный id {sample_id}")
        seen.add(sample_id)
        entries.append(ManifestEntry(sample_id, os.path.join(base, rgb), os.path.join(base, depth)))
    for key, expected in MANIFEST_HEADER.items():
        if header.get(key, expected) != expected:
            raise FormatError(path, f"{key}={header[key]} не поддерживается (ожидается {expected})")
    if not entries:
        raise DatasetError(f"{path}: манифест пуст")
    return header, entries


# ---------------------------------------------------------------- разбиение

@dataclass(frozen=True)
class DatasetIndex:
    entries: Tuple[str, ...]
    splits: Dict[str, Tuple[int, int]]
    seed: int

    def ids(self, split: str) -> List[str]:
        if split not in self.splits:
            raise DatasetError(f"неизвестный сплит {split}")
        start, stop = self.splits[split]
        return list(self.entries[start:stop])


def default_split_sizes(total: int) -> Tuple[int, int, int]:
    """800/200/449 для 1449, иначе те же пропорции"""
    if total == NYU_TOTAL:
        return NYU_SPLIT
    train = round(total * NYU_SPLIT[0] / NYU_TOTAL)
    val = round(total * NYU_SPLIT[1] / NYU_TOTAL)
    return train, val, total - train - val


def shuffle_split(ids: Sequence[str], seed: int,
                  sizes: Optional[Tuple[int, int, int]] = None) -> DatasetIndex:
    ids = list(ids)
    sizes = tuple(sizes) if sizes is not None else default_split_sizes(len(ids))
    if len(sizes) != 3 or any(s < 0 for s in sizes):
        raise DatasetError(f"размеры сплитов должны быть тремя неотрицательными числами: {sizes}")
    if sum(sizes) > len(ids):
        raise DatasetError(f"сплиты {sizes} требуют {sum(sizes)} образцов, есть {len(ids)}")
    order = Rng(seed).permutation(len(ids))
    shuffled = tuple(ids[i] for i in order[:sum(sizes)])
    splits = {}
    start = 0
    for name, count in zip(SPLITS, sizes):
        splits[name] = (start, start + count)
        start += count
    return DatasetIndex(shuffled, splits, seed)


# ---------------------------------------------------------------- синтетика

def synth_scene(seed: int, size: Size, index: int = 0) -> Sample:
    """
    Фоновая плоскость с градиентом глубины и 2-5 прямоугольников на глубинах 1-10 м.
    Яркость убывает с глубиной, у каждого прямоугольника свой оттенок.
    """
    h, w = size
    if h < 8 or w < 8:
        raise ConfigError(f"синтетическая сцена требует h, w >= 8, получено {h}x{w}")
    rng = Rng(seed, key=(index,))
    yy, xx = np.meshgrid(np.linspace(-0.5, 0.5, h), np.linspace(-0.5, 0.5, w), indexing='ij')
    base = rng.uniform(4.0, 8.0, ())
    gy, gx = rng.uniform(-2.0, 2.0, (2,))
    depth = np.clip(base + gy * yy + gx * xx, 1.0, 10.0)
    hue = np.full((3, h, w), 0.8)

    for _ in range(int(rng.integers(2, 6))):
        rh = int(rng.integers(2, h // 2 + 1))
        rw = int(rng.integers(2, w // 2 + 1))
        y0 = int(rng.integers(0, h - rh + 1))
        x0 = int(rng.integers(0, w - rw + 1))
        depth[y0:y0 + rh, x0:x0 + rw] = rng.uniform(1.0, 10.0, ())
        hue[:, y0:y0 + rh, x0:x0 + rw] = rng.uniform(0.3, 1.0, (3,))[:, None, None]

    shading = 1.0 - 0.7 * (depth - 1.0) / 9.0
    rgb = np.clip(hue * shading[None], 0.0, 1.0)
    return Sample(f"synth-{seed}-{index:04d}", rgb, depth[None], np.ones((1, h, w), dtype=bool))


# ---------------------------------------------------------------- датасет и батчи

@dataclass(eq=False)
class Dataset:
    samples: Dict[str, Sample]
    index: DatasetIndex
    size: Size
    _coarse_cache: Dict[Tuple[str, Size], np.ndarray] = field(default_factory=dict, repr=False)

    def split(self, name: str) -> List[Sample]:
        return [self.samples[sample_id] for sample_id in self.index.ids(name)]

    def coarse_rgb(self, sample: Sample, size: Size) -> np.ndarray:
        """RGB на входном размере coarse-стека (VGG: 160x120 при 80x60)"""
        if tuple(size) == sample.size:
            return sample.rgb
        key = (sample.id, tuple(size))
        if key not in self._coarse_cache:
            resized, _ = resize_bilinear(sample.rgb, size)
            self._coarse_cache[key] = resized.astype(np.float32)
        return self._coarse_cache[key]


def load_manifest_dataset(path: str, size: Size, seed: int,
                          sizes: Optional[Tuple[int, int, int]] = None, workers: int = 1) -> Dataset:
    """Декодирование параллельно; порядок образцов не зависит от числа потоков"""
    header, entries = read_manifest(path)
    logger.info(f"📂 Манифест {path}: {len(entries)} пар, {header}")

    def load(entry: ManifestEntry) -> Sample:
        return load_pair(entry.rgb, entry.depth, size, entry.id)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            loaded = list(pool.map(load, entries))
    else:
        loaded = [load(entry) for entry in entries]
    samples = {sample.id: sample for sample in loaded}
    return Dataset(samples, shuffle_split([e.id for e in entries], seed, sizes), tuple(size))


def synthetic_dataset(count: int, seed: int, size: Size) -> Dataset:
    """count сцен для train и по ceil(count/4) для val и test"""
    if count < 1:
        raise ConfigError(f"--synthetic должен быть >= 1, получено {count}")
    extra = math.ceil(count / 4)
    scenes = [synth_scene(seed, size, i) for i in range(count + 2 * extra)]
    samples = {scene.id: scene for scene in scenes}
    index = shuffle_split([scene.id for scene in scenes], seed, (count, extra, extra))
    return Dataset(samples, index, tuple(size))


@dataclass(frozen=True, eq=False)
class Batch:
    ids: List[str]
    rgb: Tensor4
    rgb_coarse: Tensor4
    depth: np.ndarray
    mask: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


def batch_iter(dataset: Dataset, split: str, batch_size: int, epoch: int,
               coarse_size: Optional[Size] = None) -> Iterator[Batch]:
    """Порядок образцов перемешивается заново на каждую эпоху по ключу (seed, epoch)"""
    samples = dataset.split(split)
    if not samples:
        raise DatasetError(f"сплит {split} пуст")
    if batch_size < 1:
        raise ConfigError(f"batch_size должен быть >= 1, получено {batch_size}")
    for sample in samples:
        if sample.size != dataset.size:
            raise DatasetError(f"{sample.id}: размер {sample.size}, ожидался {dataset.size}")
    coarse_size = tuple(coarse_size or dataset.size)
    order = Rng(dataset.index.seed).derive(epoch).permutation(len(samples))
    for start in range(0, len(samples), batch_size):
        chunk = [samples[i] for i in order[start:start + batch_size]]
        yield Batch(
            ids=[s.id for s in chunk],
            rgb=Tensor4(np.stack([s.rgb for s in chunk])),
            rgb_coarse=Tensor4(np.stack([dataset.coarse_rgb(s, coarse_size) for s in chunk])),
            depth=np.stack([s.depth for s in chunk]),
            mask=np.stack([s.mask for s in chunk]),
        )
