"""
Бинарный чекпоинт: magic "DDCN", версия u16, число записей u32, записи
(имя, тег точности, ранг, размерности u32, little-endian данные),
затем блок метаданных key=value в UTF-8
"""

import io
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
from dotenv import dotenv_values

from errors import ConfigError, FingerprintError, FormatError
from tensor_core import Precision

logger = logging.getLogger(__name__)

MAGIC = b"DDCN"
VERSION = 1

PARAM_PREFIX = "param:"
VELOCITY_PREFIX = "velocity:"


@dataclass(eq=False)
class Checkpoint:
    params: Dict[str, np.ndarray]
    velocities: Dict[str, np.ndarray] = field(default_factory=dict)
    metadata: Dict[str, str] = field(default_factory=dict)

    @property
    def fingerprint(self) -> Optional[str]:
        return self.metadata.get('arch_fingerprint')

    @property
    def phase(self) -> int:
        return int(self.metadata.get('phase', 0))

    @property
    def epoch(self) -> int:
        return int(self.metadata.get('epoch', 0))


def _encode_metadata(metadata: Dict[str, str]) -> bytes:
    lines = []
    for key, value in metadata.items():
        value = str(value)
        if not key.isidentifier() or any(ch in value for ch in "'\n\r"):
            raise ConfigError(f"метаданные чекпоинта: недопустимая пара {key}={value!r}")
        lines.append(f"{key}='{value}'")
    return ("\n".join(lines) + "\n").encode('utf-8')


def _record(name: str, array: np.ndarray) -> bytes:
    precision = Precision.from_dtype(array.dtype)
    encoded = name.encode('utf-8')
    head = struct.pack('<I', len(encoded)) + encoded
    head += struct.pack('<BB', precision.tag, array.ndim)
    head += struct.pack(f'<{array.ndim}I', *array.shape)
    payload = np.ascontiguousarray(array, dtype=array.dtype.newbyteorder('<')).tobytes()
    return head + payload


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    records = [(PARAM_PREFIX + name, value) for name, value in checkpoint.params.items()]
    records += [(VELOCITY_PREFIX + name, value) for name, value in checkpoint.velocities.items()]
    parts = [MAGIC, struct.pack('<HI', VERSION, len(records))]
    parts += [_record(name, np.asarray(value)) for name, value in records]
    meta = _encode_metadata(checkpoint.metadata)
    parts.append(struct.pack('<I', len(meta)) + meta)
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(self.path, f"файл оборван на смещении {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes, path: str = "<bytes>") -> Checkpoint:
    reader = _Reader(data, path)
    if reader.take(4) != MAGIC:
        raise FormatError(path, "не чекпоинт DDCN (неверный magic)")
    version, count = reader.unpack('<HI')
    if version != VERSION:
        raise FormatError(path, f"версия формата {version} не поддерживается (ожидается {VERSION})")

    params: Dict[str, np.ndarray] = {}
    velocities: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack('<I')
        try:
            name = reader.take(name_len).decode('utf-8')
        except UnicodeDecodeError:
            raise FormatError(path, "имя записи не в UTF-8")
        tag, rank = reader.unpack('<BB')
        try:
            precision = Precision.from_tag(tag)
        except ValueError as e:
            raise FormatError(path, f"{name}: {e}")
        shape = reader.unpack(f'<{rank}I') if rank else ()
        dtype = precision.dtype.newbyteorder('<')
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        array = np.frombuffer(reader.take(nbytes), dtype=dtype).reshape(shape)
        array = array.astype(precision.dtype)
        if name.startswith(PARAM_PREFIX):
            params[name[len(PARAM_PREFIX):]] = array
        elif name.startswith(VELOCITY_PREFIX):
            velocities[name[len(VELOCITY_PREFIX):]] = array
        else:
            raise FormatError(path, f"неизвестный тип записи {name}")

    (meta_len,) = reader.unpack('<I')
    try:
        text = reader.take(meta_len).decode('utf-8')
    except UnicodeDecodeError:
        raise FormatError(path, "метаданные не в UTF-8")
    if reader.pos != len(data):
        raise FormatError(path, f"{len(data) - reader.pos} лишних байт в конце файла")
    metadata = {key: value or "" for key, value in
                dotenv_values(stream=io.StringIO(text), interpolate=False).items()}
    return Checkpoint(params, velocities, metadata)


def save_checkpoint(path: str, checkpoint: Checkpoint):
    """Запись во временный файл и os.replace"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, 'wb') as f:
        f.write(encode_checkpoint(checkpoint))
    os.replace(tmp, path)
    logger.info(f"💾 Чекпоинт {path}: {len(checkpoint.params)} тензоров, "
                f"фаза {checkpoint.metadata.get('phase')}, эпоха {checkpoint.metadata.get('epoch')}")


def load_checkpoint(path: str, expected_fingerprint: Optional[str] = None) -> Checkpoint:
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise FormatError(path, f"не удаётся прочитать: {e.strerror}")
    checkpoint = decode_checkpoint(data, path)
    if expected_fingerprint is not None and checkpoint.fingerprint != expected_fingerprint:
        raise FingerprintError(
            f"{path}: чекпоинт собран для другой архитектуры "
            f"({str(checkpoint.fingerprint)[:12]} != {expected_fingerprint[:12]})"
        )
    return checkpoint
