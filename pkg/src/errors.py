"""
Иерархия ошибок движка и коды выхода CLI
"""

from typing import Optional, Sequence


class DdcnError(ValueError):
    """Базовая ошибка: всё, что CLI превращает в код выхода"""

    exit_code = 2


class ConfigError(DdcnError):
    """Неверная конфигурация или флаги"""

    exit_code = 1


class GeometryError(DdcnError):
    """Пространственный размер слоя вышел меньше 1 или не сходится"""

    exit_code = 1


class ShapeError(DdcnError):
    """Несовпадение форм тензоров"""


class DomainError(DdcnError):
    """Значение вне области определения (например, log от неположительной глубины)"""


class EmptyMaskError(DdcnError):
    """Слишком мало валидных пикселей для функции потерь"""


class DatasetError(DdcnError):
    """Пустой сплит, неверные размеры разбиения, битый манифест"""


class FormatError(DdcnError):
    """Файл не разбирается; всегда называет файл"""

    def __init__(self, path: str, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


class FingerprintError(DdcnError):
    """Чекпоинт собран для другой архитектуры"""


class DivergenceError(DdcnError):
    """Loss стал NaN/inf: обучение остановлено"""

    exit_code = 3

    def __init__(self, phase: int, epoch: int, batch_index: int,
                 sample_ids: Sequence[str], value: Optional[float] = None):
        preview = ", ".join(sample_ids[:4])
        if len(sample_ids) > 4:
            preview += "..."
        super().__init__(
            f"divergence in phase {phase}, epoch {epoch}, batch {batch_index} "
            f"(samples: {preview}), loss={value}"
        )
        self.phase = phase
        self.epoch = epoch
        self.batch_index = batch_index
        self.sample_ids = list(sample_ids)
        self.value = value


class GradcheckError(DdcnError):
    """Аналитический градиент не совпал с конечными разностями"""

    exit_code = 3
