import os
from fractions import Fraction
from typing import Callable, Dict, List, Optional

from dotenv import dotenv_values, load_dotenv

from errors import ConfigError

load_dotenv()


def _env_bool(name: str, default: str) -> bool:
    return os.getenv(name, default).strip().lower() in ("1", "true", "yes", "on")


def _env_value(name: str, default, cast: Callable, errors: List[str]):
    """Значение переменной окружения; нечисловой текст попадает в errors, а не в исключение при импорте"""
    raw = os.getenv(name)
    if raw is None or raw.strip() == '':
        return default
    try:
        return cast(raw.strip())
    except (ValueError, ZeroDivisionError):
        errors.append(f"{name}={raw!r} не разбирается")
        return default


class Config:
    _env_errors: List[str] = []

    @classmethod
    def load(cls):
        """Перечитывает окружение; ошибки разбора копятся до validate()"""
        errors: List[str] = []

        # Параллелизм
        cls.THREADS = _env_value('DDCN_THREADS', os.cpu_count() or 1, int, errors)

        # Логи
        cls.LOG_LEVEL = os.getenv('DDCN_LOG_LEVEL', 'INFO')
        cls.LOG_DIR = os.getenv('DDCN_LOG_DIR', 'logs')

        # Обучение (значения по умолчанию из процедуры обучения: SGD 0.1 / 0.9, батч 16)
        cls.LEARNING_RATE = _env_value('DDCN_LR', 0.1, float, errors)
        cls.MOMENTUM = _env_value('DDCN_MOMENTUM', 0.9, float, errors)
        cls.BATCH_SIZE = _env_value('DDCN_BATCH', 16, int, errors)
        cls.EPOCHS = _env_value('DDCN_EPOCHS', 30, int, errors)
        cls.SEED = _env_value('DDCN_SEED', 0, int, errors)

        # Архитектура
        cls.WIDTH_SCALE = _env_value('DDCN_WIDTH_SCALE', Fraction(1), Fraction, errors)
        cls.POOL_AFTER_FINE_CONV = _env_bool('DDCN_POOL_AFTER_FINE_CONV', 'true')
        cls.VGG_UPSAMPLE = os.getenv('DDCN_VGG_UPSAMPLE', 'reshape')

        cls._env_errors = errors

    @classmethod
    def validate(cls):
        errors = list(cls._env_errors)
        if cls.THREADS < 1:
            errors.append("DDCN_THREADS должен быть >= 1")
        if not cls.LEARNING_RATE >= 0:
            errors.append("DDCN_LR не может быть отрицательным")
        if not 0 <= cls.MOMENTUM < 1:
            errors.append("DDCN_MOMENTUM должен быть в [0, 1)")
        if cls.BATCH_SIZE < 1:
            errors.append("DDCN_BATCH должен быть >= 1")
        if not 0 < cls.WIDTH_SCALE <= 1:
            errors.append("DDCN_WIDTH_SCALE должен быть в (0, 1]")
        if cls.VGG_UPSAMPLE not in ('reshape', 'nearest'):
            errors.append("DDCN_VGG_UPSAMPLE: reshape или nearest")

        if errors:
            raise ConfigError(f"Ошибки конфигурации: {', '.join(errors)}")
        return True


Config.load()


def load_config_file(path: str) -> Dict[str, str]:
    """Читает key=value файл конфигурации; ключи нормализуются к виду флагов (snake_case)"""
    if not os.path.exists(path):
        raise ConfigError(f"Файл конфигурации не найден: {path}")
    values = dotenv_values(path, interpolate=False)
    return {
        key.strip().lstrip('-').replace('-', '_').lower(): value
        for key, value in values.items()
        if value is not None
    }


def parse_bool(value: Optional[str]) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"Ожидалось булево значение, получено: {value}")


def parse_size(text: str) -> tuple:
    """'80x60' -> (80, 60): высота x ширина"""
    try:
        h, w = str(text).lower().split('x')
        size = (int(h), int(w))
    except ValueError:
        raise ConfigError(f"Размер должен быть в формате HxW, получено: {text}")
    if size[0] < 1 or size[1] < 1:
        raise ConfigError(f"Размер должен быть положительным: {text}")
    return size
