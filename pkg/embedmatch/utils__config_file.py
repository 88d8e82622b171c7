from pathlib import Path
from typing import Any, TypeVar

from pydantic import BaseModel, ValidationError

from .errors import ConfigurationError, ParseError

ModelT = TypeVar("ModelT", bound=BaseModel)


def read_flat_config(path: Path) -> dict[str, str]:
    """Read a flat ``key = value`` file.

    Args:
        path: File to read; ``#`` starts a comment, blank lines are skipped
              and values may be wrapped in single or double quotes

    Returns:
        Mapping of keys to their raw string values
    """
    if not path.exists():
        raise ConfigurationError(f"Config file not found: {path}")
    values: dict[str, str] = {}
    for line_number, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw!r}", line_number, str(path))
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ParseError("empty key", line_number, str(path))
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "'\"":
            value = value[1:-1]
        if key in values:
            raise ParseError(f"duplicate key {key!r}", line_number, str(path))
        values[key] = value
    return values


def validate_config(model: type[ModelT], values: dict[str, Any]) -> ModelT:
    try:
        return model.model_validate(values)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid {model.__name__}: {e}") from None


def load_config(path: Path | None, model: type[ModelT], **overrides: Any) -> ModelT:
    """Validate a flat config file (or just defaults) into ``model``.

    Keys the model does not know are ignored, so one file can hold the
    settings of several commands. ``None`` overrides are dropped.
    """
    values: dict[str, Any] = {}
    if path is not None:
        known = set(model.model_fields)
        values = {k: v for k, v in read_flat_config(path).items() if k in known}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return validate_config(model, values)
