from enum import Enum
from typing import Type, TypeVar

from mdlm_lab.common.errors import ConfigError

E = TypeVar("E", bound=Enum)


def to_enum(enum_class: Type[E], value: object, field: str = "value") -> E:
    """Convert a config string to an enum member.

    Matches member values first, then member names, both case-insensitively and
    with ``-``/``_`` treated alike, so ``"topk-glob"``, ``"TOPK_GLOB"`` and
    ``"topk_glob"`` all resolve to the same member.

    Args:
        enum_class (Type[E]): The enum class to convert to.
        value (object): Raw value from a config file or flag.
        field (str): Name used in the error message.

    Returns:
        The enum member.

    Raises:
        ConfigError: If the value names no member.
    """
    if isinstance(value, enum_class):
        return value
    wanted = _normalize(str(value))
    for member in enum_class:
        if _normalize(str(member.value)) == wanted or _normalize(member.name) == wanted:
            return member
    allowed = ", ".join(str(member.value) for member in enum_class)
    raise ConfigError(f"Invalid {field}: {value!r} (expected one of: {allowed})")


def _normalize(text: str) -> str:
    return text.strip().lower().replace("-", "_")
