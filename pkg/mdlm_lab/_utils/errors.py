import functools
import json
from typing import Callable, ParamSpec, TypeVar

from pydantic import ValidationError

from mdlm_lab.common.errors import ConfigError, LabError, ParseError

P = ParamSpec("P")
T = TypeVar("T")


def intercept_errors(
    message_prefix: str = "",
) -> Callable[[Callable[P, T]], Callable[P, T]]:
    """Decorator to intercept errors, map them onto the LabError hierarchy and
    optionally add a message prefix.

    A LabError keeps its class. Pydantic validation failures become ConfigError,
    JSON/value/key errors become ParseError and anything else (I/O included)
    becomes a plain LabError.

    Args:
        message_prefix (str): Custom message prefix for the error.
    """

    def decorator(func: Callable[P, T]) -> Callable[P, T]:
        @functools.wraps(func)
        def wrapper(*args: P.args, **kwargs: P.kwargs) -> T:
            try:
                return func(*args, **kwargs)
            except LabError as e:
                raise e.__class__(f"{message_prefix}{e}") from None
            except ValidationError as e:
                message = _get_validation_error_message(e)
                raise ConfigError(f"{message_prefix}{message}") from None
            except (json.JSONDecodeError, ValueError, KeyError, TypeError) as e:
                raise ParseError(f"{message_prefix}{e}") from None
            except Exception as e:
                raise LabError(f"{message_prefix}{e}")  # pylint: disable=raise-missing-from

        return wrapper

    return decorator


def _get_validation_error_message(exception: ValidationError) -> str:
    """Flatten a pydantic ValidationError into one line.

    Each entry reads ``<dotted.location>: <message>``; entries are joined with
    ``"; "``. Model-level validators have an empty location and contribute the
    message alone.

    Args:
        exception (ValidationError): The error raised by pydantic.

    Returns:
        Processed message
    """
    parts = []
    for error in exception.errors():
        location = ".".join(str(item) for item in error.get("loc", ()))
        message = error.get("msg", "invalid value")
        parts.append(f"{location}: {message}" if location else message)
    return "; ".join(parts) or str(exception)
