"""
Standardization Utilities for the DTLC-GAN toolkit
Uniform error types, error payloads, and validation helpers shared by every module
"""

import logging
import sys
import traceback
from functools import wraps
from typing import Any, Dict, Iterable, Mapping, Optional

import click

logger = logging.getLogger(__name__)


class DTLCError(Exception):
    """
    Base error carrying a stable code, a message and optional details
    Every failure the toolkit raises on purpose is a DTLCError
    """

    code = 'DTLC_ERROR'

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None, code: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}
        if code:
            self.code = code

    def to_dict(self) -> Dict[str, Any]:
        """Standard error payload"""
        payload = {
            'success': False,
            'error': {
                'code': self.code,
                'message': self.message
            }
        }
        if self.details:
            payload['error']['details'] = self.details
        return payload

    def __str__(self) -> str:
        if not self.details:
            return f"[{self.code}] {self.message}"
        rendered = ', '.join(f"{key}={value}" for key, value in self.details.items())
        return f"[{self.code}] {self.message} ({rendered})"


class ValidationError(DTLCError):
    """Input violates a documented precondition"""

    code = 'VALIDATION_ERROR'

    def __init__(self, message: str, field_errors: Optional[Dict[str, str]] = None, details: Optional[Dict[str, Any]] = None):
        merged = dict(details or {})
        if field_errors:
            merged['field_errors'] = dict(field_errors)
        super().__init__(message, merged)
        self.field_errors = dict(field_errors or {})


class CurriculumError(ValidationError):
    """A loss was requested for a layer whose codes are still average-filled"""

    code = 'CURRICULUM_ERROR'


class ConfigurationError(DTLCError):
    """Run configuration is inconsistent with the requested operation"""

    code = 'CONFIGURATION_ERROR'


class DimensionError(DTLCError):
    """Tensor shape does not match what a layer expects"""

    code = 'DIMENSION_ERROR'

    def __init__(self, layer: str, expected: Any, received: Any):
        super().__init__(
            f"Shape mismatch in layer '{layer}'",
            {'layer': layer, 'expected': expected, 'received': received}
        )
        self.layer = layer


class GraphStateError(DTLCError):
    """Operation called out of order on a network graph"""

    code = 'GRAPH_STATE_ERROR'


class NonFiniteError(DTLCError):
    """NaN or infinity reached a loss or gradient"""

    code = 'NON_FINITE'

    def __init__(self, name: str, message: Optional[str] = None, details: Optional[Dict[str, Any]] = None):
        merged = {'name': name}
        merged.update(details or {})
        super().__init__(message or f"Non-finite values in '{name}'", merged)
        self.name = name


class IdxParseError(DTLCError):
    """Malformed IDX file"""

    code = 'IDX_PARSE_ERROR'

    def __init__(self, path: str, offset: int, message: str):
        super().__init__(message, {'path': str(path), 'offset': offset})
        self.offset = offset


class CheckpointError(DTLCError):
    """Checkpoint file is unreadable or does not match the request"""

    code = 'CHECKPOINT_ERROR'


class ConfigValidator:
    """
    Collects field errors so every offending key is reported at once
    """

    def __init__(self, prefix: str = ''):
        self.prefix = prefix
        self.errors: Dict[str, str] = {}

    def _key(self, field: str) -> str:
        return f"{self.prefix}{field}"

    def add(self, field: str, message: str):
        self.errors.setdefault(self._key(field), message)

    def require_positive(self, field: str, value: Any, allow_zero: bool = False):
        """Record an error unless value is a positive number"""
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.add(field, 'must be a number')
        elif value < 0 or (value == 0 and not allow_zero):
            self.add(field, 'must be >= 0' if allow_zero else 'must be > 0')

    def require_int(self, field: str, value: Any, minimum: Optional[int] = None):
        if isinstance(value, bool) or not isinstance(value, int):
            self.add(field, 'must be an integer')
        elif minimum is not None and value < minimum:
            self.add(field, f'must be >= {minimum}')

    def require_choice(self, field: str, value: Any, choices: Iterable[str]):
        choices = list(choices)
        if value not in choices:
            self.add(field, f"must be one of {', '.join(choices)}")

    def merge(self, errors: Mapping[str, str]):
        for field, message in errors.items():
            self.errors.setdefault(field, message)

    def raise_if_errors(self, message: str = 'Validation failed'):
        if self.errors:
            raise ValidationError(message, field_errors=self.errors)


def standardized_command(func):
    """
    Decorator giving every CLI command the same failure behaviour
    DTLCError -> one-line report and exit code 1, anything else -> traceback and exit code 2
    """
    @wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except DTLCError as e:
            logger.debug(f"{func.__name__} failed: {e.to_dict()}")
            click.echo(f"Error: {e}", err=True)
            sys.exit(1)
        except (click.exceptions.Exit, click.ClickException):
            raise
        except OSError as e:
            click.echo(f"Error: I/O failure: {e}", err=True)
            sys.exit(1)
        except Exception as e:
            logger.error(f"System error in {func.__name__}: {e}")
            logger.error(f"Traceback: {traceback.format_exc()}")
            click.echo(f"Error: internal failure in {func.__name__}: {e}", err=True)
            sys.exit(2)

    return wrapper
