"""Exception hierarchy shared by every etcseg module.

Each error carries a machine-readable ``code`` and the process exit code the
CLI maps it to.
"""
from typing import Any, Dict, Optional


class EtcError(Exception):
    """Base class for all etcseg errors"""

    code = 'error'
    exit_code = 1

    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.context = context or {}

    def to_dict(self) -> Dict[str, Any]:
        payload = {'code': self.code, 'message': self.message}
        if self.context:
            payload['context'] = self.context
        return payload


class DimensionError(EtcError):
    code = 'dimension_error'


class DomainError(EtcError):
    code = 'domain_error'


class ValidationError(EtcError):
    code = 'validation_error'


class UsageError(EtcError):
    code = 'usage_error'


class ConfigError(EtcError):
    code = 'config_error'


class FormatError(EtcError):
    code = 'format_error'


class GenerationError(EtcError):
    code = 'generation_error'


class NumericError(EtcError):
    """Non-finite values during a forward pass or a training step"""

    code = 'numeric_error'
    exit_code = 2


class InternalError(EtcError):
    """Anything that escaped the typed errors above"""

    code = 'internal_error'
