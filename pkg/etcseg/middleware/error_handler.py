import json
import logging
from functools import wraps
from typing import Any, Dict

import click

from etcseg.errors import ConfigError, EtcError, InternalError, UsageError

logger = logging.getLogger(__name__)


def emit_error(payload: Dict[str, Any]):
    """Write one machine-readable error object to stderr"""
    click.echo(json.dumps(payload, sort_keys=True), err=True)


class CliErrorMiddleware:
    """Decorators wrapped around every subcommand callback"""

    @staticmethod
    def handle_cli_errors(f):
        """
        Turn etcseg errors and I/O failures into a JSON error object and an exit code

        EtcError subclasses carry their own exit code (1, or 2 for numeric
        failures); OSError is reported as a config error naming the path.
        Anything else is logged with its traceback and reported as internal_error.
        """
        @wraps(f)
        def decorated_function(*args, **kwargs):
            try:
                return f(*args, **kwargs)
            except EtcError as exc:
                logger.error(f"{f.__name__} failed: {exc.message}")
                emit_error(exc.to_dict())
                raise click.exceptions.Exit(exc.exit_code)
            except OSError as exc:
                error = ConfigError(f"{exc.strerror or exc}: {exc.filename}", {'path': str(exc.filename)})
                logger.error(f"{f.__name__} failed: {error.message}")
                emit_error(error.to_dict())
                raise click.exceptions.Exit(error.exit_code)
            except (click.exceptions.ClickException, click.exceptions.Exit, click.exceptions.Abort):
                raise
            except Exception as exc:
                logger.exception(f"{f.__name__} failed unexpectedly")
                error = InternalError(f"{type(exc).__name__}: {exc}", {'exception': type(exc).__name__})
                emit_error(error.to_dict())
                raise click.exceptions.Exit(error.exit_code)
        return decorated_function

    @staticmethod
    def log_invocation(f):
        """Log the subcommand and its options before running it"""
        @wraps(f)
        def decorated_function(*args, **kwargs):
            ctx = click.get_current_context()
            logger.info(f"Running {ctx.info_name} with {kwargs} extra={ctx.args}")
            return f(*args, **kwargs)
        return decorated_function


class EtcGroup(click.Group):
    """Command group whose usage errors follow the JSON error contract (exit 1)"""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as exc:
            error = UsageError(exc.format_message())
            emit_error(error.to_dict())
            raise click.exceptions.Exit(error.exit_code)


# Global middleware instance
cli_middleware = CliErrorMiddleware()
