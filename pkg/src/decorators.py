"""Decorators for command handlers."""

import functools
import logging

from src.config import EXIT_CONFIG_ERROR, EXIT_NUMERICAL_FAILURE, EXIT_OK
from src.errors import DistillError, NumericalError

logger = logging.getLogger(__name__)


def input_error(func):
    """Maps a handler's outcome to ``(exit_code, message)``.

    Handlers return a message (exit 0) or an explicit ``(code, message)`` pair.
    """

    @functools.wraps(func)
    def inner(*args, **kwargs):
        try:
            result = func(*args, **kwargs)
        except NumericalError as e:
            return EXIT_NUMERICAL_FAILURE, f"Numerical failure: {e}"
        except (DistillError, ValueError, KeyError) as e:
            return EXIT_CONFIG_ERROR, f"Error: {e}"
        except OSError as e:
            return EXIT_CONFIG_ERROR, f"Error: {e}"
        except SystemExit as e:
            # argparse has already printed usage or help
            return (e.code if isinstance(e.code, int) else EXIT_CONFIG_ERROR), ""
        except Exception as e:
            logger.exception("unexpected failure in %s", func.__name__)
            return 1, f"Unexpected error: {e}"
        if isinstance(result, tuple):
            return result
        return EXIT_OK, result

    return inner
