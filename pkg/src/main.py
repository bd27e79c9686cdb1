"""Main entry point for the distillation lab command line."""

import logging
import sys

from src.config import EXIT_CONFIG_ERROR, EXIT_OK, LOG_FORMAT
from src.handlers import run_eval, run_experiment, run_export, run_gradcheck, run_sweep_file
from src.help import display_help
from src.parser import parse_input


def setup_commands():
    """Sets up command mappings to handler functions."""
    return {
        "help": lambda args: (EXIT_OK, display_help()),
        "run": run_experiment,
        "gradcheck": run_gradcheck,
        "eval": run_eval,
        "export-metrics": run_export,
        "sweep": run_sweep_file,
    }


def configure_logging(verbose=False):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
        stream=sys.stderr,
        force=True,
    )


def main(argv=None):
    """Runs one command and returns its exit code."""
    command, args, verbose = parse_input(sys.argv[1:] if argv is None else list(argv))
    configure_logging(verbose)
    commands = setup_commands()
    if command not in commands:
        print(f"Invalid command: '{command}'. Type 'help' for assistance.", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    code, message = commands[command](args)
    if message:
        print(message, file=sys.stdout if code == EXIT_OK else sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
