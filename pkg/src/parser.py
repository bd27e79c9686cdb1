"""Input parsing for commands."""

import json

from src.errors import UsageError

VERBOSE_FLAGS = ("-v", "--verbose")


def parse_input(argv):
    """Splits argv into ``(command, args, verbose)``.

    The verbosity flag may appear anywhere except as the value of a preceding
    ``--option``, which keeps it for argparse; ``export_metrics`` is accepted for
    ``export-metrics``.
    """
    verbose = False
    parts = []
    option_value = False
    for arg in argv:
        if arg in VERBOSE_FLAGS and not option_value:
            verbose = True
            continue
        parts.append(arg)
        option_value = (
            not option_value and len(parts) > 1 and arg.startswith("--") and "=" not in arg
        )
    if not parts:
        return "help", [], verbose
    cmd = parts[0].strip().lower().replace("_", "-")
    return cmd, parts[1:], verbose


def parse_overrides(pairs):
    """Turns ``key=value`` strings into ``(key, value)``; values are JSON or plain strings."""
    out = []
    for pair in pairs or []:
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise UsageError(f"override {pair!r} is not key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        out.append((key.strip(), value))
    return out
