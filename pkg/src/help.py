"""Help and display utilities."""


def display_help():
    """Returns the command overview."""
    help_text = """
                DISTILL LAB - AVAILABLE COMMANDS

TRAINING:
  run CONFIG [--set key=value ...] [--out DIR]
                                       - Train one recipe (baseline, ls, kd, nkd, dkd, uskd)
  sweep SWEEP_FILE [--workers N] [--set key=value ...]
                                       - Train a grid or variant set over seeds, then export

CHECKS:
  gradcheck CONFIG [--coords N] [--set key=value ...]
                                       - Compare analytic and finite-difference gradients
  eval CHECKPOINT CONFIG [--split train|test] [--set key=value ...]
                                       - Top-1 accuracy of a saved network

RESULTS:
  export-metrics DIR                   - Merge run metrics into all_metrics.csv and summary.csv

GENERAL:
  help                                 - Show this menu
  -v / --verbose                       - Debug logging (anywhere but after an option)

EXIT CODES:
  0 ok, 2 config/usage/format error, 3 numerical failure or failed gradient check
    """
    return help_text.strip()
