#!/usr/bin/env python3
"""
Shared print utilities for consistent operator output across the lab.
Numeric modules log through ``logging``; everything a person reads at the
terminal goes through here.

Author: Matt Y
License: MIT
Version: 1.0.0
"""

import sys

import colorama
from colorama import Fore, Style

# Initialize colorama
colorama.init(autoreset=True)

_QUIET = False


def set_quiet(quiet):
    """Suppress everything except errors."""
    global _QUIET
    _QUIET = bool(quiet)


def is_quiet():
    return _QUIET


def print_success(text):
    """Print a success message in green."""
    if not _QUIET:
        print(f"{Fore.GREEN}{text}")


def print_error(text):
    """Print an error message in red on stderr."""
    print(f"{Fore.RED}{text}{Style.RESET_ALL}", file=sys.stderr)


def print_warning(text):
    """Print a warning message in yellow."""
    if not _QUIET:
        print(f"{Fore.YELLOW}{text}")


def print_info(text):
    """Print an info message in blue."""
    if not _QUIET:
        print(f"{Fore.BLUE}{text}")


def print_header(text):
    """Print a formatted header in cyan."""
    if _QUIET:
        return
    print(f"\n{Fore.CYAN}{Style.BRIGHT}" + "=" * 50)
    print(f"{Fore.CYAN}{Style.BRIGHT}{text}")
    print(f"{Fore.CYAN}{Style.BRIGHT}" + "=" * 50)


def print_status(status_type, message):
    """
    Print a status message with appropriate icon and color.

    Args:
        status_type: 'success', 'error', 'warning', 'info'
        message: The message to display

    Example:
        ✓ inference_flops_ratio 0.819 within [0.63, 0.93]
        ✗ memory_ratio 0.990 outside [0.75, 0.97]
    """
    icons_and_colors = {
        'success': ('✓', Fore.GREEN),
        'error': ('✗', Fore.RED),
        'warning': ('⚠', Fore.YELLOW),
        'info': ('ℹ', Fore.BLUE)
    }

    if _QUIET and status_type != 'error':
        return
    icon, color = icons_and_colors.get(status_type, ('•', Fore.WHITE))
    print(f"{color}{icon} {message}{Style.RESET_ALL}")


def format_table(rows, headers, float_fmt="{:.4f}"):
    """
    Render rows as an aligned plain-text table (no color codes).

    Args:
        rows: List of row sequences
        headers: Column names
        float_fmt: Format applied to float cells

    Returns:
        The table as a single string ending in a newline
    """
    def cell(value):
        if isinstance(value, float):
            return float_fmt.format(value)
        return str(value)

    text_rows = [[cell(v) for v in row] for row in rows]
    widths = [len(h) for h in headers]
    for row in text_rows:
        for i, value in enumerate(row):
            widths[i] = max(widths[i], len(value))

    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in text_rows:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    return "\n".join(lines) + "\n"


def print_table(rows, headers, float_fmt="{:.4f}"):
    """Print an aligned table with a cyan header line."""
    if _QUIET:
        return
    text = format_table(rows, headers, float_fmt).splitlines()
    print(f"{Fore.CYAN}{Style.BRIGHT}{text[0]}{Style.RESET_ALL}")
    for line in text[1:]:
        print(line)
