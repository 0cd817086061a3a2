#!/usr/bin/env python3
"""
Utilities for consistent progress bar formatting across the lab.

Training loops, bench trials and evaluation grids all report progress
through these helpers so quiet mode silences them in one place.

Author: Matt Y
License: MIT
Version: 1.0.0
"""

from tqdm import tqdm

from print_utils import is_quiet


def create_progress_bar(total, desc=None, unit=None):
    """
    Create a consistently formatted progress bar.

    Args:
        total: Total number of items
        desc: Description for the progress bar
        unit: Unit name for the items being processed

    Returns:
        A tqdm progress bar instance (disabled in quiet mode)
    """
    if unit is None:
        unit = "step"

    return tqdm(
        total=total,
        desc=desc,
        unit=str(unit),
        bar_format='{l_bar}{bar:30}{r_bar}',
        ncols=100,
        colour='cyan',
        leave=False,
        disable=is_quiet(),
    )


def update_progress_bar(progress_bar, n=1, **postfix):
    """
    Update a progress bar safely, optionally setting postfix values.

    Args:
        progress_bar: The tqdm progress bar to update
        n: Number of steps to increment
        postfix: Values shown after the bar (e.g. loss=1.23)
    """
    if progress_bar is None:
        return
    if postfix:
        progress_bar.set_postfix(postfix, refresh=False)
    progress_bar.update(n)


def close_progress_bar(progress_bar):
    """Close a progress bar safely."""
    if progress_bar is not None:
        progress_bar.close()
