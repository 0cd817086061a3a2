#!/usr/bin/env python3
"""
Variance-based token compression.

Scores every token embedding by its population variance across features
and keeps the highest-scoring rows in their original order. Low-variance
rows (flat background patches, constant padding) are dropped first.

Author: Matt Y
License: MIT
Version: 1.0.0
"""

import logging
import math

import numpy as np

from lab_errors import DomainError, ShapeError
from tensor_autograd import Tensor, as_tensor, getitem

logger = logging.getLogger(__name__)


def token_scores(tokens):
    """Population variance of each row across the feature axis."""
    data = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens)
    if data.ndim != 2:
        raise ShapeError(f"expected tokens [N, d], got shape {data.shape}")
    return np.var(np.asarray(data, dtype=np.float64), axis=1)


def variance_select(tokens, keep):
    """
    Keep the ``keep`` highest-variance tokens.

    Ties go to the lower index. Survivors stay in input order, and the
    selected rows remain differentiable with respect to ``tokens``.

    Returns:
        (Tensor [keep, d], ascending list of kept row indices)
    """
    tokens = tokens if isinstance(tokens, Tensor) else as_tensor(tokens)
    scores = token_scores(tokens)
    n = scores.shape[0]
    if not 1 <= keep <= n:
        raise DomainError(f"keep must be in [1, {n}], got {keep}")

    order = np.lexsort((np.arange(n), -scores))
    kept = np.sort(order[:keep])
    logger.debug("kept %d of %d tokens", keep, n)
    return getitem(tokens, kept), kept.tolist()


def compress_tokens(tokens, reduction=2 / 3):
    """
    Drop a fraction of the tokens by variance; at least one row always survives.

    Returns:
        (Tensor, kept indices, achieved reduction)
    """
    if not 0.0 <= reduction < 1.0:
        raise DomainError(f"reduction must be in [0, 1), got {reduction}")
    n = tokens.shape[0]
    keep = max(1, n - math.floor(n * reduction + 1e-9))
    selected, kept = variance_select(tokens, keep)
    return selected, kept, 1.0 - keep / n
