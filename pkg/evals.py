#!/usr/bin/env python3
"""
Evaluation: Rouge-L on token ids, perplexity, and the model x task grid.

Author: Matt Y
License: MIT
Version: 1.0.0
"""

import logging
import math

import numpy as np
import pandas as pd

from constants import EOS_ID, EVAL_GRID_COLUMNS, EVAL_RAW_COLUMNS
from data_pipeline import collate_batch, make_synthetic_task
from distillation import seq2seq_loss
from lab_errors import DomainError, LabError
from model_zoo import greedy_decode
from print_utils import format_table
from tensor_autograd import no_grad
from tqdm_utils import close_progress_bar, create_progress_bar, update_progress_bar

logger = logging.getLogger(__name__)

METRICS = ('rouge_l', 'exact_match')

# Evaluation sets are drawn from a seed range disjoint from training data
HELD_OUT_SEED_OFFSET = 10_000


# ============================================================================
# Rouge-L
# ============================================================================

def lcs_length(a, b):
    """Longest common subsequence length by row-wise dynamic programming."""
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a
    previous = [0] * (len(b) + 1)
    for token in a:
        current = [0]
        for j, other in enumerate(b):
            if token == other:
                current.append(previous[j] + 1)
            else:
                current.append(max(previous[j + 1], current[j]))
        previous = current
    return previous[-1]


def rouge_l(candidate, reference):
    """
    LCS F-measure between two token sequences, 0 when they share nothing.

    Empty input scores 0 with a warning.
    """
    candidate, reference = list(candidate), list(reference)
    if not candidate or not reference:
        logger.warning("rouge_l on empty %s scored as 0", "candidate" if not candidate else "reference")
        return 0.0
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    precision = lcs / len(candidate)
    recall = lcs / len(reference)
    return 2 * precision * recall / (precision + recall)


def exact_match(candidate, reference):
    return float(list(candidate) == list(reference))


# ============================================================================
# Perplexity
# ============================================================================

def perplexity(model, dataset, enc_len=None, dec_len=None, batch_size=16):
    """
    exp(mean CE over every target position, EOS included) of a held-out set.

    Batches are weighted by their target-token counts so the result does
    not depend on ``batch_size``.
    """
    dataset = list(dataset)
    if not dataset:
        raise DomainError("perplexity needs a non-empty dataset")
    enc_len = enc_len or max(len(ex.x) for ex in dataset)
    dec_len = dec_len or max(len(ex.y) for ex in dataset) + 1

    total_loss, total_tokens = 0.0, 0
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            batch = collate_batch(dataset[start:start + batch_size], enc_len, dec_len)
            loss = seq2seq_loss(model, batch).item()
            total_loss += loss * batch.n_target_tokens
            total_tokens += batch.n_target_tokens
    return math.exp(total_loss / total_tokens)


# ============================================================================
# Task grid
# ============================================================================

def held_out_examples(task, n_examples, seed, min_len, max_len, exclude=()):
    """Seeded synthetic examples kept apart from training; anything in ``exclude`` is dropped."""
    seen = {(tuple(ex.x), tuple(ex.y)) for ex in exclude}
    examples = make_synthetic_task(task, n_examples, rng_seed=HELD_OUT_SEED_OFFSET + seed,
                                   min_len=min_len, max_len=max_len)
    kept = [ex for ex in examples if (tuple(ex.x), tuple(ex.y)) not in seen]
    if len(kept) < len(examples):
        logger.info("dropped %d held-out %s examples that also occur in training", len(examples) - len(kept), task)
    return kept


def _strip_eos(tokens):
    return tokens[:-1] if tokens and tokens[-1] == EOS_ID else tokens


def score_examples(model, examples, metric='rouge_l', max_new=None, label=None):
    """
    Greedy-decode every example and score it against its reference.

    A generation failure scores 0 and is logged; no example is dropped.
    """
    if metric not in METRICS:
        raise DomainError(f"metric must be one of {METRICS}, got {metric!r}")
    score_fn = rouge_l if metric == 'rouge_l' else exact_match
    scores = []
    for i, ex in enumerate(examples):
        budget = max_new or len(ex.y) + 1
        try:
            output = _strip_eos(greedy_decode(model, ex.x, budget))
        except (LabError, FloatingPointError) as e:
            logger.warning("%s: generation failed on example %d (%s), scored 0", label or model.kind, i, e)
            scores.append(0.0)
            continue
        scores.append(score_fn(output, ex.y))
    return scores


def eval_grid(models, tasks, metric='rouge_l', n_examples=32, seeds=(0, 1, 2), max_new=None,
              min_len=4, max_len=32):
    """
    Mean metric per (model, task) over seeded held-out sets.

    Args:
        models: dict of display name -> Model, all sharing one vocabulary
        tasks: synthetic task kinds

    Returns:
        (grid DataFrame: model, task, metric, mean, std, n_seeds;
         raw DataFrame: model, task, metric, seed, score)
    """
    if not models:
        raise DomainError("eval_grid needs at least one model")
    vocab = {m.config.vocab_size for m in models.values()}
    if len(vocab) > 1:
        raise DomainError(f"models must share a vocabulary, got sizes {sorted(vocab)}")

    raw = []
    bar = create_progress_bar(len(models) * len(tasks) * len(seeds), desc="eval", unit="set")
    try:
        for task in tasks:
            for seed in seeds:
                examples = held_out_examples(task, n_examples, seed, min_len, max_len)
                for name, model in models.items():
                    scores = score_examples(model, examples, metric, max_new, label=name)
                    raw.append({'model': name, 'task': task, 'metric': metric, 'seed': seed,
                                'score': float(np.mean(scores))})
                    update_progress_bar(bar, model=name, task=task)
    finally:
        close_progress_bar(bar)

    raw = pd.DataFrame(raw, columns=EVAL_RAW_COLUMNS)
    grouped = raw.groupby(['model', 'task', 'metric'], sort=True)['score']
    grid = grouped.agg(mean='mean', std=lambda s: float(np.std(s.to_numpy())), n_seeds='count').reset_index()
    return grid[EVAL_GRID_COLUMNS], raw


def grid_table(grid):
    """Aligned text table of an eval grid, tasks as columns."""
    wide = grid.pivot(index='model', columns='task', values='mean')
    headers = ['model'] + list(wide.columns)
    rows = [[name] + [wide.loc[name, task] for task in wide.columns] for name in wide.index]
    return format_table(rows, headers)
