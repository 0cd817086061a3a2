#!/usr/bin/env python3
"""
Unit tests for evals module.
"""

import os
import sys
import unittest
from unittest.mock import patch

import numpy as np
import pandas as pd

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from constants import EVAL_GRID_COLUMNS, EVAL_RAW_COLUMNS
from data_pipeline import TaskExample, make_synthetic_task
from evals import (
    eval_grid,
    exact_match,
    grid_table,
    held_out_examples,
    lcs_length,
    perplexity,
    rouge_l,
    score_examples,
)
from lab_errors import CapacityError, DomainError
from model_zoo import build_model, toy_config
from tensor_autograd import Tensor, default_dtype


def small(kind="encoder_decoder", **overrides):
    values = dict(d_model=16, n_heads=2, n_kv_heads=1, d_ff=32, max_enc_len=32, max_dec_len=32)
    values.update(overrides)
    return toy_config(kind, n_enc_layers=1, n_dec_layers=1, **values)


class TestRouge(unittest.TestCase):

    def test_one_substitution(self):
        self.assertAlmostEqual(rouge_l([1, 2, 3, 4, 5, 6, 7], [1, 2, 3, 4, 5, 6, 8]), 6 / 7)

    def test_identical_and_disjoint(self):
        self.assertEqual(rouge_l([1, 2, 3], [1, 2, 3]), 1.0)
        self.assertEqual(rouge_l([1, 2, 3], [4, 5]), 0.0)

    def test_unequal_lengths(self):
        # lcs 2, precision 2/4, recall 2/2
        self.assertAlmostEqual(rouge_l([1, 9, 2, 9], [1, 2]), 2 * 0.5 * 1.0 / 1.5)

    def test_empty_scores_zero(self):
        with self.assertLogs('evals', level='WARNING'):
            self.assertEqual(rouge_l([], [1, 2]), 0.0)

    def test_lcs_symmetric(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            a = rng.integers(0, 4, size=int(rng.integers(1, 12))).tolist()
            b = rng.integers(0, 4, size=int(rng.integers(1, 12))).tolist()
            self.assertEqual(lcs_length(a, b), lcs_length(b, a))
            self.assertAlmostEqual(rouge_l(a, b), rouge_l(b, a))

    def test_lcs_known(self):
        self.assertEqual(lcs_length("ABCBDAB", "BDCABA"), 4)

    def test_exact_match(self):
        self.assertEqual(exact_match([1, 2], [1, 2]), 1.0)
        self.assertEqual(exact_match([1, 2], [1]), 0.0)


class TestPerplexity(unittest.TestCase):

    def setUp(self):
        self._dtype = default_dtype(np.float64)
        self._dtype.__enter__()
        self.data = make_synthetic_task('copy', 5, rng_seed=0, min_len=2, max_len=6)

    def tearDown(self):
        self._dtype.__exit__(None, None, None)

    def test_uniform_model_scores_vocab_size(self):
        for kind in ("encoder_decoder", "decoder_only"):
            model = build_model(small(kind), seed=0)
            model["embed"].data[:] = 0.0
            with self.subTest(kind=kind):
                self.assertAlmostEqual(perplexity(model, self.data), 512.0, places=6)

    def test_independent_of_batch_size(self):
        model = build_model(small(), seed=1)
        self.assertAlmostEqual(perplexity(model, self.data, batch_size=1),
                               perplexity(model, self.data, batch_size=3), places=9)

    def test_memorizing_model_scores_one(self):
        def memorized(model, batch):
            logits = np.zeros(batch.targets.shape + (512,))
            np.put_along_axis(logits, batch.targets[..., None], 60.0, axis=-1)
            return Tensor(logits, dtype=np.float64)

        with patch('distillation.seq2seq_logits', side_effect=memorized):
            value = perplexity(build_model(small(), seed=0), self.data)
        self.assertAlmostEqual(value, 1.0, delta=1e-3)
        self.assertGreaterEqual(value, 1.0)

    def test_held_out_examples_skip_training_set(self):
        training = make_synthetic_task('copy', 200, rng_seed=0, min_len=1, max_len=2)
        held_out = held_out_examples('copy', 200, 0, 1, 2, exclude=training)
        seen = {(tuple(ex.x), tuple(ex.y)) for ex in training}
        self.assertTrue(held_out)
        self.assertFalse(any((tuple(ex.x), tuple(ex.y)) in seen for ex in held_out))
        self.assertNotEqual([ex.x for ex in held_out[:5]], [ex.x for ex in training[:5]])

    def test_empty_dataset(self):
        with self.assertRaises(DomainError):
            perplexity(build_model(small(), seed=0), [])


class TestGrid(unittest.TestCase):

    def setUp(self):
        self.model = build_model(small(), seed=2)

    def test_failed_generation_scores_zero(self):
        examples = [TaskExample([97, 98], [97, 98], 'copy')]
        with patch('evals.greedy_decode', side_effect=CapacityError("too long")):
            with self.assertLogs('evals', level='WARNING'):
                self.assertEqual(score_examples(self.model, examples), [0.0])

    def test_unknown_metric(self):
        with self.assertRaises(DomainError):
            score_examples(self.model, [], metric='bleu')

    def test_same_model_same_row(self):
        models = {'a': self.model, 'b': self.model}
        grid, raw = eval_grid(models, ['copy', 'reverse'], n_examples=2, seeds=(0, 1), max_len=5)
        self.assertEqual(list(grid.columns), EVAL_GRID_COLUMNS)
        self.assertEqual(list(raw.columns), EVAL_RAW_COLUMNS)
        self.assertEqual(len(grid), 4)
        self.assertEqual(len(raw), 8)
        a = grid[grid['model'] == 'a'].reset_index(drop=True)
        b = grid[grid['model'] == 'b'].reset_index(drop=True)
        np.testing.assert_array_equal(a['mean'].to_numpy(), b['mean'].to_numpy())
        self.assertTrue((grid['n_seeds'] == 2).all())
        self.assertTrue((grid['std'] >= 0).all())

    def test_row_order(self):
        models = {'b': self.model, 'a': self.model}
        grid, raw = eval_grid(models, ['reverse', 'copy'], n_examples=1, seeds=(1, 0), max_len=4)
        self.assertEqual(list(zip(grid['model'], grid['task'])),
                         [('a', 'copy'), ('a', 'reverse'), ('b', 'copy'), ('b', 'reverse')])
        self.assertEqual(list(zip(raw['task'], raw['seed'], raw['model']))[:4],
                         [('reverse', 1, 'b'), ('reverse', 1, 'a'), ('reverse', 0, 'b'), ('reverse', 0, 'a')])

    def test_grid_is_deterministic(self):
        first, _ = eval_grid({'a': self.model}, ['copy'], n_examples=2, seeds=(0, 1), max_len=4)
        second, _ = eval_grid({'a': self.model}, ['copy'], n_examples=2, seeds=(0, 1), max_len=4)
        pd.testing.assert_frame_equal(first, second)

    def test_table_lists_models(self):
        grid, _ = eval_grid({'tiny': self.model}, ['copy'], n_examples=1, seeds=(0,), max_len=4)
        table = grid_table(grid)
        self.assertIn('tiny', table)
        self.assertIn('copy', table)

    def test_vocabularies_must_match(self):
        other = build_model(small(vocab_size=400), seed=0)
        with self.assertRaises(DomainError):
            eval_grid({'a': self.model, 'b': other}, ['copy'], n_examples=1, seeds=(0,))


if __name__ == '__main__':
    unittest.main()
