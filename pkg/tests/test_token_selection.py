#!/usr/bin/env python3
"""
Unit tests for token_selection module.
"""

import os
import sys
import unittest

import numpy as np

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from lab_errors import DomainError, ShapeError
from tensor_autograd import Graph, Tensor, backward
from token_selection import compress_tokens, token_scores, variance_select


class TestVarianceSelect(unittest.TestCase):

    def test_oracle(self):
        tokens = np.array([[0.0, 0.0], [1.0, -1.0], [2.0, -2.0], [0.5, -0.5]])
        np.testing.assert_allclose(token_scores(tokens), [0.0, 1.0, 4.0, 0.25])
        selected, kept = variance_select(tokens, 2)
        self.assertEqual(kept, [1, 2])
        np.testing.assert_array_equal(selected.data, tokens[[1, 2]])

    def test_constant_row_dropped_first(self):
        tokens = np.array([[5.0, 5.0, 5.0], [1.0, 2.0, 3.0], [3.0, 1.0, 2.0]])
        _, kept = variance_select(tokens, 2)
        self.assertEqual(kept, [1, 2])

    def test_ties_prefer_lower_index(self):
        tokens = np.array([[1.0, 2.0], [2.0, 1.0], [3.0, 4.0]])
        _, kept = variance_select(tokens, 2)
        self.assertEqual(kept, [0, 1])

    def test_scale_invariant(self):
        tokens = np.random.default_rng(0).normal(size=(20, 6))
        _, kept = variance_select(tokens, 7)
        _, scaled = variance_select(tokens * 3.0, 7)
        self.assertEqual(kept, scaled)

    def test_keep_all_is_identity(self):
        tokens = np.random.default_rng(1).normal(size=(5, 4))
        selected, kept = variance_select(tokens, 5)
        self.assertEqual(kept, [0, 1, 2, 3, 4])
        np.testing.assert_allclose(selected.data, tokens, rtol=1e-6)

    def test_keep_out_of_range(self):
        tokens = np.ones((3, 2))
        for keep in (0, 4):
            with self.subTest(keep=keep):
                with self.assertRaises(DomainError):
                    variance_select(tokens, keep)

    def test_needs_matrix(self):
        with self.assertRaises(ShapeError):
            token_scores(np.ones((2, 3, 4)))

    def test_gradient_reaches_kept_rows(self):
        tokens = Tensor(np.array([[0.0, 0.0], [1.0, -1.0], [2.0, -2.0]]), requires_grad=True)
        with Graph() as g:
            selected, _ = variance_select(tokens, 2)
            loss = selected.sum()
        backward(loss, g)
        np.testing.assert_array_equal(tokens.grad, [[0.0, 0.0], [1.0, 1.0], [1.0, 1.0]])


class TestCompress(unittest.TestCase):

    def test_two_thirds_of_3000(self):
        tokens = np.random.default_rng(2).normal(size=(3000, 4))
        selected, kept, achieved = compress_tokens(tokens)
        self.assertEqual(selected.shape, (1000, 4))
        self.assertEqual(len(kept), 1000)
        self.assertAlmostEqual(achieved, 2 / 3)

    def test_at_least_one_survives(self):
        _, kept, _ = compress_tokens(np.random.default_rng(3).normal(size=(2, 3)), reduction=0.9)
        self.assertEqual(len(kept), 1)

    def test_zero_reduction(self):
        _, kept, achieved = compress_tokens(np.ones((4, 2)), reduction=0.0)
        self.assertEqual(kept, [0, 1, 2, 3])
        self.assertEqual(achieved, 0.0)

    def test_invalid_reduction(self):
        with self.assertRaises(DomainError):
            compress_tokens(np.ones((4, 2)), reduction=1.0)


if __name__ == '__main__':
    unittest.main()
