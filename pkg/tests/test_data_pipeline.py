#!/usr/bin/env python3
"""
Unit tests for data_pipeline module.
"""

import os
import shutil
import sys
import tempfile
import unittest

import numpy as np

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from constants import BOS_ID, EOS_ID, EXPAND_SEPARATOR, MAX_INPUT_TOKENS, PAD_ID, TASK_KINDS
from data_pipeline import (
    SPAN_TAG,
    TaskExample,
    collate_batch,
    corrupted_fraction,
    decode_text,
    detokenize,
    is_sentinel,
    make_synthetic_task,
    random_letter_documents,
    read_corpus,
    read_records,
    reconstruct_spans,
    sentinel_id,
    span_corrupt,
    span_corruption_examples,
    task_target,
    tokenize,
    write_records,
)
from lab_errors import CapacityError, ConfigError, DomainError


class TestTokenizer(unittest.TestCase):

    def test_utf8_round_trip(self):
        text = "héllo, wörld"
        self.assertEqual(detokenize(tokenize(text)).decode('utf-8'), text)

    def test_special_tokens_rejected(self):
        with self.assertRaises(DomainError):
            detokenize([104, EOS_ID])

    def test_decode_text_drops_specials(self):
        self.assertEqual(decode_text([BOS_ID, 104, 105, EOS_ID, PAD_ID]), "hi")

    def test_sentinel_range(self):
        self.assertTrue(is_sentinel(sentinel_id(0)))
        self.assertTrue(is_sentinel(sentinel_id(99)))
        self.assertFalse(is_sentinel(EOS_ID))
        with self.assertRaises(DomainError):
            sentinel_id(100)


class TestSpanCorruption(unittest.TestCase):

    def setUp(self):
        self.tokens = np.random.default_rng(0).integers(97, 123, size=200).tolist()

    def test_reconstruction(self):
        for seed in range(5):
            inputs, targets = span_corrupt(self.tokens, rng_seed=seed)
            with self.subTest(seed=seed):
                self.assertEqual(reconstruct_spans(inputs, targets), self.tokens)

    def test_noise_ratio(self):
        inputs, targets = span_corrupt(self.tokens, noise_ratio=0.15, mean_span=3, rng_seed=1)
        self.assertAlmostEqual(corrupted_fraction(inputs, targets), 0.15)
        self.assertEqual(sum(1 for t in inputs if is_sentinel(t)), 10)

    def test_target_layout(self):
        inputs, targets = span_corrupt(self.tokens, rng_seed=2)
        self.assertEqual(targets[0], sentinel_id(0))
        self.assertEqual(targets[-1], EOS_ID)
        sentinels = [t for t in targets if is_sentinel(t)]
        self.assertEqual(sentinels, [sentinel_id(i) for i in range(len(sentinels))])

    def test_spans_never_touch(self):
        inputs, _ = span_corrupt(self.tokens, rng_seed=3)
        for a, b in zip(inputs, inputs[1:]):
            self.assertFalse(is_sentinel(a) and is_sentinel(b))

    def test_deterministic_per_seed(self):
        self.assertEqual(span_corrupt(self.tokens, rng_seed=4), span_corrupt(self.tokens, rng_seed=4))
        self.assertNotEqual(span_corrupt(self.tokens, rng_seed=4), span_corrupt(self.tokens, rng_seed=5))

    def test_short_sequence_skipped(self):
        with self.assertLogs('data_pipeline', level='WARNING'):
            self.assertIsNone(span_corrupt([97, 98, 99], mean_span=3))

    def test_invalid_ratio(self):
        with self.assertRaises(DomainError):
            span_corrupt(self.tokens, noise_ratio=1.5)

    def test_corpus_examples(self):
        docs = random_letter_documents(4, 100, rng_seed=0)
        examples = span_corruption_examples(docs, seq_len=32)
        self.assertTrue(examples)
        for ex in examples:
            self.assertEqual(ex.task_tag, SPAN_TAG)
            self.assertEqual(ex.y[-1], EOS_ID)


class TestSyntheticTasks(unittest.TestCase):

    def test_targets(self):
        x = [97, 98, 99, 100, 101]
        self.assertEqual(task_target('copy', x), x)
        self.assertEqual(task_target('reverse', x), x[::-1])
        self.assertEqual(task_target('compress', x), [97, 101])
        self.assertEqual(task_target('expand', [97, 98]),
                         [97, 98, EXPAND_SEPARATOR, 97, 98, EXPAND_SEPARATOR, 97, 98])

    def test_unknown_kind(self):
        with self.assertRaises(DomainError):
            task_target('sort', [1, 2])

    def test_seeded_generation(self):
        a = make_synthetic_task('reverse', 8, rng_seed=3)
        b = make_synthetic_task('reverse', 8, rng_seed=3)
        self.assertEqual([(e.x, e.y) for e in a], [(e.x, e.y) for e in b])

    def test_lengths_in_range(self):
        for kind in TASK_KINDS:
            with self.subTest(kind=kind):
                for ex in make_synthetic_task(kind, 20, min_len=5, max_len=9):
                    self.assertTrue(5 <= len(ex.x) <= 9)
                    self.assertEqual(ex.y, task_target(kind, ex.x))
                    self.assertEqual(ex.task_tag, kind)

    def test_input_cap(self):
        with self.assertRaises(CapacityError):
            TaskExample([97] * (MAX_INPUT_TOKENS + 1), [97], 'copy')


class TestCollation(unittest.TestCase):

    def test_layout(self):
        batch = collate_batch([TaskExample([1, 2, 3], [4, 5], 'copy')], enc_len=5, dec_len=4)
        np.testing.assert_array_equal(batch.enc_ids[0], [1, 2, 3, PAD_ID, PAD_ID])
        np.testing.assert_array_equal(batch.dec_ids[0], [BOS_ID, 4, 5, EOS_ID])
        np.testing.assert_array_equal(batch.targets[0], [4, 5, EOS_ID, PAD_ID])
        np.testing.assert_array_equal(batch.loss_mask[0], [1, 1, 1, 0])
        self.assertEqual((batch.n_e[0], batch.n_d[0]), (2, 1))
        self.assertEqual(batch.n_target_tokens, 3)

    def test_concat_layout(self):
        batch = collate_batch([TaskExample([1, 2, 3], [4, 5], 'copy')], enc_len=5, dec_len=4)
        ids, mask, start = batch.concat_layout()
        np.testing.assert_array_equal(ids[0], [PAD_ID, PAD_ID, 1, 2, 3, 4, 5, EOS_ID, PAD_ID])
        np.testing.assert_array_equal(mask[0], [0, 0, 1, 1, 1, 1, 1, 1, 0])
        self.assertEqual(start, 4)

    def test_overflow_names_examples(self):
        examples = [TaskExample([1], [2], 'copy'), TaskExample([1] * 6, [2], 'copy')]
        with self.assertRaises(CapacityError) as ctx:
            collate_batch(examples, enc_len=5, dec_len=4)
        self.assertEqual(ctx.exception.offending, [1])

    def test_target_needs_room_for_eos(self):
        with self.assertRaises(CapacityError):
            collate_batch([TaskExample([1], [2, 3, 4, 5], 'copy')], enc_len=5, dec_len=4)


class TestFiles(unittest.TestCase):

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def test_records_round_trip(self):
        path = os.path.join(self.temp_dir, "data.tsv")
        examples = [TaskExample([97, 98], [98, 97], 'reverse'),
                    TaskExample([sentinel_id(0), 99], [sentinel_id(0), 100, EOS_ID], SPAN_TAG)]
        write_records(path, examples)
        loaded = read_records(path)
        self.assertEqual([(e.x, e.y, e.task_tag) for e in loaded],
                         [(e.x, e.y, e.task_tag) for e in examples])

    def test_malformed_record(self):
        path = os.path.join(self.temp_dir, "bad.tsv")
        with open(path, "w", encoding="utf-8") as f:
            f.write("copy\t0061\n")
        with self.assertRaises(DomainError):
            read_records(path)

    def test_missing_files(self):
        with self.assertRaises(ConfigError):
            read_records(os.path.join(self.temp_dir, "none.tsv"))
        with self.assertRaises(ConfigError):
            read_corpus(os.path.join(self.temp_dir, "none.txt"))

    def test_corpus_skips_blank_lines(self):
        path = os.path.join(self.temp_dir, "corpus.txt")
        with open(path, "w", encoding="utf-8") as f:
            f.write("first doc\n\n  \nsecond doc\n")
        self.assertEqual(read_corpus(path), ["first doc", "second doc"])


if __name__ == '__main__':
    unittest.main()
