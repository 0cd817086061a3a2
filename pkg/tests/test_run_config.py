#!/usr/bin/env python3
"""
Unit tests for run_config module.
"""

import os
import shutil
import sys
import tempfile
import unittest

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from lab_errors import ConfigError, UsageError
from run_config import (
    config_hash,
    default_run_config,
    dump_config_text,
    field_problems,
    kd_config_from,
    load_run_config,
    model_config_from,
    parse_config_text,
    parse_value,
    resolve_key,
    train_config_from,
)


class TestParsing(unittest.TestCase):

    def test_values(self):
        self.assertEqual(parse_value("3"), 3)
        self.assertEqual(parse_value("2.5e-4"), 2.5e-4)
        self.assertEqual(parse_value("[128, 256]"), [128, 256])
        self.assertIs(parse_value("false"), False)
        self.assertIsNone(parse_value("null"))
        self.assertEqual(parse_value(" 2/3-1/3 "), "2/3-1/3")

    def test_bare_keys(self):
        self.assertEqual(resolve_key("seed"), "run.seed")
        self.assertEqual(resolve_key("alpha"), "kd.alpha")
        self.assertEqual(resolve_key("train.peak_lr"), "train.peak_lr")

    def test_ambiguous_key(self):
        with self.assertRaises(UsageError) as ctx:
            resolve_key("checkpoint")
        self.assertIn("model.checkpoint", str(ctx.exception))
        self.assertIn("teacher.checkpoint", str(ctx.exception))

    def test_unknown_keys(self):
        for key in ("learning_rate", "train.learning_rate", "nosection.seed"):
            with self.subTest(key=key):
                with self.assertRaises(UsageError):
                    resolve_key(key)

    def test_comments_and_blank_lines(self):
        text = "# toy run\n\nrun.seed=7\n  train.total_steps = 12\n"
        self.assertEqual(parse_config_text(text), [("run.seed", 7), ("train.total_steps", 12)])

    def test_line_without_assignment(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_config_text("run.seed=1\njust words\n", source="cfg.txt")
        self.assertIn("line 2", str(ctx.exception))
        self.assertIn("cfg.txt", str(ctx.exception))


class TestLoading(unittest.TestCase):

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.path = os.path.join(self.temp_dir, "run.cfg")

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def write(self, text):
        with open(self.path, "w", encoding="utf-8") as f:
            f.write(text)

    def test_defaults_without_file(self):
        self.assertEqual(load_run_config(), default_run_config())

    def test_overrides_beat_file(self):
        self.write("run.seed=3\nkd.alpha=0.25\n")
        config = load_run_config(self.path, ["seed=9"])
        self.assertEqual(config["run"]["seed"], 9)
        self.assertEqual(config["kd"]["alpha"], 0.25)

    def test_missing_file_names_path(self):
        missing = os.path.join(self.temp_dir, "absent.cfg")
        with self.assertRaises(ConfigError) as ctx:
            load_run_config(missing)
        self.assertIn(missing, str(ctx.exception))

    def test_override_needs_equals(self):
        with self.assertRaises(UsageError):
            load_run_config(None, ["run.seed"])

    def test_dump_round_trip(self):
        config = load_run_config(None, ["model.preset=desk", "train.total_steps=50"])
        self.write(dump_config_text(config))
        self.assertEqual(load_run_config(self.path), config)

    def test_invalid_values(self):
        for override in ("run.dtype=float16", "run.seed=1.5", "data.task=sort", "model.d_model=30",
                         "model.preset=huge", "train.total_steps=0", "kd.alpha=2",
                         "profile.cross_kv_mode=streamed"):
            with self.subTest(override=override):
                with self.assertRaises(ConfigError):
                    load_run_config(None, [override])

    def test_invalid_section_values(self):
        for override in ("data.n_examples=abc", "data.min_len=40", "data.seq_len=0", "data.records=3",
                         "eval.tasks=[\"copy\", \"sort\"]", "eval.tasks=[]", "eval.metric=bleu",
                         "eval.seeds=[0.5]", "eval.max_new=0", "eval.checkpoints=\"a.ckpt\"",
                         "eval.perplexity=yes", "profile.input_lens=[0, 128]", "profile.output_len=-1",
                         "profile.preset=huge", "profile.split=1/5-4/5", "profile.plot=1",
                         "bench.n_trials=0", "bench.warmups=-1", "bench.input_len=true", "train.resume=7"):
            with self.subTest(override=override):
                with self.assertRaises(ConfigError):
                    load_run_config(None, [override])

    def test_every_problem_reported(self):
        with self.assertRaises(ConfigError) as ctx:
            load_run_config(None, ["bench.n_trials=0", "eval.metric=bleu"])
        self.assertIn("bench.n_trials", str(ctx.exception))
        self.assertIn("eval.metric", str(ctx.exception))

    def test_defaults_are_valid(self):
        self.assertEqual(field_problems(default_run_config()), [])
        config = load_run_config(None, ["eval.max_new=8", "profile.output_len=0", "bench.warmups=0",
                                        "data.held_out_records=held.jsonl"])
        self.assertEqual(config["data"]["held_out_records"], "held.jsonl")

    def test_unknown_split(self):
        with self.assertRaises(ConfigError):
            load_run_config(None, ["model.preset=desk", "model.split=1/5-4/5"])


class TestViews(unittest.TestCase):

    def test_hash_is_stable_and_sensitive(self):
        a, b = default_run_config(), default_run_config()
        self.assertEqual(config_hash(a), config_hash(b))
        b["run"]["seed"] = 1
        self.assertNotEqual(config_hash(a), config_hash(b))

    def test_desk_model(self):
        config = load_run_config(None, ["model.preset=desk", "model.kind=decoder_only", "model.split=1/2-1/2"])
        cfg = model_config_from(config)
        self.assertEqual((cfg.kind, cfg.n_dec_layers, cfg.d_model), ("decoder_only", 11, 256))

    def test_toy_model_overrides(self):
        config = load_run_config(None, ["model.d_model=16", "model.n_heads=2", "model.n_kv_heads=1"])
        cfg = model_config_from(config)
        self.assertEqual((cfg.d_model, cfg.n_heads, cfg.n_kv_heads), (16, 2, 1))

    def test_train_and_kd_views(self):
        config = load_run_config(None, ["train.total_steps=40", "kd.temperature=1.5"])
        train_cfg = train_config_from(config, "kd")
        self.assertEqual(train_cfg.objective, "kd")
        self.assertEqual(train_cfg.warmup_steps, 39)
        self.assertEqual(kd_config_from(config).temperature, 1.5)


if __name__ == '__main__':
    unittest.main()
