#!/usr/bin/env python3
"""
Tests for the edlab command line: exit codes, error lines and artifacts.
"""

import io
import os
import shutil
import sys
import tempfile
import unittest
from unittest.mock import patch

import numpy as np
import pandas as pd

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import edlab
from artifact_utils import load_json
from constants import SWEEP_COLUMNS
from print_utils import set_quiet
from run_config import load_run_config

TINY_TRAINING = [
    "model.d_model=16", "model.n_heads=2", "model.n_kv_heads=1", "model.d_ff=32",
    "data.n_examples=8", "data.min_len=2", "data.max_len=6",
    "train.total_steps=3", "train.batch_size=4", "train.enc_len=12", "train.dec_len=12",
]


class CLITestCase(unittest.TestCase):

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        set_quiet(False)
        shutil.rmtree(self.temp_dir)

    def out(self, name):
        return os.path.join(self.temp_dir, name)

    def invoke(self, subcommand, overrides=(), out="run", config=None):
        """Run main() quietly; returns (exit code, stderr text)."""
        argv = [subcommand, "--out", self.out(out), "--quiet"]
        if config:
            argv += ["--config", config]
        for item in overrides:
            argv += ["--set", item]
        with patch('sys.stderr', new_callable=io.StringIO) as err:
            code = edlab.main(argv)
        return code, err.getvalue()


class TestExitCodes(CLITestCase):

    def test_missing_config_file(self):
        missing = self.out("absent.cfg")
        code, err = self.invoke("profile", config=missing)
        self.assertEqual(code, 3)
        self.assertIn("error[config]", err)
        self.assertIn(missing, err)

    def test_unparsable_config_file(self):
        path = self.out("bad.cfg")
        with open(path, "w") as f:
            f.write("run.seed=1\nthis is not an assignment\n")
        code, err = self.invoke("profile", config=path)
        self.assertEqual(code, 3)
        self.assertIn("line 2", err)

    def test_unknown_override_key(self):
        code, err = self.invoke("profile", ["train.learning_rate=0.1"])
        self.assertEqual(code, 2)
        self.assertIn("error[usage]", err)

    def test_unknown_subcommand(self):
        with patch('sys.stderr', new_callable=io.StringIO) as err:
            code = edlab.main(["sample", "--out", self.out("run")])
        self.assertEqual(code, 2)
        self.assertIn("error[usage]", err.getvalue())

    def test_invalid_model_shape(self):
        code, err = self.invoke("finetune", ["model.d_model=30"])
        self.assertEqual(code, 3)
        self.assertIn("error[config]", err)

    def test_distill_without_teacher(self):
        code, err = self.invoke("distill", TINY_TRAINING + ["kd.alpha=0.5"])
        self.assertEqual(code, 3)
        self.assertIn("teacher.checkpoint", err)

    def test_eval_needs_checkpoint(self):
        code, _ = self.invoke("eval")
        self.assertEqual(code, 3)

    def test_missing_checkpoint(self):
        code, err = self.invoke("eval", ["model.checkpoint=" + self.out("none.ckpt")])
        self.assertEqual(code, 3)
        self.assertIn("none.ckpt", err)

    def test_one_error_line(self):
        _, err = self.invoke("profile", ["profile.cross_kv_mode=streamed"])
        self.assertEqual(len(err.strip().splitlines()), 1)

    def test_wrong_typed_section_value(self):
        code, err = self.invoke("finetune", TINY_TRAINING + ["data.n_examples=abc"])
        self.assertEqual(code, 3)
        self.assertIn("data.n_examples", err)
        self.assertEqual(len(err.strip().splitlines()), 1)

    def test_unexpected_failure_is_runtime_error(self):
        with patch('edlab.cmd_profile', side_effect=ValueError("bad shape\nsecond line")):
            code, err = self.invoke("profile")
        self.assertEqual(code, 1)
        self.assertIn("error[runtime]: ValueError: bad shape", err)
        self.assertEqual(len(err.strip().splitlines()), 1)


class TestProfileCommand(CLITestCase):

    def test_writes_sweep_and_manifest(self):
        code, _ = self.invoke("profile", ["profile.input_lens=[128, 512]", "profile.output_len=32",
                                          "profile.plot=false"])
        self.assertEqual(code, 0)
        frame = pd.read_csv(os.path.join(self.out("run"), "profile_sweep.csv"))
        self.assertEqual(list(frame.columns), SWEEP_COLUMNS)
        self.assertEqual(frame["input_len"].tolist(), [128, 512])

        manifest = load_json(os.path.join(self.out("run"), "manifest.json"))
        self.assertEqual(manifest["subcommand"], "profile")
        self.assertFalse(manifest["claims_passed"])
        claims = load_json(os.path.join(self.out("run"), "claims.json"))
        self.assertEqual({c["pair"] for c in claims.values()}, {"2/3-1/3"})
        self.assertFalse(claims["memory_ratio"]["passed"])
        self.assertIn("1/4-3/4", claims["memory_ratio"]["by_pair"])
        for name in ("profile_sweep.csv", "claims.json", "profile_encoder_decoder.json",
                     "profile_decoder_only.json"):
            self.assertIn(name, manifest["artifacts"])
        self.assertNotIn("profile_sweep.png", manifest["artifacts"])

    def test_toy_preset_with_plot(self):
        code, _ = self.invoke("profile", ["profile.preset=toy", "profile.claims=false",
                                          "profile.input_lens=[8, 16]", "profile.output_len=4"])
        self.assertEqual(code, 0)
        self.assertTrue(os.path.getsize(os.path.join(self.out("run"), "profile_sweep.png")) > 0)

    def test_same_config_same_hash(self):
        first = edlab.run("profile", overrides=["profile.plot=false", "profile.claims=false"],
                          out_dir=self.out("a"))
        second = edlab.run("profile", overrides=["profile.plot=false", "profile.claims=false"],
                           out_dir=self.out("b"))
        self.assertEqual(first["config_hash"], second["config_hash"])


class TestTrainingCommands(CLITestCase):

    def test_finetune_then_eval(self):
        code, _ = self.invoke("finetune", TINY_TRAINING, out="ft")
        self.assertEqual(code, 0)
        metrics = pd.read_csv(os.path.join(self.out("ft"), "metrics.csv"))
        self.assertEqual(metrics["step"].tolist(), [1, 2, 3])
        checkpoint = os.path.join(self.out("ft"), "model.ckpt")
        self.assertTrue(os.path.exists(checkpoint))

        code, _ = self.invoke("eval", ["model.checkpoint=" + checkpoint, 'eval.tasks=["copy"]',
                                       "eval.n_examples=1", "eval.seeds=[0]", "eval.max_new=4",
                                       "data.n_examples=2", "data.max_len=4"], out="ev")
        self.assertEqual(code, 0)
        grid = pd.read_csv(os.path.join(self.out("ev"), "eval_grid.csv"))
        self.assertEqual(grid["task"].tolist(), ["copy"])
        manifest = load_json(os.path.join(self.out("ev"), "manifest.json"))
        self.assertGreater(manifest["perplexity"]["ft"], 1.0)

    def test_distill_alpha_zero_matches_finetune(self):
        self.assertEqual(self.invoke("finetune", TINY_TRAINING, out="ft")[0], 0)
        self.assertEqual(self.invoke("distill", TINY_TRAINING + ["kd.alpha=0"], out="kd")[0], 0)
        ft = pd.read_csv(os.path.join(self.out("ft"), "metrics.csv"))
        kd = pd.read_csv(os.path.join(self.out("kd"), "metrics.csv"))
        np.testing.assert_array_equal(ft["loss"].to_numpy(), kd["loss"].to_numpy())

    def test_pretrain_records_result(self):
        manifest = edlab.run("pretrain", overrides=TINY_TRAINING + ["data.n_documents=4", "data.doc_len=48",
                                                                    "data.seq_len=16", "train.enc_len=24",
                                                                    "train.dec_len=24"],
                             out_dir=self.out("pt"))
        self.assertEqual(manifest["result"]["final_step"], 3)
        self.assertIn("model.ckpt", manifest["artifacts"])


class TestHeldOutPerplexity(unittest.TestCase):

    def test_examples_are_not_training_examples(self):
        config = load_run_config(None, ["data.n_examples=300", "data.min_len=1", "data.max_len=2"])
        training = {(tuple(ex.x), tuple(ex.y)) for ex in edlab._task_examples(config)}
        held_out = edlab._held_out_examples(config)
        self.assertTrue(held_out)
        self.assertFalse(any((tuple(ex.x), tuple(ex.y)) in training for ex in held_out))

    def test_record_task_needs_held_out_file(self):
        config = load_run_config(None, ["data.records=train.jsonl"])
        self.assertIsNone(edlab._held_out_examples(config))


if __name__ == '__main__':
    unittest.main()
