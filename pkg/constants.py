#!/usr/bin/env python3
"""
Centralized constants for the EncDec Lab project.
Contains shared values used across the numeric modules and the CLI.
"""

import os

# Application metadata
APP_NAME = "EncDec Lab"
APP_VERSION = "1.0.0"
APP_AUTHOR = "Matt Y"

# Directory paths
DEFAULT_OUT_DIR = os.path.join(os.getcwd(), "runs")

# Environment switches
SLOW_TESTS_ENV = "EDLAB_SLOW_TESTS"
THREAD_ENV_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

# Byte-level vocabulary layout
N_BYTE_TOKENS = 256
PAD_ID = 256
BOS_ID = 257
EOS_ID = 258
SENTINEL_BASE_ID = 259
N_SENTINELS = 100
MIN_VOCAB_SIZE = SENTINEL_BASE_ID + N_SENTINELS  # 359
DEFAULT_VOCAB_SIZE = 512

# Sequence caps (input / output)
MAX_INPUT_TOKENS = 1024
MAX_OUTPUT_TOKENS = 256

# Numeric tolerances
EPS_LOG_FLOOR = 1e-9
LAYER_NORM_EPS = 1e-5
PROB_ROW_TOL = {
    'float64': 1e-5,
    'float32': 1e-4,
}

# Synthetic task kinds and their separator byte
TASK_KINDS = ('copy', 'reverse', 'compress', 'expand')
EXPAND_SEPARATOR = ord('|')
EXPAND_REPEATS = 3
COMPRESS_STRIDE = 4

# Span corruption defaults
SPAN_CORRUPTION = {
    'noise_ratio': 0.15,
    'mean_span': 3,
}

# Desk reference architecture: d_model=256, 8 heads, 2 kv heads, d_ff=1024, vocab 512
DESK_MODEL = {
    'd_model': 256,
    'n_heads': 8,
    'n_kv_heads': 2,
    'd_ff': 1024,
    'vocab_size': DEFAULT_VOCAB_SIZE,
    'rope_base': 10000.0,
    'ntk_train_len': 4096,
    'max_enc_len': 4096,
    'max_dec_len': 512,
}

# Encoder/decoder layer splits and their parameter-matched decoder-only depth
DESK_SPLITS = {
    '1/4-3/4': (3, 9),
    '1/3-2/3': (4, 8),
    '1/2-1/2': (5, 5),
    '2/3-1/3': (8, 4),
}
DESK_MATCHED_DECODER_LAYERS = {
    '1/4-3/4': 14,
    '1/3-2/3': 14,
    '1/2-1/2': 11,
    '2/3-1/3': 13,
}
PARAM_PARITY_TOLERANCE = 0.02

# Desk split every efficiency claim is judged on
CLAIM_SPLIT = '2/3-1/3'

# Reference values and acceptance bands for the efficiency comparisons
CLAIM_REFERENCES = {
    'inference_flops_ratio': {'value': 0.78, 'band': (0.63, 0.93), 'input_len': 4096, 'output_len': 256},
    'training_flops_ratio': {'value': 0.42, 'band': (0.27, 0.57), 'input_len': 1024, 'output_len': 256},
    'training_flops_inverse': {'value': 3.2, 'band': (2.4, 4.0), 'input_len': 4096, 'output_len': 256},
    'memory_ratio': {'value': 0.865, 'band': (0.75, 0.97), 'input_len': 4096, 'output_len': 256,
                     'batch_size': 32},
}

# Small configs for fast tests and toy training runs
TOY_MODEL = {
    'd_model': 32,
    'n_heads': 4,
    'n_kv_heads': 2,
    'd_ff': 128,
    'vocab_size': DEFAULT_VOCAB_SIZE,
    'rope_base': 10000.0,
    'ntk_train_len': 256,
    'max_enc_len': 128,
    'max_dec_len': 128,
}

# Bench workload: 512 tokens in, 128 out
BENCH_WORKLOAD = {
    'input_len': 512,
    'output_len': 128,
    'n_trials': 10,
    'warmups': 3,
}
BENCH_MIN_VALID_FRACTION = 0.5

# Profiler defaults
PROFILE_DEFAULTS = {
    'element_bytes': 2,
    'prefill_chunk': 1024,
    'input_lens': [128, 256, 512, 1024, 2048, 4096],
    'output_len': 256,
    'batch_size': 1,
}

# Trainer defaults (warmup-cosine schedule, AdamW)
TRAIN_DEFAULTS = {
    'peak_lr': 3e-4,
    'warmup_steps': 2000,
    'desk_warmup_steps': 100,
    'desk_warmup_threshold': 5000,
    'beta1': 0.9,
    'beta2': 0.95,
    'adam_eps': 1e-8,
    'weight_decay': 0.1,
}

# Distillation defaults
KD_DEFAULTS = {
    'temperature': 2.0,
    'alpha': 0.5,
    'kl_direction': 'reverse',
    'generation_source': 'student',
    'ce_target': 'reference',
    'max_gen_len': 64,
    'sample_temperature': 0.0,
}

# Checkpoint file layout
CHECKPOINT_MAGIC = "EDLAB-CKPT 1"
CHECKPOINT_DTYPE = '<f4'

# CSV column orders
METRICS_COLUMNS = ['step', 'loss', 'lr', 'tokens_per_s']
EVAL_GRID_COLUMNS = ['model', 'task', 'metric', 'mean', 'std', 'n_seeds']
EVAL_RAW_COLUMNS = ['model', 'task', 'metric', 'seed', 'score']
SWEEP_COLUMNS = [
    'input_len', 'output_len',
    'encdec_prefill_flops', 'encdec_decode_flops', 'encdec_train_flops', 'encdec_peak_bytes',
    'deconly_prefill_flops', 'deconly_decode_flops', 'deconly_train_flops', 'deconly_peak_bytes',
    'inference_ratio', 'training_ratio', 'memory_ratio',
]

# Process exit codes
EXIT_CODES = {
    'ok': 0,
    'runtime': 1,
    'usage': 2,
    'config': 3,
}

# Artifact file names
ARTIFACT_NAMES = {
    'manifest': 'manifest.json',
    'metrics': 'metrics.csv',
    'checkpoint': 'model.ckpt',
    'eval_grid': 'eval_grid.csv',
    'eval_raw': 'eval_raw.csv',
    'eval_table': 'eval_table.txt',
    'sweep': 'profile_sweep.csv',
    'sweep_plot': 'profile_sweep.png',
    'claims': 'claims.json',
    'bench': 'bench.json',
}

# Error messages
ERROR_MESSAGES = {
    'config_missing': "Config file not found: {path}",
    'config_parse': "Cannot parse line {line_no} of {path}: {line!r}",
    'unknown_key': "Unknown config key: {key}",
    'ambiguous_key': "Ambiguous config key '{key}', candidates: {candidates}",
    'checkpoint_missing': "Checkpoint not found: {path}",
    'teacher_required': "Distillation needs teacher.checkpoint to point at a decoder-only checkpoint",
    'capacity': "{what} of {value} exceeds {cap_name}={cap}",
}

# Success messages
SUCCESS_MESSAGES = {
    'training_done': "Training finished after {steps} steps (final loss {loss:.4f})",
    'checkpoint_saved': "Checkpoint saved to {path}",
    'report_saved': "Report saved to {path}",
    'manifest_saved': "Manifest saved to {path}",
}

if __name__ == "__main__":
    print(f"{APP_NAME} v{APP_VERSION}")
    print(f"Vocabulary: PAD={PAD_ID} BOS={BOS_ID} EOS={EOS_ID} sentinels {SENTINEL_BASE_ID}.."
          f"{SENTINEL_BASE_ID + N_SENTINELS - 1}")
    print(f"Desk splits: {DESK_SPLITS}")
