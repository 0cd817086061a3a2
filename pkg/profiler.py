#!/usr/bin/env python3
"""
Efficiency model for encoder-decoder vs decoder-only transformers.

Analytic FLOP counts (matmuls only, 2mnk per product) for training and
inference, a KV-cache / encoder-output memory model, runtime cross-checks
against MatmulCounter, and a wall-clock first-token / throughput bench.

Counting convention per token per layer, with d = d_model, kv = n_kv_heads * d_head:
    self-attention projections   4*d*d + 4*d*kv
    feed-forward                 4*d*d_ff
    attention scores + values    4*d*n_keys (per query)
    cross-attention (enc-dec)    4*d*d per decoder token, 4*d*|x| per query,
                                 4*d*kv per encoder token per decoder layer (K/V)
    LM head                      2*d*vocab per position with logits

Author: Matt Y
License: MIT
Version: 1.0.0
"""

import logging
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from constants import (
    BENCH_MIN_VALID_FRACTION,
    BENCH_WORKLOAD,
    BOS_ID,
    CLAIM_REFERENCES,
    CLAIM_SPLIT,
    DESK_SPLITS,
    PROFILE_DEFAULTS,
    SWEEP_COLUMNS,
)
from data_pipeline import TaskExample, collate_batch
from distillation import seq2seq_logits
from lab_errors import BenchError, DomainError, LabError
from model_zoo import decode_step, encode_once, matched_pair, new_cache, prefill
from tensor_autograd import MatmulCounter, no_grad
from tqdm_utils import close_progress_bar, create_progress_bar, update_progress_bar

logger = logging.getLogger(__name__)

CROSS_KV_MODES = ("precomputed", "recompute")


@dataclass(frozen=True)
class Workload:
    """One inference/training shape: |x|, |y|, batch and deployment element width."""

    input_len: int
    output_len: int
    batch_size: int = 1
    element_bytes: int = PROFILE_DEFAULTS['element_bytes']
    prefill_chunk: int = PROFILE_DEFAULTS['prefill_chunk']

    def __post_init__(self):
        if self.input_len < 1:
            raise DomainError(f"input_len must be positive, got {self.input_len}")
        if self.output_len < 0:
            raise DomainError(f"output_len must be nonnegative, got {self.output_len}")
        for name in ("batch_size", "element_bytes", "prefill_chunk"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be positive, got {getattr(self, name)}")

    def to_dict(self):
        return asdict(self)


@dataclass
class CostReport:
    """Analytic costs for one config and workload, plus bench measurements when taken."""

    kind: str
    config: dict
    workload: dict
    prefill_flops: int
    decode_flops_total: int
    train_step_flops: int
    kv_bytes_peak: int
    activation_bytes_model: int
    first_token_ms: float = None
    tokens_per_s: float = None
    n_valid_trials: int = None
    trial_first_token_ms: list = field(default_factory=list)
    trial_tokens_per_s: list = field(default_factory=list)

    @property
    def inference_flops(self):
        return self.prefill_flops + self.decode_flops_total

    @property
    def peak_bytes(self):
        return self.kv_bytes_peak + self.activation_bytes_model

    def to_dict(self):
        data = asdict(self)
        if self.first_token_ms is None:
            for key in ("first_token_ms", "tokens_per_s", "n_valid_trials",
                        "trial_first_token_ms", "trial_tokens_per_s"):
                data.pop(key)
        data["inference_flops"] = self.inference_flops
        data["peak_bytes"] = self.peak_bytes
        return data


# ============================================================================
# Per-component FLOP terms
# ============================================================================

def _token_linear(cfg):
    d = cfg.d_model
    return 4 * d * d + 4 * d * cfg.kv_dim + 4 * d * cfg.d_ff


def _attend(cfg, n_queries, n_keys):
    return 4 * cfg.d_model * n_queries * n_keys


def _lm_head(cfg, n_positions):
    return 2 * cfg.d_model * cfg.vocab_size * n_positions


def _causal_keys(n_queries, n_cached):
    """Sum of key counts over a block of queries appended after ``n_cached`` cached entries."""
    return n_queries * n_cached + n_queries * (n_queries + 1) // 2


def _encoder(cfg, n):
    return cfg.n_enc_layers * (n * _token_linear(cfg) + _attend(cfg, n, n))


def _cross_kv(cfg, n_enc):
    return cfg.n_dec_layers * 4 * cfg.d_model * cfg.kv_dim * n_enc


def _decoder_block(cfg, n_queries, key_sum, enc_len=0):
    """Decoder stack for ``n_queries`` tokens whose self-attention sees ``key_sum`` keys in total."""
    per_layer = n_queries * _token_linear(cfg) + 4 * cfg.d_model * key_sum
    if cfg.is_encoder_decoder:
        per_layer += 4 * cfg.d_model * cfg.d_model * n_queries + _attend(cfg, n_queries, enc_len)
    return cfg.n_dec_layers * per_layer


def flops_forward(config, enc_len, dec_len):
    """
    Teacher-forced forward for one sequence with logits at every decoder position.

    Decoder-only models run the concatenated sequence of ``enc_len + dec_len`` tokens.
    """
    if config.is_encoder_decoder:
        return (_encoder(config, enc_len) + _cross_kv(config, enc_len)
                + _decoder_block(config, dec_len, dec_len * dec_len, enc_len)
                + _lm_head(config, dec_len))
    total = enc_len + dec_len
    return _decoder_block(config, total, total * total) + _lm_head(config, total)


# ============================================================================
# Analytic model
# ============================================================================

def flops_inference(config, workload):
    """
    (prefill_flops, decode_flops_total) for generating ``output_len`` tokens.

    Prefill ends with the first next-token logits: encoder, cross K/V and the
    BOS step for enc-dec; the chunked cached input pass for decoder-only.
    Decode covers the remaining ``output_len - 1`` cached steps.
    """
    cfg, x, steps = config, workload.input_len, max(workload.output_len - 1, 0)
    if cfg.is_encoder_decoder:
        prefill_flops = (_encoder(cfg, x) + _cross_kv(cfg, x)
                         + _decoder_block(cfg, 1, 1, x) + _lm_head(cfg, 1))
        # step j attends to BOS plus j generated tokens
        decode = (_decoder_block(cfg, steps, _causal_keys(steps, 1), x) + _lm_head(cfg, steps))
    else:
        prefill_flops = _lm_head(cfg, 1)
        chunk = workload.prefill_chunk
        for start in range(0, x, chunk):
            n = min(chunk, x - start)
            # every query in a chunk scores against all keys cached so far
            prefill_flops += _decoder_block(cfg, n, n * (start + n))
        decode = _decoder_block(cfg, steps, _causal_keys(steps, x)) + _lm_head(cfg, steps)
    return prefill_flops * workload.batch_size, decode * workload.batch_size


def flops_train_step(config, workload):
    """Forward plus backward (2x forward) over a batch of full sequences."""
    forward = flops_forward(config, workload.input_len, workload.output_len)
    return 3 * forward * workload.batch_size


def memory_model(config, workload, cross_kv_mode="precomputed"):
    """
    (kv_bytes_peak, activation_bytes) held during generation.

    Decoder-only caches keys/values for input and output positions. Enc-dec
    caches decoder self-attention over the output only and holds the encoder
    output, plus cross K/V per decoder layer when precomputed.
    """
    if cross_kv_mode not in CROSS_KV_MODES:
        raise DomainError(f"cross_kv_mode must be one of {CROSS_KV_MODES}, got {cross_kv_mode!r}")
    cfg, w = config, workload
    per_token = 2 * cfg.kv_dim * w.batch_size * w.element_bytes
    if not cfg.is_encoder_decoder:
        return cfg.n_dec_layers * (w.input_len + w.output_len) * per_token, 0
    kv = cfg.n_dec_layers * w.output_len * per_token
    activation = w.input_len * cfg.d_model * w.batch_size * w.element_bytes
    if cross_kv_mode == "precomputed":
        activation += cfg.n_dec_layers * w.input_len * per_token
    return kv, activation


def analytic_report(config, workload, cross_kv_mode="precomputed"):
    prefill_flops, decode = flops_inference(config, workload)
    kv, activation = memory_model(config, workload, cross_kv_mode)
    return CostReport(
        kind=config.kind,
        config=config.to_dict(),
        workload=workload.to_dict(),
        prefill_flops=prefill_flops,
        decode_flops_total=decode,
        train_step_flops=flops_train_step(config, workload),
        kv_bytes_peak=kv,
        activation_bytes_model=activation,
    )


# ============================================================================
# Runtime cross-checks
# ============================================================================

def _random_ids(n, rng):
    return rng.integers(0, 256, size=n).tolist()


def _first_logits(model, x, chunk, output_len):
    cache = new_cache(model, len(x), output_len)
    if model.config.is_encoder_decoder:
        context = encode_once(model, x)
        return context, cache, decode_step(model, context, cache, BOS_ID)
    return None, cache, prefill(model, cache, x, chunk=chunk)


def _decode_rest(model, context, cache, logits, n_steps):
    # EOS is ignored so every run decodes the full budget
    for _ in range(n_steps):
        logits = decode_step(model, context, cache, int(np.argmax(logits.data)))
    return logits


def runtime_flops(model, workload, seed=0):
    """
    Matmul FLOPs counted while actually running the model on random input.

    Returns:
        dict with 'prefill', 'decode_total' and 'train_forward', per batch row
        for inference and for the whole batch for the forward pass
    """
    rng = np.random.default_rng(seed)
    x = _random_ids(workload.input_len, rng)
    with MatmulCounter() as first:
        context, cache, logits = _first_logits(model, x, workload.prefill_chunk, workload.output_len)
    with MatmulCounter() as rest:
        _decode_rest(model, context, cache, logits, max(workload.output_len - 1, 0))

    counts = {"prefill": first.flops, "decode_total": rest.flops, "train_forward": 0}
    if workload.output_len > 0:
        examples = [TaskExample(_random_ids(workload.input_len, rng),
                                _random_ids(workload.output_len - 1, rng), "runtime")
                    for _ in range(workload.batch_size)]
        batch = collate_batch(examples, workload.input_len, workload.output_len)
        with no_grad(), MatmulCounter() as forward:
            seq2seq_logits(model, batch)
        counts["train_forward"] = forward.flops
    return counts


# ============================================================================
# Wall-clock bench
# ============================================================================

def _timed_trial(model, x, output_len, chunk):
    start = time.perf_counter()
    context, cache, logits = _first_logits(model, x, chunk, output_len)
    first_done = time.perf_counter()
    n_rest = output_len - 1
    _decode_rest(model, context, cache, logits, n_rest)
    end = time.perf_counter()
    tokens_per_s = n_rest / (end - first_done) if n_rest > 0 and end > first_done else None
    return (first_done - start) * 1000.0, tokens_per_s


def _bench_one(model, workload, n_trials, warmups, x):
    first_ms, rates = [], []
    bar = create_progress_bar(warmups + n_trials, desc=f"bench {model.kind}", unit="trial")
    try:
        for trial in range(warmups + n_trials):
            try:
                ms, rate = _timed_trial(model, x, workload.output_len, workload.prefill_chunk)
            except (LabError, FloatingPointError, MemoryError) as e:
                logger.warning("bench trial %d on %s discarded: %s", trial, model.kind, e)
                update_progress_bar(bar, phase="failed")
                continue
            if trial >= warmups:
                first_ms.append(ms)
                if rate is not None:
                    rates.append(rate)
            update_progress_bar(bar, phase="warmup" if trial < warmups else "timed")
    finally:
        close_progress_bar(bar)

    needed = BENCH_MIN_VALID_FRACTION * n_trials
    if len(first_ms) < needed:
        raise BenchError(f"{model.kind}: only {len(first_ms)} of {n_trials} trials completed")
    report = analytic_report(model.config, workload)
    report.first_token_ms = statistics.median(first_ms)
    report.tokens_per_s = statistics.median(rates) if rates else None
    report.n_valid_trials = len(first_ms)
    report.trial_first_token_ms = first_ms
    report.trial_tokens_per_s = rates
    return report


def bench(model_a, model_b, workload, n_trials=BENCH_WORKLOAD['n_trials'],
          warmups=BENCH_WORKLOAD['warmups'], seed=0):
    """
    Median first-token latency and decode throughput for two models on one workload.

    Both models see the same random input. Runs on the calling thread; the
    CLI pins BLAS to one thread before numpy loads.

    Returns:
        (CostReport for model_a, CostReport for model_b)
    """
    if workload.batch_size != 1:
        raise DomainError("bench measures single-sequence latency; use batch_size=1")
    if n_trials < 1:
        raise DomainError(f"n_trials must be positive, got {n_trials}")
    x = _random_ids(workload.input_len, np.random.default_rng(seed))
    reports = []
    for model in (model_a, model_b):
        report = _bench_one(model, workload, n_trials, warmups, x)
        logger.info("%s: first token %.2f ms, %s tok/s over %d trials", model.kind,
                    report.first_token_ms,
                    "n/a" if report.tokens_per_s is None else f"{report.tokens_per_s:.1f}",
                    report.n_valid_trials)
        reports.append(report)
    return tuple(reports)


# ============================================================================
# Sweeps and headline comparisons
# ============================================================================

def sweep(encdec_config, deconly_config, input_lens=None, output_len=None, batch_size=1,
          element_bytes=PROFILE_DEFAULTS['element_bytes'],
          prefill_chunk=PROFILE_DEFAULTS['prefill_chunk'], cross_kv_mode="precomputed"):
    """Analytic costs of both models over an input-length sweep, one row per |x|."""
    input_lens = input_lens or PROFILE_DEFAULTS['input_lens']
    output_len = PROFILE_DEFAULTS['output_len'] if output_len is None else output_len
    rows = []
    for n in input_lens:
        w = Workload(n, output_len, batch_size, element_bytes, prefill_chunk)
        ed = analytic_report(encdec_config, w, cross_kv_mode)
        do = analytic_report(deconly_config, w, cross_kv_mode)
        rows.append({
            'input_len': n,
            'output_len': output_len,
            'encdec_prefill_flops': ed.prefill_flops,
            'encdec_decode_flops': ed.decode_flops_total,
            'encdec_train_flops': ed.train_step_flops,
            'encdec_peak_bytes': ed.peak_bytes,
            'deconly_prefill_flops': do.prefill_flops,
            'deconly_decode_flops': do.decode_flops_total,
            'deconly_train_flops': do.train_step_flops,
            'deconly_peak_bytes': do.peak_bytes,
            'inference_ratio': ed.inference_flops / do.inference_flops,
            'training_ratio': ed.train_step_flops / do.train_step_flops,
            'memory_ratio': ed.peak_bytes / do.peak_bytes,
        })
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


def _claim(name, by_pair, split):
    ref = CLAIM_REFERENCES[name]
    low, high = ref['band']
    value = by_pair[split]
    return {'pair': split, 'value': float(value), 'reference': ref['value'], 'band': [low, high],
            'passed': bool(low <= value <= high),
            'by_pair': {s: float(v) for s, v in by_pair.items()},
            'pairs_in_band': [s for s, v in by_pair.items() if low <= v <= high]}


def _headline_ratios(ed, do, prefill_chunk, element_bytes):
    refs = CLAIM_REFERENCES
    ref = refs['inference_flops_ratio']
    w = Workload(ref['input_len'], ref['output_len'], element_bytes=element_bytes, prefill_chunk=prefill_chunk)
    ratios = {'inference_flops_ratio': analytic_report(ed, w).inference_flops / analytic_report(do, w).inference_flops}
    for name in ('training_flops_ratio', 'training_flops_inverse'):
        w = Workload(refs[name]['input_len'], refs[name]['output_len'])
        ratio = flops_train_step(ed, w) / flops_train_step(do, w)
        ratios[name] = ratio if name == 'training_flops_ratio' else 1.0 / ratio
    ref = refs['memory_ratio']
    w = Workload(ref['input_len'], ref['output_len'], ref['batch_size'], element_bytes)
    ratios['memory_ratio'] = analytic_report(ed, w).peak_bytes / analytic_report(do, w).peak_bytes
    return ratios


def claim_checks(prefill_chunk=PROFILE_DEFAULTS['prefill_chunk'],
                 element_bytes=PROFILE_DEFAULTS['element_bytes'], split=CLAIM_SPLIT):
    """
    Headline efficiency ratios of the matched ``split`` pair against their reference bands.

    Every claim is judged on the same pair; ``by_pair`` records the ratio for
    every desk split and ``pairs_in_band`` the splits that would pass. Also
    reports the two monotonicity properties on that pair: training ratio
    non-increasing in |x| and inference ratio non-increasing in |y|.
    """
    per_split = {s: _headline_ratios(*matched_pair(s), prefill_chunk, element_bytes) for s in DESK_SPLITS}
    results = {name: _claim(name, {s: per_split[s][name] for s in DESK_SPLITS}, split)
               for name in CLAIM_REFERENCES}

    ed, do = matched_pair(split)
    ratios = []
    for y in (32, 64, 128, 256, 512):
        wy = Workload(CLAIM_REFERENCES['inference_flops_ratio']['input_len'], y, element_bytes=element_bytes,
                      prefill_chunk=prefill_chunk)
        ratios.append(analytic_report(ed, wy).inference_flops / analytic_report(do, wy).inference_flops)
    results['inference_ratio_nonincreasing_in_output'] = {
        'pair': split, 'values': ratios,
        'passed': all(r2 <= r1 for r1, r2 in zip(ratios, ratios[1:]))}

    frame = sweep(ed, do, input_lens=[1] + PROFILE_DEFAULTS['input_lens'], output_len=256)
    values = frame['training_ratio'].tolist()
    results['training_ratio_nonincreasing_in_input'] = {
        'pair': split, 'values': values,
        'passed': all(r2 <= r1 for r1, r2 in zip(values, values[1:]))}
    return results


def plot_sweep(frame, path):
    """Write a two-panel PNG of a sweep: FLOP ratios and peak memory against |x|."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (left, right) = plt.subplots(1, 2, figsize=(11, 4))
    for column, label in (('inference_ratio', 'inference'), ('training_ratio', 'training'),
                          ('memory_ratio', 'peak memory')):
        left.plot(frame['input_len'], frame[column], marker='o', label=label)
    left.axhline(1.0, color='grey', linewidth=0.8, linestyle='--')
    left.set_xscale('log', base=2)
    left.set_xlabel('input length')
    left.set_ylabel('encoder-decoder / decoder-only')
    left.legend()

    right.plot(frame['input_len'], frame['encdec_peak_bytes'] / 2 ** 20, marker='o', label='encoder-decoder')
    right.plot(frame['input_len'], frame['deconly_peak_bytes'] / 2 ** 20, marker='s', label='decoder-only')
    right.set_xscale('log', base=2)
    right.set_xlabel('input length')
    right.set_ylabel('peak inference memory (MiB)')
    right.legend()

    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
