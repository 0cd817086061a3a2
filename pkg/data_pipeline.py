#!/usr/bin/env python3
"""
Byte-level tokenization, span corruption, synthetic tasks and batch collation.

Vocabulary layout: ids 0-255 are raw bytes, then PAD, BOS, EOS and 100
sentinel tokens S0..S99. Models use a vocabulary of at least 359 ids
(512 in the desk configs).

Author: Matt Y
License: MIT
Version: 1.0.0
"""

import logging
import os
from dataclasses import dataclass

import numpy as np

from constants import (
    BOS_ID,
    COMPRESS_STRIDE,
    EOS_ID,
    EXPAND_REPEATS,
    EXPAND_SEPARATOR,
    MAX_INPUT_TOKENS,
    MAX_OUTPUT_TOKENS,
    N_BYTE_TOKENS,
    N_SENTINELS,
    PAD_ID,
    SENTINEL_BASE_ID,
    SPAN_CORRUPTION,
    TASK_KINDS,
)
from lab_errors import CapacityError, ConfigError, DomainError

logger = logging.getLogger(__name__)

LETTERS = np.arange(ord('a'), ord('z') + 1)
SPAN_TAG = 'span'


# ============================================================================
# Tokenizer
# ============================================================================

def sentinel_id(i):
    if not 0 <= i < N_SENTINELS:
        raise DomainError(f"sentinel index {i} outside 0..{N_SENTINELS - 1}")
    return SENTINEL_BASE_ID + i


def is_sentinel(token):
    return SENTINEL_BASE_ID <= token < SENTINEL_BASE_ID + N_SENTINELS


def tokenize(text):
    """Bytes (or UTF-8 encoded str) to token ids."""
    if isinstance(text, str):
        text = text.encode('utf-8')
    return list(bytes(text))


def detokenize(ids, skip_special=False):
    """
    Token ids back to bytes.

    Special ids raise unless ``skip_special`` drops them.
    """
    out = bytearray()
    for token in ids:
        token = int(token)
        if 0 <= token < N_BYTE_TOKENS:
            out.append(token)
        elif not skip_special:
            raise DomainError(f"token {token} is not a byte token")
    return bytes(out)


def decode_text(ids):
    """Readable text for reports; specials dropped, invalid UTF-8 replaced."""
    return detokenize(ids, skip_special=True).decode('utf-8', errors='replace')


# ============================================================================
# Examples
# ============================================================================

@dataclass
class TaskExample:
    """One (input, target) pair with its task tag."""

    x: list
    y: list
    task_tag: str

    def __post_init__(self):
        self.x = [int(t) for t in self.x]
        self.y = [int(t) for t in self.y]
        if len(self.x) > MAX_INPUT_TOKENS:
            raise CapacityError(f"input length {len(self.x)} exceeds {MAX_INPUT_TOKENS}",
                                cap_name="max_input_tokens", offending=len(self.x))
        if len(self.y) > MAX_OUTPUT_TOKENS:
            raise CapacityError(f"target length {len(self.y)} exceeds {MAX_OUTPUT_TOKENS}",
                                cap_name="max_output_tokens", offending=len(self.y))


# ============================================================================
# Span corruption
# ============================================================================

def span_corrupt(tokens, noise_ratio=SPAN_CORRUPTION['noise_ratio'],
                 mean_span=SPAN_CORRUPTION['mean_span'], rng_seed=0):
    """
    Replace non-overlapping fixed-length spans with sentinels S0, S1, ...

    Span count is round(round(L * noise_ratio) / mean_span), at least one;
    spans never touch so every sentinel stands for exactly one span.

    Returns:
        (input ids, target ids) with target = S0 span0 S1 span1 ... EOS,
        or None (with a warning) when the sequence is too short
    """
    if not 0 < noise_ratio < 1:
        raise DomainError(f"noise_ratio must be in (0, 1), got {noise_ratio}")
    if mean_span < 1:
        raise DomainError(f"mean_span must be >= 1, got {mean_span}")
    tokens = [int(t) for t in tokens]
    length = len(tokens)
    if length < mean_span + 1:
        logger.warning("skipping sequence of length %d: too short for span length %d", length, mean_span)
        return None

    n_spans = max(1, int(round(round(length * noise_ratio) / mean_span)))
    n_spans = min(n_spans, N_SENTINELS)
    while n_spans > 1 and length - n_spans * mean_span < n_spans - 1:
        n_spans -= 1
    kept = length - n_spans * mean_span
    if kept < n_spans - 1 or kept < 1:
        logger.warning("skipping sequence of length %d: cannot place %d spans", length, n_spans)
        return None

    # Distribute the free kept tokens over n_spans + 1 gaps (inner gaps >= 1).
    rng = np.random.default_rng(rng_seed)
    free = kept - (n_spans - 1)
    bars = np.sort(rng.choice(free + n_spans, size=n_spans, replace=False))
    extra = np.diff(np.concatenate(([-1], bars, [free + n_spans]))) - 1
    gaps = extra + np.array([0] + [1] * (n_spans - 1) + [0])

    inputs, targets = [], []
    cursor = 0
    for i in range(n_spans):
        inputs.extend(tokens[cursor:cursor + gaps[i]])
        cursor += gaps[i]
        inputs.append(sentinel_id(i))
        targets.append(sentinel_id(i))
        targets.extend(tokens[cursor:cursor + mean_span])
        cursor += mean_span
    inputs.extend(tokens[cursor:])
    targets.append(EOS_ID)
    return inputs, targets


def reconstruct_spans(inputs, targets):
    """Undo span_corrupt: put each sentinel's span back into the input."""
    spans = {}
    current = None
    for token in targets:
        if token == EOS_ID:
            break
        if is_sentinel(token):
            current = token
            spans[current] = []
        elif current is not None:
            spans[current].append(token)
    out = []
    for token in inputs:
        if is_sentinel(token):
            out.extend(spans.get(token, []))
        else:
            out.append(token)
    return out


def corrupted_fraction(inputs, targets):
    """Share of original tokens that were masked."""
    n_sentinels = sum(1 for t in inputs if is_sentinel(t))
    masked = len(targets) - n_sentinels - 1
    return masked / (len(inputs) - n_sentinels + masked)


# ============================================================================
# Synthetic tasks
# ============================================================================

def task_target(kind, x):
    """Target sequence of a synthetic task for input ``x``."""
    x = list(x)
    if kind == 'copy':
        return list(x)
    if kind == 'reverse':
        return x[::-1]
    if kind == 'compress':
        return x[::COMPRESS_STRIDE]
    if kind == 'expand':
        out = []
        for i in range(EXPAND_REPEATS):
            if i:
                out.append(EXPAND_SEPARATOR)
            out.extend(x)
        return out
    raise DomainError(f"unknown task kind {kind!r}, expected one of {TASK_KINDS}")


def max_input_len(kind):
    """Longest input whose target still fits the output cap."""
    if kind in ('copy', 'reverse'):
        return MAX_OUTPUT_TOKENS
    if kind == 'compress':
        return MAX_INPUT_TOKENS
    if kind == 'expand':
        return (MAX_OUTPUT_TOKENS - (EXPAND_REPEATS - 1)) // EXPAND_REPEATS
    raise DomainError(f"unknown task kind {kind!r}, expected one of {TASK_KINDS}")


def make_synthetic_task(kind, n, rng_seed=0, min_len=4, max_len=32):
    """
    ``n`` random lowercase-letter examples of a synthetic task.

    Input lengths are uniform in [min_len, max_len], clipped to the caps.
    """
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    upper = min(max_len, max_input_len(kind))
    lower = max(1, min(min_len, upper))
    rng = np.random.default_rng(rng_seed)
    examples = []
    for _ in range(n):
        length = int(rng.integers(lower, upper + 1))
        x = rng.choice(LETTERS, size=length).tolist()
        examples.append(TaskExample(x, task_target(kind, x), kind))
    return examples


# ============================================================================
# Corpus ingestion
# ============================================================================

def read_corpus(path):
    """Newline-delimited UTF-8 documents; blank lines are skipped."""
    if not os.path.exists(path):
        raise ConfigError(f"Corpus file not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        return [line.rstrip('\n') for line in f if line.strip()]


def random_letter_documents(n, length, rng_seed=0):
    """Letter-soup documents with short repeated words, for corpus-free pretraining."""
    rng = np.random.default_rng(rng_seed)
    words = [''.join(chr(c) for c in rng.choice(LETTERS, size=int(rng.integers(2, 6))))
             for _ in range(64)]
    docs = []
    for _ in range(n):
        text = []
        while sum(len(w) + 1 for w in text) < length:
            text.append(words[int(rng.integers(len(words)))])
        docs.append(' '.join(text)[:length])
    return docs


def span_corruption_examples(documents, seq_len, noise_ratio=SPAN_CORRUPTION['noise_ratio'],
                             mean_span=SPAN_CORRUPTION['mean_span'], rng_seed=0):
    """Chunk tokenized documents into ``seq_len`` pieces and span-corrupt each."""
    examples = []
    index = 0
    for doc in documents:
        tokens = tokenize(doc)
        for start in range(0, len(tokens), seq_len):
            piece = tokens[start:start + seq_len]
            pair = span_corrupt(piece, noise_ratio, mean_span, rng_seed=(rng_seed, index))
            index += 1
            if pair is not None:
                examples.append(TaskExample(pair[0], pair[1], SPAN_TAG))
    return examples


# ============================================================================
# Record files
# ============================================================================

def _hex(ids):
    return ''.join(f"{t:04x}" for t in ids)


def _unhex(text):
    if len(text) % 4:
        raise DomainError(f"hex field length {len(text)} is not a multiple of 4")
    return [int(text[i:i + 4], 16) for i in range(0, len(text), 4)]


def write_records(path, examples):
    """One example per line: task_tag TAB hex(x) TAB hex(y), 4 hex digits per id."""
    with open(path, 'w', encoding='utf-8') as f:
        for ex in examples:
            f.write(f"{ex.task_tag}\t{_hex(ex.x)}\t{_hex(ex.y)}\n")


def read_records(path):
    if not os.path.exists(path):
        raise ConfigError(f"Record file not found: {path}")
    examples = []
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, 1):
            line = line.rstrip('\n')
            if not line:
                continue
            parts = line.split('\t')
            if len(parts) != 3:
                raise DomainError(f"{path}:{line_no}: expected 3 tab-separated fields")
            examples.append(TaskExample(_unhex(parts[1]), _unhex(parts[2]), parts[0]))
    return examples


# ============================================================================
# Collation
# ============================================================================

@dataclass
class Seq2SeqBatch:
    """
    Padded arrays for one batch.

    Encoder rows are x right-padded to enc_len. Decoder rows are
    BOS y EOS right-padded (truncated) to dec_len, targets are y EOS
    right-padded to dec_len and the loss mask covers y plus EOS.
    ``n_d`` counts the pads after y EOS in the target row.
    """

    enc_ids: np.ndarray
    enc_mask: np.ndarray
    dec_ids: np.ndarray
    dec_mask: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray
    n_e: np.ndarray
    n_d: np.ndarray

    @property
    def batch_size(self):
        return self.enc_ids.shape[0]

    @property
    def enc_len(self):
        return self.enc_ids.shape[1]

    @property
    def dec_len(self):
        return self.dec_ids.shape[1]

    @property
    def n_target_tokens(self):
        return int(self.loss_mask.sum())

    def concat_layout(self):
        """
        Single-sequence layout PAD^{n_e} x (y EOS) PAD for decoder-only models.

        Returns:
            (ids [B, enc_len + dec_len], mask, slice start enc_len - 1)
        """
        lengths = self.enc_mask.sum(axis=1)
        left = np.full_like(self.enc_ids, PAD_ID)
        left_mask = np.zeros_like(self.enc_mask)
        for row, n in enumerate(lengths):
            left[row, self.enc_len - n:] = self.enc_ids[row, :n]
            left_mask[row, self.enc_len - n:] = True
        ids = np.concatenate([left, self.targets], axis=1)
        mask = np.concatenate([left_mask, self.loss_mask.astype(bool)], axis=1)
        return ids, mask, self.enc_len - 1


def collate_batch(examples, enc_len, dec_len):
    """Pad a list of TaskExamples into a Seq2SeqBatch."""
    offending = [i for i, ex in enumerate(examples)
                 if len(ex.x) > enc_len or len(ex.y) + 1 > dec_len]
    if offending:
        raise CapacityError(
            f"examples {offending} do not fit enc_len={enc_len} / dec_len={dec_len} (|y| + EOS)",
            cap_name="enc_len/dec_len", offending=offending)

    batch = len(examples)
    enc_ids = np.full((batch, enc_len), PAD_ID, dtype=np.int64)
    dec_ids = np.full((batch, dec_len), PAD_ID, dtype=np.int64)
    targets = np.full((batch, dec_len), PAD_ID, dtype=np.int64)
    loss_mask = np.zeros((batch, dec_len), dtype=np.int64)
    n_e = np.zeros(batch, dtype=np.int64)
    n_d = np.zeros(batch, dtype=np.int64)
    for row, ex in enumerate(examples):
        enc_ids[row, :len(ex.x)] = ex.x
        target = ex.y + [EOS_ID]
        decoder_row = ([BOS_ID] + target)[:dec_len]
        dec_ids[row, :len(decoder_row)] = decoder_row
        targets[row, :len(target)] = target
        loss_mask[row, :len(target)] = 1
        n_e[row] = enc_len - len(ex.x)
        n_d[row] = dec_len - len(target)
    return Seq2SeqBatch(enc_ids, enc_ids != PAD_ID, dec_ids, dec_ids != PAD_ID,
                        targets, loss_mask, n_e, n_d)
