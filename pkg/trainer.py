#!/usr/bin/env python3
"""
Optimization loop for span-corruption pretraining, seq2seq fine-tuning and
distillation, with a warmup-cosine schedule, AdamW and checkpoint files.

Batch order is a pure function of (seed, step): examples are drawn from a
seeded permutation per epoch, so a resumed run sees the same batches as an
uninterrupted one.

Author: Matt Y
License: MIT
Version: 1.0.0
"""

import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from constants import CHECKPOINT_DTYPE, CHECKPOINT_MAGIC, METRICS_COLUMNS, TRAIN_DEFAULTS
from data_pipeline import collate_batch
from distillation import distill_loss, seq2seq_loss
from lab_errors import CheckpointError, ConfigError, DomainError, NonFiniteError
from model_zoo import Model, ModelConfig, parameter_shapes
from tensor_autograd import Graph, Tensor, backward, get_default_dtype, scale
from tqdm_utils import close_progress_bar, create_progress_bar, update_progress_bar

logger = logging.getLogger(__name__)

OBJECTIVES = ('span_corruption', 'seq2seq', 'kd')
SCHEDULES = ('warmup_cosine',)


# ============================================================================
# Configuration and schedule
# ============================================================================

def resolve_warmup(warmup_steps, total_steps):
    """'auto' means 2000 steps, or the desk warmup of 100 for runs under 5000 steps."""
    if warmup_steps == 'auto':
        if total_steps < TRAIN_DEFAULTS['desk_warmup_threshold']:
            return min(TRAIN_DEFAULTS['desk_warmup_steps'], max(0, total_steps - 1))
        return TRAIN_DEFAULTS['warmup_steps']
    return int(warmup_steps)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings for one run."""

    peak_lr: float = TRAIN_DEFAULTS['peak_lr']
    warmup_steps: int = TRAIN_DEFAULTS['warmup_steps']
    total_steps: int = 10000
    schedule: str = 'warmup_cosine'
    batch_size: int = 8
    grad_accum_steps: int = 1
    seed: int = 0
    objective: str = 'seq2seq'
    enc_len: int = 64
    dec_len: int = 64
    weight_decay: float = TRAIN_DEFAULTS['weight_decay']
    beta1: float = TRAIN_DEFAULTS['beta1']
    beta2: float = TRAIN_DEFAULTS['beta2']
    adam_eps: float = TRAIN_DEFAULTS['adam_eps']

    def __post_init__(self):
        object.__setattr__(self, 'warmup_steps', resolve_warmup(self.warmup_steps, self.total_steps))
        problems = []
        if self.total_steps < 1:
            problems.append(f"total_steps must be >= 1, got {self.total_steps}")
        if not 0 <= self.warmup_steps < self.total_steps:
            problems.append(f"warmup_steps ({self.warmup_steps}) must be < total_steps ({self.total_steps})")
        if self.schedule not in SCHEDULES:
            problems.append(f"schedule must be one of {SCHEDULES}")
        if self.objective not in OBJECTIVES:
            problems.append(f"objective must be one of {OBJECTIVES}")
        if self.batch_size < 1 or self.grad_accum_steps < 1:
            problems.append("batch_size and grad_accum_steps must be >= 1")
        if not self.peak_lr > 0:
            problems.append(f"peak_lr must be > 0, got {self.peak_lr}")
        if problems:
            raise ConfigError("invalid train config: " + "; ".join(problems))

    @property
    def effective_batch(self):
        return self.batch_size * self.grad_accum_steps


def lr_at(step, cfg):
    """Linear warmup 0 -> peak, then cosine decay to 0 at total_steps (0 beyond)."""
    if step < 0:
        raise DomainError(f"step must be >= 0, got {step}")
    if step > cfg.total_steps:
        return 0.0
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ============================================================================
# Optimizer
# ============================================================================

@dataclass
class AdamState:
    """First/second moments per parameter name and the update counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = TRAIN_DEFAULTS['beta1']
    beta2: float = TRAIN_DEFAULTS['beta2']
    eps: float = TRAIN_DEFAULTS['adam_eps']
    weight_decay: float = TRAIN_DEFAULTS['weight_decay']


def optimizer_step(params, grads, state, lr):
    """
    Decoupled weight decay Adam update, in place.

    Weight decay touches matrices only (ndim >= 2). A non-finite gradient
    aborts before any parameter changes.

    Args:
        params: name -> Tensor
        grads: name -> ndarray (or None to skip)
        state: AdamState
        lr: learning rate for this update
    """
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient in {name}")
    for name, g in grads.items():
        if g is not None and params[name].shape != g.shape:
            raise DomainError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")

    state.t += 1
    t = state.t
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        w = p.data
        if name not in state.m:
            state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        m, v = state.m[name], state.v[name]
        if state.weight_decay and w.ndim >= 2:
            w -= w.dtype.type(lr * state.weight_decay) * w
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        w -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(w.dtype, copy=False)
    return params, state


class AdamW:
    """Optimizer bound to a model's named parameters."""

    def __init__(self, model, beta1=TRAIN_DEFAULTS['beta1'], beta2=TRAIN_DEFAULTS['beta2'],
                 eps=TRAIN_DEFAULTS['adam_eps'], weight_decay=TRAIN_DEFAULTS['weight_decay']):
        self.model = model
        self.state = AdamState(beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)

    @classmethod
    def from_config(cls, model, cfg):
        return cls(model, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)

    def step(self, lr):
        grads = {name: t.grad for name, t in self.model.params.items()}
        optimizer_step(self.model.params, grads, self.state, lr)


# ============================================================================
# Checkpoints
# ============================================================================

def save_checkpoint(path, model, optimizer=None, step=0, extra=None):
    """
    Write a checkpoint: magic line, one-line JSON manifest, float32 LE payload.

    The payload holds every parameter, then the optimizer moments
    ('adam.m.<name>', 'adam.v.<name>') when an optimizer is given.
    """
    arrays = [(name, t.data) for name, t in model.params.items()]
    if optimizer is not None:
        for name in model.params:
            if name in optimizer.state.m:
                arrays.append((f"adam.m.{name}", optimizer.state.m[name]))
                arrays.append((f"adam.v.{name}", optimizer.state.v[name]))

    chunks, tensors, offset = [], [], 0
    for name, array in arrays:
        raw = np.ascontiguousarray(array, dtype=CHECKPOINT_DTYPE).tobytes()
        tensors.append({"name": name, "shape": list(array.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)

    manifest = {
        "model_config": model.config.to_dict(),
        "step": int(step),
        "optimizer": None if optimizer is None else {
            "t": optimizer.state.t, "beta1": optimizer.state.beta1, "beta2": optimizer.state.beta2,
            "eps": optimizer.state.eps, "weight_decay": optimizer.state.weight_decay},
        "tensors": tensors,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "extra": extra or {},
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write((CHECKPOINT_MAGIC + "\n").encode("ascii"))
        f.write((json.dumps(manifest, sort_keys=True) + "\n").encode("utf-8"))
        f.write(payload)
    return path


def read_checkpoint(path):
    """Validated (manifest, name -> float32 array) from a checkpoint file."""
    if not os.path.exists(path):
        raise CheckpointError(f"Checkpoint not found: {path}")
    with open(path, "rb") as f:
        magic = f.readline().decode("ascii", errors="replace").rstrip("\n")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
        try:
            manifest = json.loads(f.readline().decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise CheckpointError(f"{path}: unreadable manifest: {e}") from e
        payload = f.read()

    if len(payload) != manifest.get("payload_bytes"):
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, manifest says {manifest.get('payload_bytes')}")
    if hashlib.sha256(payload).hexdigest() != manifest.get("payload_sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch")

    arrays = {}
    for entry in manifest["tensors"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=CHECKPOINT_DTYPE).reshape(entry["shape"])
    return manifest, arrays


def load_checkpoint(path, with_optimizer=False):
    """
    Rebuild a model (and optionally its AdamW state) from a checkpoint.

    Returns:
        (model, optimizer or None, manifest)
    """
    manifest, arrays = read_checkpoint(path)
    try:
        config = ModelConfig.from_dict(manifest["model_config"])
    except Exception as e:
        raise CheckpointError(f"{path}: bad model config: {e}") from e

    dtype = get_default_dtype()
    params = {}
    for name, shape in parameter_shapes(config):
        if name not in arrays:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if tuple(arrays[name].shape) != tuple(shape):
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, config expects {shape}")
        params[name] = Tensor(arrays[name], requires_grad=True, name=name, dtype=dtype)
    model = Model(config, params)

    optimizer = None
    if with_optimizer and manifest.get("optimizer"):
        opt = manifest["optimizer"]
        optimizer = AdamW(model, opt["beta1"], opt["beta2"], opt["eps"], opt["weight_decay"])
        optimizer.state.t = opt["t"]
        for name in params:
            if f"adam.m.{name}" in arrays:
                optimizer.state.m[name] = arrays[f"adam.m.{name}"].astype(dtype)
                optimizer.state.v[name] = arrays[f"adam.v.{name}"].astype(dtype)
    return model, optimizer, manifest


# ============================================================================
# Training loop
# ============================================================================

def batch_indices(n_examples, effective_batch, step, seed):
    """Example indices for update ``step``; epochs are seeded permutations."""
    out = []
    permutations = {}
    for pos in range(step * effective_batch, (step + 1) * effective_batch):
        epoch, offset = divmod(pos, n_examples)
        if epoch not in permutations:
            permutations[epoch] = np.random.default_rng((seed, epoch)).permutation(n_examples)
        out.append(int(permutations[epoch][offset]))
    return out


@dataclass
class TrainResult:
    metrics: pd.DataFrame
    final_step: int
    final_loss: float
    optimizer: AdamW

    def loss_drop(self, window=10):
        """Relative drop between the first and last ``window``-step mean loss."""
        losses = self.metrics['loss'].to_numpy()
        start = losses[:window].mean()
        return float((start - losses[-window:].mean()) / start)


def _micro_loss(model, micro, cfg, teacher, kd_cfg, rng):
    if cfg.objective == 'kd':
        return distill_loss(teacher, model, micro, kd_cfg, cfg.enc_len, cfg.dec_len, rng)
    batch = collate_batch(micro, cfg.enc_len, cfg.dec_len)
    return seq2seq_loss(model, batch), batch.n_target_tokens


def train(model, dataset, cfg, teacher=None, kd_cfg=None, optimizer=None, start_step=0,
          max_steps=None, progress=True):
    """
    Run updates ``start_step + 1`` .. ``total_steps`` (or ``max_steps`` of them).

    Each update draws ``batch_size * grad_accum_steps`` examples; micro-batch
    losses are weighted by their share of target tokens so accumulation
    matches one large batch.

    Returns:
        TrainResult with per-step records (step, loss, lr, tokens_per_s)
    """
    if cfg.objective == 'kd' and (kd_cfg is None or (teacher is None and kd_cfg.alpha > 0)):
        raise ConfigError("the kd objective needs a KDConfig, and a teacher model when alpha > 0")
    usable = [ex for ex in dataset if len(ex.x) <= cfg.enc_len and len(ex.y) + 1 <= cfg.dec_len]
    if len(usable) < len(dataset):
        logger.warning("dropping %d examples that exceed enc_len=%d / dec_len=%d",
                       len(dataset) - len(usable), cfg.enc_len, cfg.dec_len)
    if not usable:
        raise DomainError("no training example fits the configured lengths")
    optimizer = optimizer or AdamW.from_config(model, cfg)

    stop = cfg.total_steps if max_steps is None else min(cfg.total_steps, start_step + max_steps)
    records = []
    bar = create_progress_bar(stop - start_step, desc=f"{cfg.objective}", unit="step") if progress else None
    try:
        for step in range(start_step, stop):
            started = time.perf_counter()
            indices = batch_indices(len(usable), cfg.effective_batch, step, cfg.seed)
            examples = [usable[i] for i in indices]
            model.zero_grad()

            parts = []
            for k in range(cfg.grad_accum_steps):
                micro = examples[k * cfg.batch_size:(k + 1) * cfg.batch_size]
                rng = np.random.default_rng((cfg.seed, step, k))
                graph = Graph()
                with graph:
                    loss, count = _micro_loss(model, micro, cfg, teacher, kd_cfg, rng)
                if loss is not None and count > 0:
                    parts.append((graph, loss, count))
            if not parts:
                logger.warning("step %d: every example was skipped, no update", step + 1)
                continue

            total = sum(count for _, _, count in parts)
            step_loss = 0.0
            for graph, loss, count in parts:
                with graph:
                    weighted = scale(loss, count / total)
                backward(weighted, graph)
                step_loss += weighted.item()

            lr = lr_at(step + 1, cfg)
            optimizer.step(lr)
            elapsed = time.perf_counter() - started
            tokens = sum(len(ex.x) + len(ex.y) + 1 for ex in examples)
            records.append({'step': step + 1, 'loss': step_loss, 'lr': lr,
                            'tokens_per_s': tokens / elapsed if elapsed > 0 else 0.0})
            update_progress_bar(bar, loss=f"{step_loss:.4f}")
    finally:
        close_progress_bar(bar)

    metrics = pd.DataFrame(records, columns=METRICS_COLUMNS)
    final_loss = float(metrics['loss'].iloc[-1]) if len(metrics) else float('nan')
    final_step = int(metrics['step'].iloc[-1]) if len(metrics) else start_step
    return TrainResult(metrics, final_step, final_loss, optimizer)
