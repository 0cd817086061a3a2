#!/usr/bin/env python3
"""
Cross-architecture knowledge distillation from a decoder-only teacher.

One distillation step:
  1. y comes from the student's own generation (or the teacher's, or the data)
  2. the teacher reads PAD^{n_e} x y PAD^{n_d}, the student reads x PAD^{n_e}
     in its encoder and BOS y PAD^{n_d} in its decoder
  3. teacher logits are sliced from position |x| + n_e - 1 so row i is the
     teacher's distribution over y_i
  4. loss = alpha * tau^2 * KL + (1 - alpha) * CE

A decoder-only student reads the same padded sequence as the teacher and is
sliced the same way.

Author: Matt Y
License: MIT
Version: 1.0.0
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from constants import BOS_ID, EOS_ID, KD_DEFAULTS, PAD_ID
from data_pipeline import collate_batch
from lab_errors import AlignmentError, CapacityError, DomainError
from model_zoo import deconly_forward, encdec_forward, generate
from tensor_autograd import (
    Graph,
    as_tensor,
    backward,
    cross_entropy_masked,
    getitem,
    kl_rows,
    no_grad,
    scale,
    softmax_rows,
)

logger = logging.getLogger(__name__)

KL_DIRECTIONS = ('reverse', 'forward')
GENERATION_SOURCES = ('student', 'teacher', 'dataset')
CE_TARGETS = ('reference', 'generated')


@dataclass(frozen=True)
class KDConfig:
    """
    Distillation hyperparameters.

    kl_direction 'reverse' is KL(p_s || p_t), 'forward' is KL(p_t || p_s).
    ce_target 'reference' trains the CE term on the dataset target, so
    alpha = 0 is plain sequence-to-sequence learning; 'generated' trains it
    on the generated y.
    """

    temperature: float = KD_DEFAULTS['temperature']
    alpha: float = KD_DEFAULTS['alpha']
    kl_direction: str = KD_DEFAULTS['kl_direction']
    generation_source: str = KD_DEFAULTS['generation_source']
    max_gen_len: int = KD_DEFAULTS['max_gen_len']
    sample_temperature: float = KD_DEFAULTS['sample_temperature']
    ce_target: str = KD_DEFAULTS['ce_target']

    def __post_init__(self):
        if not self.temperature > 0:
            raise DomainError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.alpha <= 1.0:
            raise DomainError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.kl_direction not in KL_DIRECTIONS:
            raise DomainError(f"kl_direction must be one of {KL_DIRECTIONS}")
        if self.generation_source not in GENERATION_SOURCES:
            raise DomainError(f"generation_source must be one of {GENERATION_SOURCES}")
        if self.ce_target not in CE_TARGETS:
            raise DomainError(f"ce_target must be one of {CE_TARGETS}")
        if self.max_gen_len < 1:
            raise DomainError(f"max_gen_len must be >= 1, got {self.max_gen_len}")


def ablation_configs(base, alphas=(0.0, 0.25, 0.5, 0.75, 1.0), directions=KL_DIRECTIONS,
                     sources=('student', 'teacher')):
    """KDConfigs for the alpha / KL direction / generation source ablation."""
    return [replace(base, alpha=a, kl_direction=d, generation_source=s)
            for s in sources for d in directions for a in alphas]


# ============================================================================
# Alignment
# ============================================================================

@dataclass
class AlignedKDBatch:
    """Padded teacher/student sequences and offsets for one example."""

    teacher_input: list
    teacher_mask: list
    student_enc_input: list
    student_dec_input: list
    x_len: int
    y_len: int
    n_e: int
    n_d: int
    teacher_slice_start: int
    loss_mask: list = field(default_factory=list)

    @property
    def y(self):
        return self.student_dec_input[1:1 + self.y_len]


def build_kd_batch(x, y, enc_len, dec_len, teacher_len):
    """Lay out one (x, y) pair for teacher and student."""
    x, y = [int(t) for t in x], [int(t) for t in y]
    x_len, y_len = len(x), len(y)
    if x_len < 1 or y_len < 1:
        raise DomainError("x and y must be non-empty")
    if x_len > enc_len:
        raise CapacityError(f"|x|={x_len} exceeds enc_len={enc_len}", cap_name="enc_len", offending=x_len)
    if y_len > dec_len:
        raise CapacityError(f"|y|={y_len} exceeds dec_len={dec_len}", cap_name="dec_len", offending=y_len)
    n_e, n_d = enc_len - x_len, dec_len - y_len
    if x_len + y_len + n_e + n_d != teacher_len:
        raise CapacityError(f"enc_len + dec_len = {enc_len + dec_len} != teacher_len={teacher_len}",
                            cap_name="teacher_len", offending=enc_len + dec_len)

    return AlignedKDBatch(
        teacher_input=[PAD_ID] * n_e + x + y + [PAD_ID] * n_d,
        teacher_mask=[0] * n_e + [1] * (x_len + y_len) + [0] * n_d,
        student_enc_input=x + [PAD_ID] * n_e,
        student_dec_input=[BOS_ID] + y + [PAD_ID] * n_d,
        x_len=x_len,
        y_len=y_len,
        n_e=n_e,
        n_d=n_d,
        teacher_slice_start=x_len + n_e - 1,
        loss_mask=[1] * y_len,
    )


def align_teacher_logits(teacher_logits, batch):
    """Rows [start, start + y_len) of the teacher logits, detached."""
    data = teacher_logits.data if hasattr(teacher_logits, 'data') else np.asarray(teacher_logits)
    if data.shape[0] != len(batch.teacher_input):
        raise AlignmentError(f"teacher logits have {data.shape[0]} rows, "
                             f"expected teacher_len={len(batch.teacher_input)}")
    start, stop = batch.teacher_slice_start, batch.teacher_slice_start + batch.y_len
    if start < 0 or stop > data.shape[0]:
        raise AlignmentError(f"teacher slice [{start}, {stop}) outside {data.shape[0]} rows")
    return as_tensor(data[start:stop].copy())


@dataclass
class KDArrays:
    """A list of AlignedKDBatch stacked into arrays of equal width."""

    teacher_ids: np.ndarray
    teacher_mask: np.ndarray
    enc_ids: np.ndarray
    enc_mask: np.ndarray
    dec_ids: np.ndarray
    dec_mask: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray
    slice_start: int

    @property
    def dec_len(self):
        return self.targets.shape[1]

    @property
    def n_target_tokens(self):
        return int(self.loss_mask.sum())


def stack_kd_batches(batches):
    """Stack aligned examples sharing enc_len/dec_len; decoder rows drop the final slot."""
    widths = {(b.x_len + b.n_e, b.y_len + b.n_d) for b in batches}
    if len(widths) != 1:
        raise AlignmentError(f"aligned examples disagree on enc_len/dec_len: {sorted(widths)}")
    dec_len = batches[0].y_len + batches[0].n_d
    teacher_ids = np.array([b.teacher_input for b in batches], dtype=np.int64)
    enc_ids = np.array([b.student_enc_input for b in batches], dtype=np.int64)
    dec_full = np.array([b.student_dec_input for b in batches], dtype=np.int64)
    targets = np.full((len(batches), dec_len), PAD_ID, dtype=np.int64)
    loss_mask = np.zeros((len(batches), dec_len), dtype=np.int64)
    for row, b in enumerate(batches):
        targets[row, :b.y_len] = b.y
        loss_mask[row, :b.y_len] = 1
    dec_ids = dec_full[:, :dec_len]
    # masks come from lengths; a generated token equal to PAD_ID is still real
    x_lens = np.array([b.x_len for b in batches])[:, None]
    y_lens = np.array([b.y_len for b in batches])[:, None]
    return KDArrays(
        teacher_ids=teacher_ids,
        teacher_mask=np.array([b.teacher_mask for b in batches], dtype=bool),
        enc_ids=enc_ids,
        enc_mask=np.arange(enc_ids.shape[1])[None, :] < x_lens,
        dec_ids=dec_ids,
        dec_mask=np.arange(dec_len)[None, :] <= y_lens,
        targets=targets,
        loss_mask=loss_mask,
        slice_start=batches[0].teacher_slice_start,
    )


def _slice_rows(logits, start, length):
    return getitem(logits, (slice(None), slice(start, start + length)))


def student_logits_for(student, arrays):
    """Student logits [B, dec_len, V] aligned with ``arrays.targets``."""
    if student.config.is_encoder_decoder:
        return encdec_forward(student, arrays.enc_ids, arrays.enc_mask, arrays.dec_ids, arrays.dec_mask)
    logits = deconly_forward(student, arrays.teacher_ids, arrays.teacher_mask)
    return _slice_rows(logits, arrays.slice_start, arrays.dec_len)


def teacher_logits_for(teacher, arrays):
    """Detached teacher logits [B, dec_len, V] aligned with ``arrays.targets``."""
    with no_grad():
        logits = deconly_forward(teacher, arrays.teacher_ids, arrays.teacher_mask)
    return as_tensor(logits.data[:, arrays.slice_start:arrays.slice_start + arrays.dec_len].copy())


def seq2seq_logits(model, batch):
    """Logits [B, dec_len, V] aligned with a Seq2SeqBatch's targets, either architecture."""
    if model.config.is_encoder_decoder:
        return encdec_forward(model, batch.enc_ids, batch.enc_mask, batch.dec_ids, batch.dec_mask)
    ids, mask, start = batch.concat_layout()
    return _slice_rows(deconly_forward(model, ids, mask), start, batch.dec_len)


def seq2seq_loss(model, batch):
    """Masked CE of a Seq2SeqBatch under ``model``."""
    return cross_entropy_masked(seq2seq_logits(model, batch), batch.targets, batch.loss_mask)


# ============================================================================
# Loss
# ============================================================================

def kd_divergence(teacher_logits_aligned, student_logits, cfg, loss_mask):
    """Temperature-softened KL between teacher and student, masked mean over rows."""
    p_s = softmax_rows(student_logits, cfg.temperature)
    p_t = softmax_rows(as_tensor(teacher_logits_aligned.data), cfg.temperature)
    if cfg.kl_direction == 'reverse':
        return kl_rows(p_s, p_t, loss_mask)
    return kl_rows(p_t, p_s, loss_mask)


def kd_loss(teacher_logits_aligned, student_logits, y, cfg, loss_mask):
    """
    alpha * tau^2 * KL + (1 - alpha) * CE(y, student logits at tau = 1).

    alpha == 0 returns the CE alone and alpha == 1 the KD term alone.
    """
    if teacher_logits_aligned.shape != student_logits.shape:
        raise DomainError(f"teacher {teacher_logits_aligned.shape} and student "
                          f"{student_logits.shape} logits differ in shape")
    if cfg.alpha == 0.0:
        return cross_entropy_masked(student_logits, y, loss_mask)
    kd_term = scale(kd_divergence(teacher_logits_aligned, student_logits, cfg, loss_mask),
                    cfg.alpha * cfg.temperature ** 2)
    if cfg.alpha == 1.0:
        return kd_term
    return kd_term + scale(cross_entropy_masked(student_logits, y, loss_mask), 1.0 - cfg.alpha)


# ============================================================================
# Steps
# ============================================================================

def _sequence_for(example, teacher, student, cfg, rng):
    if cfg.generation_source == 'dataset':
        return example.y + [EOS_ID]
    source = student if cfg.generation_source == 'student' else teacher
    return generate(source, example.x, cfg.max_gen_len, EOS_ID,
                    temperature=cfg.sample_temperature, rng=rng)


def distill_loss(teacher, student, examples, cfg, enc_len, dec_len, rng=None):
    """
    Build the distillation loss for a micro-batch inside the active graph.

    Examples that overflow a cap are skipped with a warning.

    Returns:
        (loss Tensor or None when every example was skipped, target token count)
    """
    if cfg.alpha == 0.0:
        batch = collate_batch(examples, enc_len, dec_len)
        return seq2seq_loss(student, batch), batch.n_target_tokens

    if teacher.config.is_encoder_decoder:
        raise DomainError("the distillation teacher must be decoder_only")
    teacher_len = enc_len + dec_len
    if teacher_len > teacher.config.decoder_span:
        raise CapacityError(f"teacher_len {teacher_len} exceeds teacher span {teacher.config.decoder_span}",
                            cap_name="teacher_span", offending=teacher_len)
    rng = rng if rng is not None else np.random.default_rng(0)

    aligned, kept = [], []
    for i, ex in enumerate(examples):
        try:
            y = _sequence_for(ex, teacher, student, cfg, rng)[:dec_len]
            aligned.append(build_kd_batch(ex.x, y, enc_len, dec_len, teacher_len))
            kept.append(ex)
        except CapacityError as e:
            logger.warning("skipping distillation example %d: %s", i, e)
    if not aligned:
        return None, 0

    arrays = stack_kd_batches(aligned)
    teacher_aligned = teacher_logits_for(teacher, arrays)
    student_logits = student_logits_for(student, arrays)

    if cfg.ce_target == 'generated' or cfg.generation_source == 'dataset' or cfg.alpha == 1.0:
        loss = kd_loss(teacher_aligned, student_logits, arrays.targets, cfg, arrays.loss_mask)
        return loss, arrays.n_target_tokens

    kd_term = scale(kd_divergence(teacher_aligned, student_logits, cfg, arrays.loss_mask),
                    cfg.alpha * cfg.temperature ** 2)
    reference = collate_batch(kept, enc_len, dec_len)
    loss = kd_term + scale(seq2seq_loss(student, reference), 1.0 - cfg.alpha)
    return loss, arrays.n_target_tokens


def distill_step(teacher, student, x_batch, cfg, optimizer_state, lr, enc_len, dec_len, rng=None):
    """
    One full distillation update of ``student``.

    ``optimizer_state`` is the trainer's AdamW; the teacher only runs
    forward without recording.

    Returns:
        (loss value or None when nothing was trainable, student)
    """
    student.zero_grad()
    with Graph() as graph:
        loss, _ = distill_loss(teacher, student, x_batch, cfg, enc_len, dec_len, rng)
    if loss is None:
        return None, student
    backward(loss, graph)
    optimizer_state.step(lr)
    return loss.item(), student
