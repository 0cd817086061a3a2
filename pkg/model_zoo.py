#!/usr/bin/env python3
"""
Encoder-decoder and decoder-only transformers on the tensor_autograd core.

Both architectures share one block design: pre-layer-norm, grouped-query
self-attention with rotary position embeddings (NTK-scaled base beyond the
trained span), a GELU feed-forward layer and tied input/output embeddings.
Decoder layers of the encoder-decoder add a pre-LN cross-attention sublayer
over the encoder output.

Inference state lives outside the model: ``encode_once`` builds an
immutable EncodedContext (encoder output plus per-layer cross K/V) and a
KVCache grows by one entry per self-attention layer per fed token.

Author: Matt Y
License: MIT
Version: 1.0.0
"""

import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from constants import (
    BOS_ID,
    DESK_MATCHED_DECODER_LAYERS,
    DESK_MODEL,
    DESK_SPLITS,
    EOS_ID,
    PAD_ID,
    PROFILE_DEFAULTS,
    TOY_MODEL,
)
from lab_errors import CapacityError, DomainError, ModelConfigError, ShapeError, UnsupportedOperationError
from tensor_autograd import (
    Tensor,
    as_tensor,
    embedding,
    gelu,
    get_default_dtype,
    getitem,
    index_select,
    layer_norm,
    matmul,
    no_grad,
    reshape,
    rotate_pairs,
    scale,
    softmax_rows,
    transpose,
)

logger = logging.getLogger(__name__)

KINDS = ("encoder_decoder", "decoder_only")
MASK_MODES = ("bidirectional", "causal", "cross")
INIT_STD = 0.02


# ============================================================================
# Configuration
# ============================================================================

@dataclass(frozen=True)
class ModelConfig:
    """Full architectural description; both architectures build from it."""

    kind: str
    n_enc_layers: int
    n_dec_layers: int
    d_model: int
    n_heads: int
    n_kv_heads: int
    d_ff: int
    vocab_size: int
    rope_base: float = 10000.0
    ntk_train_len: int = 4096
    max_enc_len: int = 1024
    max_dec_len: int = 256

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ModelConfigError(problems)

    def violations(self):
        """Every violated invariant, as readable strings."""
        problems = []
        if self.kind not in KINDS:
            problems.append(f"kind must be one of {KINDS}, got {self.kind!r}")
        for name in ("n_dec_layers", "d_model", "n_heads", "n_kv_heads", "d_ff", "vocab_size",
                     "ntk_train_len", "max_enc_len", "max_dec_len"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                problems.append(f"{name} must be a positive int, got {value!r}")
        if not isinstance(self.n_enc_layers, (int, np.integer)) or self.n_enc_layers < 0:
            problems.append(f"n_enc_layers must be a nonnegative int, got {self.n_enc_layers!r}")
        if not self.rope_base > 0:
            problems.append(f"rope_base must be positive, got {self.rope_base!r}")
        if problems:
            return problems

        if self.kind == "decoder_only" and self.n_enc_layers != 0:
            problems.append("decoder_only requires n_enc_layers == 0")
        if self.kind == "encoder_decoder" and self.n_enc_layers == 0:
            problems.append("encoder_decoder requires n_enc_layers > 0")
        if self.d_model % self.n_heads:
            problems.append(f"d_model ({self.d_model}) must be a multiple of n_heads ({self.n_heads})")
        if self.n_heads % self.n_kv_heads:
            problems.append(f"n_heads ({self.n_heads}) must be divisible by n_kv_heads ({self.n_kv_heads})")
        if not self.d_model % self.n_heads:
            d_head = self.d_model // self.n_heads
            if d_head % 2 or d_head < 4:
                problems.append(f"d_head ({d_head}) must be even and at least 4 for rotary embeddings")
        return problems

    @property
    def d_head(self):
        return self.d_model // self.n_heads

    @property
    def kv_dim(self):
        return self.n_kv_heads * self.d_head

    @property
    def group_size(self):
        return self.n_heads // self.n_kv_heads

    @property
    def is_encoder_decoder(self):
        return self.kind == "encoder_decoder"

    @property
    def decoder_span(self):
        """Positions one decoder sequence may occupy (input + output for decoder-only)."""
        if self.is_encoder_decoder:
            return self.max_dec_len
        return self.max_enc_len + self.max_dec_len

    @property
    def n_layers(self):
        return self.n_enc_layers + self.n_dec_layers

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ModelConfigError([f"unknown model field {name!r}" for name in unknown])
        return cls(**data)


def desk_config(kind="encoder_decoder", split="2/3-1/3", n_dec_layers=None, **overrides):
    """
    Desk-scale reference config (d_model=256, 8 heads, 2 kv heads, vocab 512).

    For decoder-only the depth defaults to the layer count matched to ``split``.
    """
    base = dict(DESK_MODEL)
    base.update(overrides)
    if kind == "encoder_decoder":
        n_enc, n_dec = DESK_SPLITS[split]
        return ModelConfig(kind=kind, n_enc_layers=n_enc, n_dec_layers=n_dec_layers or n_dec, **base)
    layers = n_dec_layers or DESK_MATCHED_DECODER_LAYERS[split]
    return ModelConfig(kind=kind, n_enc_layers=0, n_dec_layers=layers, **base)


def toy_config(kind="encoder_decoder", n_enc_layers=1, n_dec_layers=1, **overrides):
    """Small config for tests and toy training runs."""
    base = dict(TOY_MODEL)
    base.update(overrides)
    if kind == "decoder_only":
        n_enc_layers = 0
    return ModelConfig(kind=kind, n_enc_layers=n_enc_layers, n_dec_layers=n_dec_layers, **base)


def matched_pair(split, **overrides):
    """(encoder-decoder, parameter-matched decoder-only) desk configs for a split."""
    return (desk_config("encoder_decoder", split, **overrides),
            desk_config("decoder_only", split, **overrides))


# ============================================================================
# Parameter counting
# ============================================================================

def count_params(config):
    """Exact parameter count from the closed form (no linear biases, tied embeddings)."""
    d, kv, ff = config.d_model, config.kv_dim, config.d_ff
    attention = 2 * d * d + 2 * d * kv
    feed_forward = 2 * d * ff
    norm = 2 * d

    total = config.vocab_size * d
    if config.is_encoder_decoder:
        total += config.n_enc_layers * (attention + feed_forward + 2 * norm) + norm
        total += config.n_dec_layers * (2 * attention + feed_forward + 3 * norm) + norm
    else:
        total += config.n_dec_layers * (attention + feed_forward + 2 * norm) + norm
    return total


def match_decoder_only(config, max_layers=128):
    """
    Decoder-only config whose parameter count is closest to ``config``.

    Returns:
        (decoder_only_config, relative difference against ``config``)
    """
    target = count_params(config)
    best = None
    for layers in range(1, max_layers + 1):
        candidate = ModelConfig(**{**config.to_dict(), "kind": "decoder_only",
                                   "n_enc_layers": 0, "n_dec_layers": layers})
        diff = (count_params(candidate) - target) / target
        if best is None or abs(diff) < abs(best[1]):
            best = (candidate, diff)
    return best


# ============================================================================
# Model
# ============================================================================

class Model:
    """Named parameter collection plus the config it was built from."""

    def __init__(self, config, params):
        self.config = config
        self.params = params
        self.encoder_calls = 0

    @property
    def kind(self):
        return self.config.kind

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def __getitem__(self, name):
        return self.params[name]

    def named_parameters(self):
        return list(self.params.items())

    def parameters(self):
        return list(self.params.values())

    def n_params(self):
        return int(sum(t.size for t in self.params.values()))

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def __repr__(self):
        c = self.config
        return f"Model({c.kind}, enc={c.n_enc_layers}, dec={c.n_dec_layers}, params={self.n_params():,})"


def parameter_shapes(config):
    """(name, shape) of every parameter, in build order."""
    d, kv, ff = config.d_model, config.kv_dim, config.d_ff
    shapes = [("embed", (config.vocab_size, d))]

    def block(prefix, cross):
        out = [(f"{prefix}.ln1.gamma", (d,)), (f"{prefix}.ln1.beta", (d,)),
               (f"{prefix}.attn.wq", (d, d)), (f"{prefix}.attn.wk", (d, kv)),
               (f"{prefix}.attn.wv", (d, kv)), (f"{prefix}.attn.wo", (d, d))]
        if cross:
            out += [(f"{prefix}.ln_cross.gamma", (d,)), (f"{prefix}.ln_cross.beta", (d,)),
                    (f"{prefix}.cross.wq", (d, d)), (f"{prefix}.cross.wk", (d, kv)),
                    (f"{prefix}.cross.wv", (d, kv)), (f"{prefix}.cross.wo", (d, d))]
        out += [(f"{prefix}.ln2.gamma", (d,)), (f"{prefix}.ln2.beta", (d,)),
                (f"{prefix}.ffn.w1", (d, ff)), (f"{prefix}.ffn.w2", (ff, d))]
        return out

    for i in range(config.n_enc_layers):
        shapes += block(f"enc.{i}", cross=False)
    if config.n_enc_layers:
        shapes += [("enc.final_ln.gamma", (d,)), ("enc.final_ln.beta", (d,))]
    for i in range(config.n_dec_layers):
        shapes += block(f"dec.{i}", cross=config.is_encoder_decoder)
    shapes += [("dec.final_ln.gamma", (d,)), ("dec.final_ln.beta", (d,))]
    return shapes


def build_model(config, seed):
    """
    Deterministically initialize a model from (config, seed).

    Weights ~ N(0, 0.02); residual output projections are scaled down by
    sqrt(2 * n_layers). Layer-norm gains start at 1, shifts at 0.
    """
    if not isinstance(config, ModelConfig):
        config = ModelConfig.from_dict(config)
    rng = np.random.default_rng(seed)
    dtype = get_default_dtype()
    residual_std = INIT_STD / math.sqrt(2 * max(1, config.n_layers))

    params = {}
    for name, shape in parameter_shapes(config):
        if name.endswith(".gamma"):
            value = np.ones(shape)
        elif name.endswith(".beta"):
            value = np.zeros(shape)
        elif name.endswith(".wo") or name.endswith(".w2"):
            value = rng.normal(0.0, residual_std, size=shape)
        else:
            value = rng.normal(0.0, INIT_STD, size=shape)
        params[name] = Tensor(value, requires_grad=True, name=name, dtype=dtype)
    logger.debug("built %s with %d parameters", config.kind, count_params(config))
    return Model(config, params)


# ============================================================================
# Rotary embeddings
# ============================================================================

def ntk_base(base, d_head, ntk_scale_len, span):
    """Frequency base for sequences spanning ``span`` positions."""
    if span <= ntk_scale_len:
        return float(base)
    s = span / ntk_scale_len
    return float(base) * s ** (d_head / (d_head - 2))


def rope_angles(positions, d_head, base, ntk_scale_len, span=None):
    """Rotation angles [..., T, d_head/2] in double precision."""
    positions = np.asarray(positions, dtype=np.float64)
    if span is None:
        span = int(positions.max()) + 1 if positions.size else 1
    effective = ntk_base(base, d_head, ntk_scale_len, span)
    theta = effective ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    return positions[..., None] * theta


def rope_apply(q_or_k, positions, base, ntk_scale_len, span=None):
    """
    Rotate feature pairs (2i, 2i+1) of [..., T, heads, d_head] by pos * theta_i.

    ``span`` fixes the NTK decision; by default it is max(positions) + 1.
    """
    d_head = q_or_k.shape[-1]
    if d_head % 2:
        raise ShapeError(f"rotary embeddings need an even head dim, got {d_head}")
    angles = rope_angles(positions, d_head, base, ntk_scale_len, span)[..., None, :]
    return rotate_pairs(q_or_k, np.cos(angles), np.sin(angles))


def positions_from_mask(mask, start=None):
    """Position ids that number real tokens 0..n-1 and skip pads (pads get 0)."""
    mask = np.asarray(mask, dtype=bool)
    positions = np.cumsum(mask, axis=-1) - 1
    if start is not None:
        positions = positions + np.asarray(start)[..., None]
    return np.where(mask, positions, 0)


# ============================================================================
# Attention
# ============================================================================

def attention_mask(mask_mode, batch, n_queries, n_keys, key_mask=None, query_offset=0):
    """Boolean [B, 1, Tq, Tk] of allowed query/key pairs."""
    if mask_mode not in MASK_MODES:
        raise DomainError(f"unknown mask mode {mask_mode!r}")
    allowed = np.ones((batch, 1, n_queries, n_keys), dtype=bool)
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.shape != (batch, n_keys):
            raise ShapeError(f"key mask shape {key_mask.shape} != {(batch, n_keys)}")
        allowed &= key_mask[:, None, None, :]
    if mask_mode == "causal":
        slots = np.arange(n_queries)[:, None] + query_offset
        allowed &= (np.arange(n_keys)[None, :] <= slots)[None, None]
    return allowed


def attention(q_states, kv_states, mask_mode, config, key_mask=None, query_offset=0):
    """
    Scaled dot-product attention with grouped K/V heads.

    Args:
        q_states: Tensor [B, Tq, n_heads, d_head]
        kv_states: (keys, values), each Tensor [B, Tk, n_kv_heads, d_head]
        mask_mode: 'bidirectional', 'causal' or 'cross'
        config: ModelConfig
        key_mask: optional boolean [B, Tk], False for padding keys
        query_offset: slot of the first query (causal mode with a cache)

    Returns:
        Tensor [B, Tq, n_heads * d_head]
    """
    keys, values = kv_states
    batch, n_q, n_heads, d_head = q_states.shape
    if (n_heads, d_head) != (config.n_heads, config.d_head):
        raise ShapeError(f"query heads {q_states.shape} do not match config")
    if keys.shape != values.shape or keys.shape[0] != batch or keys.shape[2:] != (config.n_kv_heads, d_head):
        raise ShapeError(f"key/value shapes {keys.shape}, {values.shape} do not match queries {q_states.shape}")
    n_k = keys.shape[1]

    q = transpose(q_states, (0, 2, 1, 3))
    k = transpose(keys, (0, 2, 3, 1))
    v = transpose(values, (0, 2, 1, 3))
    if config.group_size > 1:
        head_to_group = np.arange(n_heads) // config.group_size
        k = index_select(k, 1, head_to_group)
        v = index_select(v, 1, head_to_group)

    scores = scale(matmul(q, k), 1.0 / math.sqrt(d_head))
    allowed = attention_mask(mask_mode, batch, n_q, n_k, key_mask, query_offset)
    probs = softmax_rows(scores, 1.0, allowed)
    context = transpose(matmul(probs, v), (0, 2, 1, 3))
    return reshape(context, (batch, n_q, n_heads * d_head))


def _split_heads(x, n_heads, d_head):
    return reshape(x, x.shape[:-1] + (n_heads, d_head))


def _norm(model, prefix, h):
    return layer_norm(h, model.params[prefix + ".gamma"], model.params[prefix + ".beta"])


def _feed_forward(model, prefix, h):
    p = model.params
    x = _norm(model, prefix + ".ln2", h)
    return h + matmul(gelu(matmul(x, p[prefix + ".ffn.w1"])), p[prefix + ".ffn.w2"])


def _self_attention(model, prefix, h, positions, mask_mode, key_mask, span, cache=None, layer=None):
    cfg, p = model.config, model.params
    x = _norm(model, prefix + ".ln1", h)
    q = _split_heads(matmul(x, p[prefix + ".attn.wq"]), cfg.n_heads, cfg.d_head)
    k = _split_heads(matmul(x, p[prefix + ".attn.wk"]), cfg.n_kv_heads, cfg.d_head)
    v = _split_heads(matmul(x, p[prefix + ".attn.wv"]), cfg.n_kv_heads, cfg.d_head)
    q = rope_apply(q, positions, cfg.rope_base, cfg.ntk_train_len, span)
    k = rope_apply(k, positions, cfg.rope_base, cfg.ntk_train_len, span)
    offset = 0
    if cache is not None:
        offset = cache.length
        k, v = cache.append(layer, k, v)
        key_mask = cache.key_mask_view()
    context = attention(q, (k, v), mask_mode, cfg, key_mask, offset)
    return h + matmul(context, p[prefix + ".attn.wo"])


def _cross_attention(model, prefix, h, cross_kv, input_mask):
    cfg, p = model.config, model.params
    x = _norm(model, prefix + ".ln_cross", h)
    q = _split_heads(matmul(x, p[prefix + ".cross.wq"]), cfg.n_heads, cfg.d_head)
    context = attention(q, cross_kv, "cross", cfg, input_mask)
    return h + matmul(context, p[prefix + ".cross.wo"])


def _lm_head(model, h):
    return matmul(h, transpose(model.params["embed"], (1, 0)))


def _as_batch(ids, mask=None):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if mask is None:
        mask = ids != PAD_ID
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = mask[None, :]
    if mask.shape != ids.shape:
        raise ShapeError(f"mask shape {mask.shape} != ids shape {ids.shape}")
    return ids, mask


# ============================================================================
# Inference state
# ============================================================================

@dataclass(frozen=True)
class EncodedContext:
    """Encoder output and precomputed cross-attention K/V for one input batch."""

    encoder_output: Tensor
    cross_kv: tuple
    input_mask: np.ndarray

    @property
    def input_len(self):
        return self.input_mask.shape[1]


class KVCache:
    """
    Per-layer self-attention keys/values, preallocated to ``capacity`` slots.

    Decoder-only caches span input and output positions; encoder-decoder
    decoder caches span output positions only.
    """

    def __init__(self, config, batch_size=1, capacity=None, dtype=None, rope_span=None):
        self.config = config
        self.batch_size = batch_size
        self.capacity = capacity or config.decoder_span
        # one NTK decision per sequence; a default-sized cache never scales
        self.rope_span = rope_span or capacity or min(config.decoder_span, config.ntk_train_len)
        dtype = dtype or get_default_dtype()
        slots = (batch_size, self.capacity, config.n_kv_heads, config.d_head)
        self.keys = [np.zeros(slots, dtype=dtype) for _ in range(config.n_dec_layers)]
        self.values = [np.zeros(slots, dtype=dtype) for _ in range(config.n_dec_layers)]
        self.layer_lengths = [0] * config.n_dec_layers
        self.mask = np.zeros((batch_size, self.capacity), dtype=bool)
        self.length = 0
        self.n_real = np.zeros(batch_size, dtype=np.int64)
        self._pending = 0

    def begin(self, new_mask):
        """Reserve slots for a block of tokens; returns their position ids."""
        n_new = new_mask.shape[1]
        if self.length + n_new > self.capacity:
            raise CapacityError(
                f"cache length {self.length + n_new} exceeds capacity={self.capacity}",
                cap_name="capacity", offending=self.length + n_new)
        self.mask[:, self.length:self.length + n_new] = new_mask
        self._pending = n_new
        return positions_from_mask(new_mask, start=self.n_real)

    def append(self, layer, k, v):
        start, stop = self.length, self.length + self._pending
        self.keys[layer][:, start:stop] = k.data
        self.values[layer][:, start:stop] = v.data
        self.layer_lengths[layer] = stop
        return as_tensor(self.keys[layer][:, :stop]), as_tensor(self.values[layer][:, :stop])

    def key_mask_view(self):
        return self.mask[:, :self.length + self._pending]

    def commit(self):
        self.n_real += self.mask[:, self.length:self.length + self._pending].sum(axis=1)
        self.length += self._pending
        self._pending = 0

    def rollback(self):
        """Drop a block that failed partway; the cache keeps its committed state."""
        self.mask[:, self.length:self.length + self._pending] = False
        self.layer_lengths = [min(n, self.length) for n in self.layer_lengths]
        self._pending = 0

    def __len__(self):
        return self.length

    def nbytes(self):
        """Bytes held by the filled part of the cache."""
        per_slot = sum(k[:, :1].nbytes + v[:, :1].nbytes for k, v in zip(self.keys, self.values))
        return per_slot * self.length


# ============================================================================
# Forward passes
# ============================================================================

def encoder_forward(model, ids, mask=None):
    """Encoder stack over [B, T] ids; returns final-layer representations [B, T, d]."""
    cfg = model.config
    if not cfg.is_encoder_decoder:
        raise UnsupportedOperationError("decoder_only models have no encoder")
    ids, mask = _as_batch(ids, mask)
    if ids.shape[1] > cfg.max_enc_len:
        raise CapacityError(f"input length {ids.shape[1]} exceeds max_enc_len={cfg.max_enc_len}",
                            cap_name="max_enc_len", offending=ids.shape[1])
    model.encoder_calls += 1
    positions = positions_from_mask(mask)
    h = embedding(model.params["embed"], ids)
    for i in range(cfg.n_enc_layers):
        prefix = f"enc.{i}"
        h = _self_attention(model, prefix, h, positions, "bidirectional", mask, None)
        h = _feed_forward(model, prefix, h)
    return _norm(model, "enc.final_ln", h)


def cross_kv_from(model, encoder_output):
    """Per decoder layer (keys, values) projected from the encoder output, no rotation."""
    cfg, p = model.config, model.params
    out = []
    for i in range(cfg.n_dec_layers):
        prefix = f"dec.{i}.cross"
        k = _split_heads(matmul(encoder_output, p[prefix + ".wk"]), cfg.n_kv_heads, cfg.d_head)
        v = _split_heads(matmul(encoder_output, p[prefix + ".wv"]), cfg.n_kv_heads, cfg.d_head)
        out.append((k, v))
    return tuple(out)


def decoder_forward(model, ids, mask=None, context=None, cache=None, logits_for="all"):
    """
    Decoder stack over a block of tokens.

    Without a cache the block is the full sequence (teacher forcing). With a
    cache the block is appended to it and attends to everything cached.

    Args:
        logits_for: 'all' positions, only the 'last' one, or 'none'
    """
    cfg = model.config
    ids, mask = _as_batch(ids, mask)
    if cfg.is_encoder_decoder and context is None:
        raise DomainError("encoder_decoder decoding needs an EncodedContext")
    if not cfg.is_encoder_decoder and context is not None:
        raise DomainError("decoder_only decoding takes no EncodedContext")

    if cache is None:
        if ids.shape[1] > cfg.decoder_span:
            raise CapacityError(f"decoder length {ids.shape[1]} exceeds span {cfg.decoder_span}",
                                cap_name="decoder_span", offending=ids.shape[1])
        positions = positions_from_mask(mask)
    else:
        positions = cache.begin(mask)
    span = cache.rope_span if cache is not None else None

    try:
        h = embedding(model.params["embed"], ids)
        for i in range(cfg.n_dec_layers):
            prefix = f"dec.{i}"
            h = _self_attention(model, prefix, h, positions, "causal", mask, span, cache=cache, layer=i)
            if cfg.is_encoder_decoder:
                h = _cross_attention(model, prefix, h, context.cross_kv[i], context.input_mask)
            h = _feed_forward(model, prefix, h)
    except BaseException:
        if cache is not None:
            cache.rollback()
        raise
    if cache is not None:
        cache.commit()
    if logits_for == "none":
        return None
    if logits_for == "last":
        h = getitem(h, (slice(None), slice(h.shape[1] - 1, None)))
    return _lm_head(model, _norm(model, "dec.final_ln", h))


def encdec_forward(model, enc_ids, enc_mask, dec_ids, dec_mask):
    """Teacher-forced encoder-decoder forward; logits [B, T_dec, V]."""
    encoded = encoder_forward(model, enc_ids, enc_mask)
    _, enc_mask = _as_batch(enc_ids, enc_mask)
    context = EncodedContext(encoded, cross_kv_from(model, encoded), enc_mask)
    return decoder_forward(model, dec_ids, dec_mask, context=context)


def deconly_forward(model, ids, mask=None):
    """Teacher-forced decoder-only forward over a full sequence; logits [B, T, V]."""
    if model.config.is_encoder_decoder:
        raise UnsupportedOperationError("deconly_forward needs a decoder_only model")
    return decoder_forward(model, ids, mask)


def encode_once(model, x, pad_mask=None):
    """
    Run the encoder once and precompute cross-attention K/V per decoder layer.

    Decode steps afterwards perform no encoder work.
    """
    if not model.config.is_encoder_decoder:
        raise UnsupportedOperationError("encode_once is only defined for encoder_decoder models")
    ids, mask = _as_batch(x, pad_mask)
    with no_grad():
        encoded = encoder_forward(model, ids, mask)
        cross_kv = cross_kv_from(model, encoded)
    mask = mask.copy()
    mask.setflags(write=False)
    for t in [encoded] + [t for pair in cross_kv for t in pair]:
        t.data.setflags(write=False)
    return EncodedContext(encoded, cross_kv, mask)


def decode_step(model, context, cache, next_token):
    """
    Feed one token per batch row through the cached path.

    Returns:
        Next-token logits, Tensor [V] for a single row, else [B, V]
    """
    tokens = np.asarray(next_token, dtype=np.int64).reshape(-1, 1)
    with no_grad():
        logits = decoder_forward(model, tokens, np.ones_like(tokens, dtype=bool),
                                 context=context, cache=cache, logits_for="last")
    flat = reshape(logits, (tokens.shape[0], model.config.vocab_size))
    return flat[0] if tokens.shape[0] == 1 else flat


def prefill(model, cache, x, pad_mask=None, chunk=None):
    """
    Feed a decoder-only input through the cached path in chunks.

    Only the final position's logits are computed.
    """
    if model.config.is_encoder_decoder:
        raise UnsupportedOperationError("prefill is the decoder_only input path")
    ids, mask = _as_batch(x, pad_mask)
    chunk = chunk or ids.shape[1]
    logits = None
    with no_grad():
        for start in range(0, ids.shape[1], chunk):
            stop = min(start + chunk, ids.shape[1])
            last = stop == ids.shape[1]
            block = decoder_forward(model, ids[:, start:stop], mask[:, start:stop], cache=cache,
                                    logits_for="last" if last else "none")
            if last:
                logits = block
    rows = reshape(logits, (ids.shape[0], model.config.vocab_size))
    return rows[0] if ids.shape[0] == 1 else rows



def new_cache(model, input_len, max_new):
    """
    A cache sized to one request: input plus output positions for
    decoder_only, output positions for encoder_decoder. Its size is the
    sequence span the NTK decision sees.
    """
    cfg = model.config
    needed = max(int(max_new), 1)
    if not cfg.is_encoder_decoder:
        needed += int(input_len)
    return KVCache(cfg, 1, capacity=min(needed, cfg.decoder_span), dtype=model.dtype)


# ============================================================================
# Generation
# ============================================================================

def _choose(logits, temperature, rng):
    values = np.asarray(logits.data, dtype=np.float64)
    if temperature and temperature > 0:
        z = values / temperature
        p = np.exp(z - z.max())
        return int(rng.choice(p.size, p=p / p.sum()))
    return int(np.argmax(values))


def generate(model, x, max_new, eos=EOS_ID, temperature=0.0, rng=None, prefill_chunk=None):
    """
    Autoregressive generation for one input sequence.

    Greedy (first-index tie-break) when ``temperature`` is 0, otherwise
    sampling from softmax(logits / temperature) with ``rng``.
    """
    if max_new < 1:
        raise DomainError(f"max_new must be >= 1, got {max_new}")
    if temperature and rng is None:
        rng = np.random.default_rng(0)
    x = [int(t) for t in x]
    cache = new_cache(model, len(x), max_new)
    if model.config.is_encoder_decoder:
        context = encode_once(model, x)
        logits = decode_step(model, context, cache, BOS_ID)
    else:
        context = None
        logits = prefill(model, cache, x, chunk=prefill_chunk or PROFILE_DEFAULTS['prefill_chunk'])

    out = []
    while True:
        token = _choose(logits, temperature, rng)
        out.append(token)
        if token == eos or len(out) >= max_new:
            return out
        logits = decode_step(model, context, cache, token)


def greedy_decode(model, x, max_new, eos=EOS_ID, use_cache=True):
    """
    Greedy decoding; stops at ``eos`` or after ``max_new`` tokens.

    ``use_cache=False`` recomputes the full sequence every step.
    """
    if use_cache:
        return generate(model, x, max_new, eos)
    if max_new < 1:
        raise DomainError(f"max_new must be >= 1, got {max_new}")
    x = [int(t) for t in x]
    x_mask = [t != PAD_ID for t in x]
    out = []
    with no_grad():
        while True:
            # generated tokens are always real, even when they equal PAD_ID
            if model.config.is_encoder_decoder:
                logits = encdec_forward(model, [x], None, [[BOS_ID] + out], [[True] * (len(out) + 1)])
            else:
                logits = deconly_forward(model, [x + out], [x_mask + [True] * len(out)])
            token = int(np.argmax(logits.data[0, -1]))
            out.append(token)
            if token == eos or len(out) >= max_new:
                return out
