#!/usr/bin/env python3
"""
Minimal dense tensor with reverse-mode automatic differentiation.

Tensors wrap contiguous numpy arrays. Primitive applications are recorded on
the Graph that is active in the current thread (``with Graph() as g:``);
without an active graph nothing is recorded, which doubles as a no-grad mode.
``backward`` walks the recorded nodes in exact reverse order.

Only the primitives the models need are provided: elementwise arithmetic,
matmul, layout ops (reshape, transpose, slicing, concat, gather), GELU,
temperature softmax, layer normalization, rotary pair rotation, masked
cross-entropy and row-wise KL divergence.

Author: Matt Y
License: MIT
Version: 1.0.0
"""

import logging
import threading
from contextlib import contextmanager

import numpy as np

from constants import EPS_LOG_FLOOR, LAYER_NORM_EPS, PROB_ROW_TOL
from lab_errors import DomainError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

_state = threading.local()


def _tls():
    if not hasattr(_state, "graph"):
        _state.graph = None
        _state.dtype = np.float32
        _state.counters = []
    return _state


# ============================================================================
# Precision
# ============================================================================

def get_default_dtype():
    return _tls().dtype


def set_default_dtype(dtype):
    """Set the element type for new tensors in this thread (float32 or float64)."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise DomainError(f"unsupported dtype {dtype!r}, expected float32 or float64")
    _tls().dtype = dtype


@contextmanager
def default_dtype(dtype):
    """Temporarily switch the default element type (64-bit for gradient checks)."""
    previous = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _tls().dtype = previous


# ============================================================================
# Tensor
# ============================================================================

class Tensor:
    """Dense n-dimensional value with an optional gradient accumulator."""

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        dtype = dtype or get_default_dtype()
        self.data = np.array(data, dtype=dtype, copy=True, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.name = name

    @classmethod
    def _wrap(cls, array, name=None):
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(array)
        t.requires_grad = False
        t.grad = None
        t.name = name
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data.copy()

    def detach(self):
        return Tensor._wrap(self.data.copy(), name=self.name)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise DomainError("division is only supported by a scalar")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def _lift(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=like.dtype))


def as_tensor(value, dtype=None):
    """Wrap an array as a constant tensor (no copy when already contiguous)."""
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=dtype or get_default_dtype()))


# ============================================================================
# Graph
# ============================================================================

class Node:
    """One recorded primitive application."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn

    def __repr__(self):
        return f"Node({self.op}: {len(self.inputs)} inputs -> {self.output.shape})"


class Graph:
    """
    Ordered record of primitive applications.

    Use as a context manager to make it the active graph of the current
    thread. Graphs are confined to the thread that created them.
    """

    def __init__(self):
        self.nodes = []
        self._previous = None

    def __enter__(self):
        state = _tls()
        self._previous = state.graph
        state.graph = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls().graph = self._previous
        self._previous = None
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, op, inputs, output, backward_fn):
        self.nodes.append(Node(op, inputs, output, backward_fn))

    def is_topological(self):
        """True when every recorded input was produced before it is consumed."""
        produced_at = {id(node.output): i for i, node in enumerate(self.nodes)}
        for i, node in enumerate(self.nodes):
            for t in node.inputs:
                j = produced_at.get(id(t))
                if j is not None and j >= i:
                    return False
        return True

    def backward(self, loss):
        backward(loss, self)


def active_graph():
    return _tls().graph


@contextmanager
def no_grad():
    """Run a block without recording, even inside an active graph."""
    state = _tls()
    previous = state.graph
    state.graph = None
    try:
        yield
    finally:
        state.graph = previous


def _finite(array, op):
    if not np.isfinite(array).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return array


def _record(op, inputs, out, backward_fn):
    graph = _tls().graph
    if graph is None or not any(t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    graph.record(op, inputs, out, backward_fn)
    return out


def backward(loss, graph):
    """
    Populate gradients of every requires_grad tensor reachable from loss.

    Leaf gradients accumulate across calls; intermediate tensors keep the
    gradient of the latest pass.
    """
    if loss.size != 1:
        raise DomainError(f"backward needs a scalar loss, got shape {loss.shape}")

    grads = {id(loss): np.ones_like(loss.data)}
    tensors = {id(loss): loss}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        node.output.grad = g
        for t, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                tensors[key] = t

    for key, g in grads.items():
        t = tensors[key]
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g.astype(t.data.dtype, copy=False).reshape(t.shape)


# ============================================================================
# Instrumentation
# ============================================================================

class MatmulCounter:
    """
    Counts matmul FLOPs (2mnk per product, batch dims multiplied in) while active.

    Example:
        with MatmulCounter() as counter:
            decode_step(model, ctx, cache, token)
        counter.flops
    """

    def __init__(self):
        self.flops = 0
        self.calls = 0

    def __enter__(self):
        _tls().counters.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls().counters.remove(self)
        return False

    def add(self, flops):
        self.flops += int(flops)
        self.calls += 1


# ============================================================================
# Elementwise and layout primitives
# ============================================================================

def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b):
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    b = _lift(b, a)
    out = Tensor._wrap(_finite(a.data + b.data, "add"))

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), out, backward_fn)


def sub(a, b):
    b = _lift(b, a)
    out = Tensor._wrap(_finite(a.data - b.data, "sub"))

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", (a, b), out, backward_fn)


def mul(a, b):
    b = _lift(b, a)
    out = Tensor._wrap(_finite(a.data * b.data, "mul"))

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", (a, b), out, backward_fn)


def scale(a, factor):
    factor = float(factor)
    out = Tensor._wrap(_finite(a.data * a.dtype.type(factor), "scale"))

    def backward_fn(g):
        return (g * g.dtype.type(factor),)

    return _record("scale", (a,), out, backward_fn)


def sum_all(a):
    out = Tensor._wrap(_finite(np.asarray(a.data.sum(), dtype=a.dtype), "sum"))

    def backward_fn(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", (a,), out, backward_fn)


def mean_all(a):
    return scale(sum_all(a), 1.0 / a.size)


def matmul(a, b):
    """Batched matrix product over the last two axes; counted by MatmulCounter."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out_data = _finite(np.matmul(a.data, b.data), "matmul")
    counters = _tls().counters
    if counters:
        m, n = out_data.shape[-2:]
        batch = int(np.prod(out_data.shape[:-2], dtype=np.int64))
        flops = 2 * batch * m * n * a.shape[-1]
        for counter in counters:
            counter.add(flops)
    out = Tensor._wrap(out_data)

    def backward_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _record("matmul", (a, b), out, backward_fn)


def reshape(a, shape):
    out = Tensor._wrap(_finite(a.data.reshape(shape).copy(), "reshape"))

    def backward_fn(g):
        return (g.reshape(a.shape),)

    return _record("reshape", (a,), out, backward_fn)


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor._wrap(_finite(np.ascontiguousarray(np.transpose(a.data, axes)), "transpose"))

    def backward_fn(g):
        return (np.ascontiguousarray(np.transpose(g, inverse)),)

    return _record("transpose", (a,), out, backward_fn)


def getitem(a, index):
    out = Tensor._wrap(_finite(np.array(a.data[index], copy=True), "getitem"))

    def backward_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _record("getitem", (a,), out, backward_fn)


def concat(tensors, axis=0):
    tensors = list(tensors)
    out = Tensor._wrap(_finite(np.concatenate([t.data for t in tensors], axis=axis), "concat"))
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g):
        return tuple(np.ascontiguousarray(part) for part in np.split(g, bounds, axis=axis))

    return _record("concat", tuple(tensors), out, backward_fn)


def index_select(a, axis, indices):
    """Gather slices of ``a`` along ``axis`` (indices may repeat)."""
    indices = np.asarray(indices, dtype=np.int64)
    out = Tensor._wrap(_finite(np.take(a.data, indices, axis=axis), "index_select"))

    def backward_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(np.moveaxis(full, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _record("index_select", (a,), out, backward_fn)


def embedding(weight, ids):
    """Rows of ``weight`` for integer ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise DomainError(f"token id out of range [0, {weight.shape[0]})")
    out = Tensor._wrap(_finite(weight.data[ids], "embedding"))

    def backward_fn(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return _record("embedding", (weight,), out, backward_fn)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a):
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = Tensor._wrap(_finite(0.5 * x * (1.0 + t), "gelu"))

    def backward_fn(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _record("gelu", (a,), out, backward_fn)


def rotate_pairs(a, cos, sin):
    """
    Rotate interleaved feature pairs (2i, 2i+1) of the last axis.

    ``cos`` and ``sin`` broadcast against ``a[..., ::2]``.
    """
    if a.shape[-1] % 2:
        raise ShapeError(f"rotate_pairs needs an even last axis, got {a.shape[-1]}")
    cos = np.asarray(cos, dtype=a.dtype)
    sin = np.asarray(sin, dtype=a.dtype)
    even, odd = a.data[..., 0::2], a.data[..., 1::2]
    out_data = np.empty_like(a.data)
    out_data[..., 0::2] = even * cos - odd * sin
    out_data[..., 1::2] = even * sin + odd * cos
    out = Tensor._wrap(_finite(out_data, "rotate_pairs"))

    def backward_fn(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        full = np.empty_like(g)
        full[..., 0::2] = ge * cos + go * sin
        full[..., 1::2] = go * cos - ge * sin
        return (full,)

    return _record("rotate_pairs", (a,), out, backward_fn)


# ============================================================================
# Normalization and probability primitives
# ============================================================================

def softmax_rows(x, temperature=1.0, mask=None):
    """
    Softmax over the last axis of ``x / temperature``.

    ``mask`` (boolean, broadcastable) marks allowed entries; disallowed
    entries behave as -inf logits. Rows with no allowed entry come out as
    all zeros.
    """
    if not temperature > 0:
        raise DomainError(f"softmax temperature must be > 0, got {temperature}")
    z = x.data / x.dtype.type(temperature) if temperature != 1.0 else x.data
    if mask is None:
        shifted = z - z.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=-1, keepdims=True)
    else:
        allowed = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        row_max = np.where(allowed, z, -np.inf).max(axis=-1, keepdims=True)
        row_max = np.where(np.isfinite(row_max), row_max, 0.0)
        e = np.where(allowed, np.exp(np.where(allowed, z - row_max, 0.0)), 0.0)
        total = e.sum(axis=-1, keepdims=True)
        p = e / np.where(total > 0, total, 1.0)
    p = p.astype(x.dtype, copy=False)
    out = Tensor._wrap(_finite(p, "softmax_rows"))
    inv_t = x.dtype.type(1.0 / temperature)

    def backward_fn(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - inner) * inv_t,)

    return _record("softmax_rows", (x,), out, backward_fn)


def layer_norm(x, gamma, beta, eps=LAYER_NORM_EPS):
    """Layer normalization over the last axis with affine gamma/beta."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = Tensor._wrap(_finite(xhat * gamma.data + beta.data, "layer_norm"))

    def backward_fn(g):
        lead = tuple(range(g.ndim - 1))
        g_gamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        g_beta = g.sum(axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                         - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, g_gamma, g_beta

    return _record("layer_norm", (x, gamma, beta), out, backward_fn)


def _mask_weights(mask, n_rows, dtype):
    weights = np.asarray(mask, dtype=dtype).reshape(-1)
    if weights.size != n_rows:
        raise ShapeError(f"mask has {weights.size} entries for {n_rows} rows")
    if np.any((weights != 0) & (weights != 1)):
        raise DomainError("mask must be binary")
    count = weights.sum()
    if count < 1:
        raise DomainError("mask has no active position")
    return weights, count


def cross_entropy_masked(logits, targets, mask):
    """
    Mean over masked positions of -log softmax(logits)[target].

    ``logits`` is [..., V]; ``targets`` and ``mask`` match its leading shape.
    Computed with log-sum-exp, so no probability floor is needed.
    """
    vocab = logits.shape[-1]
    flat = logits.data.reshape(-1, vocab)
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    if tgt.size != flat.shape[0]:
        raise ShapeError(f"{tgt.size} targets for {flat.shape[0]} logit rows")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= vocab):
        raise DomainError(f"target id out of range [0, {vocab})")
    weights, count = _mask_weights(mask, flat.shape[0], logits.dtype)

    row_max = flat.max(axis=1, keepdims=True)
    shifted = flat - row_max
    sum_exp = np.exp(shifted).sum(axis=1, keepdims=True)
    log_probs_target = shifted[np.arange(tgt.size), tgt] - np.log(sum_exp[:, 0])
    loss = -(log_probs_target * weights).sum() / count
    out = Tensor._wrap(_finite(np.asarray(loss, dtype=logits.dtype), "cross_entropy_masked"))

    def backward_fn(g):
        p = np.exp(shifted) / sum_exp
        p[np.arange(tgt.size), tgt] -= 1.0
        p *= (weights / count)[:, None] * g
        return (p.reshape(logits.shape),)

    return _record("cross_entropy_masked", (logits,), out, backward_fn)


def _check_prob_rows(t, label):
    tol = PROB_ROW_TOL['float64' if t.dtype == np.float64 else 'float32']
    if np.any(t.data < 0):
        raise DomainError(f"{label} has negative probabilities")
    sums = t.data.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > tol):
        raise DomainError(f"{label} rows must sum to 1 (max deviation {np.abs(sums - 1.0).max():.2e})")


def kl_rows(p, q, mask, validate=True):
    """
    Mean over masked rows of sum p * (log p - log q), with 0 * log 0 = 0.

    Both logs use a 1e-9 floor so an exact zero in q never yields infinity.
    Gradients flow into q and into p when it requires grad.
    """
    if p.shape != q.shape:
        raise ShapeError(f"kl_rows shape mismatch {p.shape} vs {q.shape}")
    if validate:
        _check_prob_rows(p, "p")
        _check_prob_rows(q, "q")
    vocab = p.shape[-1]
    pf = p.data.reshape(-1, vocab)
    qf = q.data.reshape(-1, vocab)
    weights, count = _mask_weights(mask, pf.shape[0], p.dtype)

    eps = p.dtype.type(EPS_LOG_FLOOR)
    log_p = np.log(np.maximum(pf, eps))
    log_q = np.log(np.maximum(qf, eps))
    rows = (pf * (log_p - log_q)).sum(axis=1)
    loss = (rows * weights).sum() / count
    out = Tensor._wrap(_finite(np.asarray(loss, dtype=p.dtype), "kl_rows"))

    def backward_fn(g):
        row_w = (weights / count)[:, None] * g
        gp = None
        if p.requires_grad:
            gp = ((log_p - log_q + (pf >= eps)) * row_w).reshape(p.shape)
        gq = None
        if q.requires_grad:
            gq = (-(pf / np.maximum(qf, eps)) * (qf >= eps) * row_w).reshape(q.shape)
        return gp, gq

    return _record("kl_rows", (p, q), out, backward_fn)


# ============================================================================
# Gradient checking
# ============================================================================

def gradcheck(fn, arrays, h=1e-4):
    """
    Compare analytic gradients of ``fn`` with central finite differences.

    ``fn`` maps Tensors to a scalar Tensor. Runs in 64-bit.

    Returns:
        Largest relative error over all inputs, measured as
        ||analytic - numeric|| / max(||analytic||, ||numeric||)
    """
    with default_dtype(np.float64):
        inputs = [Tensor(a, requires_grad=True) for a in arrays]
        with Graph() as graph:
            loss = fn(*inputs)
        backward(loss, graph)

        worst = 0.0
        for i, t in enumerate(inputs):
            numeric = np.zeros_like(t.data)
            flat = numeric.reshape(-1)
            for j in range(t.size):
                shifted = [x.data.copy() for x in inputs]
                shifted[i].reshape(-1)[j] += h
                plus = fn(*[Tensor(a) for a in shifted]).item()
                shifted[i].reshape(-1)[j] -= 2 * h
                minus = fn(*[Tensor(a) for a in shifted]).item()
                flat[j] = (plus - minus) / (2 * h)
            scale_ = max(np.linalg.norm(t.grad), np.linalg.norm(numeric))
            if scale_ > 0:
                worst = max(worst, float(np.linalg.norm(t.grad - numeric) / scale_))
        return worst
