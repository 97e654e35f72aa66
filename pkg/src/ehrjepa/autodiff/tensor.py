"""Dense tensors with reverse-mode differentiation on an explicit tape.

Training runs in float32 throughout. The ops preserve input dtype, which the
finite-difference harness exploits to evaluate reference forwards in float64
(the compiled kernels only accept float32, so float64 automatically takes the
numpy path).

Gradients accumulate: backward() adds into existing .grad buffers, so calling
it once per loss term implements gradient accumulation across passes.
"""

from contextlib import contextmanager

import numpy as np

from ..kernels import (
    gelu_bwd,
    gelu_fwd,
    layernorm_bwd,
    layernorm_fwd,
    mha_bwd,
    mha_fwd,
)

DTYPE = np.float32


class Tensor:
    """A dense array plus optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "is_leaf")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self.is_leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        # float64 accumulation keeps multi-pass gradient sums independent of
        # accumulation order; the optimizer casts back to float32
        if self.grad is None:
            self.grad = np.zeros(self.data.shape, dtype=np.float64)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class TapeNode:
    __slots__ = ("output", "inputs", "bwd")

    def __init__(self, output, inputs, bwd):
        self.output = output
        self.inputs = inputs
        self.bwd = bwd


class Tape:
    """Recording of ops in execution order; backward replays it reversed."""

    def __init__(self):
        self.nodes = []


_tape = None


@contextmanager
def record():
    """Activate a fresh tape for the enclosed computation."""
    global _tape
    prev = _tape
    _tape = Tape()
    try:
        yield _tape
    finally:
        _tape = prev


@contextmanager
def no_grad():
    global _tape
    prev = _tape
    _tape = None
    try:
        yield
    finally:
        _tape = prev


def _register(output, inputs, bwd):
    if _tape is not None and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        output.is_leaf = False
        _tape.nodes.append(TapeNode(output, inputs, bwd))
    return output


def backward(loss, tape=None):
    """Accumulate d(loss)/d(leaf) into .grad of every reachable leaf.

    Repeated calls add up, which is how the two-pass training step merges
    SFT and JEPA gradients before a single optimizer step.
    """
    tape = tape if tape is not None else _tape
    if tape is None:
        raise RuntimeError("backward called with no active tape")
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        gout = grads.pop(id(node.output), None)
        if gout is None:
            continue
        gins = node.bwd(gout)
        for t, g in zip(node.inputs, gins):
            if g is None or not t.requires_grad:
                continue
            if t.is_leaf:
                t.accumulate_grad(g)
            else:
                key = id(t)
                # never mutate stored arrays in place: bwd rules may hand the
                # same array object to several inputs
                grads[key] = grads[key] + g if key in grads else g


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _register(out, (a, b), bwd)


def add(a, b):
    """Elementwise add; b may broadcast (e.g. a bias over rows)."""
    out = Tensor(a.data + b.data)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _register(out, (a, b), bwd)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def scale(a, s):
    s = float(s)
    out = Tensor(a.data * s)

    def bwd(g):
        return (g * s,)

    return _register(out, (a,), bwd)


def transpose(a):
    if a.data.ndim != 2:
        raise ValueError(f"transpose expects a 2-d tensor, got {a.shape}")
    out = Tensor(np.ascontiguousarray(a.data.T))

    def bwd(g):
        return (np.ascontiguousarray(g.T),)

    return _register(out, (a,), bwd)


def reshape(a, shape):
    out = Tensor(np.ascontiguousarray(a.data.reshape(shape)))

    def bwd(g):
        return (g.reshape(a.shape),)

    return _register(out, (a,), bwd)


def gelu(a):
    out = Tensor(gelu_fwd(a.data))

    def bwd(g):
        return (gelu_bwd(a.data, g),)

    return _register(out, (a,), bwd)


def layer_norm(x, g, b, eps=1e-5):
    if x.data.ndim != 2 or x.shape[1] < 2:
        raise ValueError(f"layer_norm expects (rows, d>=2), got {x.shape}")
    y, mean, rstd = layernorm_fwd(x.data, g.data, b.data, eps)
    out = Tensor(y)

    def bwd(gout):
        dx, dg, db = layernorm_bwd(x.data, g.data, mean, rstd, gout)
        return dx, dg, db

    return _register(out, (x, g, b), bwd)


def take_rows(a, indices):
    """Gather rows of a 2-d tensor; scatter-add on backward.

    Serves both embedding lookup (indices = token ids) and selecting the
    masked rows of predictor output.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ValueError(f"row index out of range for shape {a.shape}")
    out = Tensor(a.data[idx])

    def bwd(g):
        da = np.zeros_like(a.data)
        np.add.at(da, idx, g)
        return (da,)

    return _register(out, (a,), bwd)


def multihead_attention(q, k, v, n_heads, causal):
    """Fused multi-head self-attention over one (T, d) sequence."""
    T, d = q.shape
    if d % n_heads != 0:
        raise ValueError(f"hidden dim {d} not divisible by {n_heads} heads")
    if k.shape != (T, d) or v.shape != (T, d):
        raise ValueError(f"attention shape mismatch: {q.shape}, {k.shape}, {v.shape}")
    out_data, probs = mha_fwd(q.data, k.data, v.data, n_heads, causal)
    out = Tensor(out_data)

    def bwd(g):
        return mha_bwd(q.data, k.data, v.data, probs, g, n_heads, causal)

    return _register(out, (q, k, v), bwd)


def softmax_cross_entropy(logits, targets, position_mask, excluded_classes=None):
    """Mean negative log-likelihood over the selected positions.

    targets[t] is the class expected at position t; position_mask is a
    boolean vector choosing which positions are supervised. Classes in
    excluded_classes are removed from the softmax entirely (zero
    probability, exactly zero gradient); they can never be targets.
    """
    mask = np.asarray(position_mask, dtype=bool)
    tgt = np.asarray(targets, dtype=np.int64)
    if mask.shape[0] != logits.shape[0] or tgt.shape[0] != logits.shape[0]:
        raise ValueError(
            f"cross entropy shape mismatch: logits {logits.shape}, "
            f"targets {tgt.shape}, mask {mask.shape}"
        )
    m = int(mask.sum())
    if m == 0:
        raise ValueError("no supervised positions")
    if tgt[mask].min() < 0 or tgt[mask].max() >= logits.shape[1]:
        raise ValueError(f"target id out of range for vocab {logits.shape[1]}")
    rows = logits.data[mask].copy()
    if excluded_classes is not None:
        excluded = np.asarray(excluded_classes, dtype=np.int64)
        if np.isin(tgt[mask], excluded).any():
            raise ValueError("a target id is in the excluded class set")
        rows[:, excluded] = -np.inf
    mx = rows.max(axis=1, keepdims=True)
    z = rows - mx
    e = np.exp(z)
    lse = np.log(e.sum(axis=1))
    picked = z[np.arange(m), tgt[mask]]
    out = Tensor(np.asarray((lse - picked).mean(), dtype=logits.dtype))

    def bwd(g):
        p = e / e.sum(axis=1, keepdims=True)
        p[np.arange(m), tgt[mask]] -= 1.0
        dl = np.zeros_like(logits.data)
        dl[mask] = p * (g / m)
        return (dl,)

    return _register(out, (logits,), bwd)


def masked_mse(pred, target, indices):
    """Mean over the indexed rows of the squared L2 row distance."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("masked_mse requires a non-empty index set")
    if pred.shape != target.shape:
        raise ValueError(f"masked_mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data[idx] - target.data[idx]
    out = Tensor(np.asarray((diff * diff).sum() / idx.size, dtype=pred.dtype))

    def bwd(g):
        dp = np.zeros_like(pred.data)
        np.add.at(dp, idx, diff * (2.0 * g / idx.size))
        return dp, -dp

    return _register(out, (pred, target), bwd)


def mean_tensors(tensors):
    """Mean of scalar tensors (per-sequence losses -> batch loss)."""
    acc = tensors[0]
    for t in tensors[1:]:
        acc = add(acc, t)
    return scale(acc, 1.0 / len(tensors))
