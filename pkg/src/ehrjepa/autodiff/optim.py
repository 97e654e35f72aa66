"""AdamW with decoupled weight decay, plus the warmup/cosine schedule."""

import math
from dataclasses import dataclass, field

import numpy as np

from ..kernels import adamw_update


def cosine_lr(step, total, peak, warmup_frac=0.03):
    """Linear ramp to peak over the first warmup fraction, cosine to 0 after."""
    if total <= 0:
        raise ValueError("total steps must be positive")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    warmup = warmup_frac * total
    if step <= warmup:
        return peak * step / warmup if warmup > 0 else peak
    return 0.5 * peak * (1.0 + math.cos(math.pi * (step - warmup) / (total - warmup)))


def decays(name, tensor):
    """Decay only 2-d projection weights; embeddings, gains and biases are
    exempt so a parameter that never receives gradient stays bit-stable."""
    return tensor.data.ndim == 2 and not name.split(".")[-1].endswith("emb")


@dataclass
class AdamWState:
    peak_lr: float
    total_steps: int
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    warmup_frac: float = 0.03
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)


def adamw_step(params, state, lr=None):
    """One update over `params` (name -> Tensor); grads are consumed.

    The learning rate defaults to the cosine schedule evaluated at the step
    being taken (step_count + 1, so the very first update is inside warmup
    rather than at the zero start of the ramp).
    """
    state.step_count += 1
    if lr is None:
        lr = cosine_lr(
            min(state.step_count, state.total_steps),
            state.total_steps,
            state.peak_lr,
            state.warmup_frac,
        )
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"missing gradient for trainable parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
            state.t[name] = 0
        state.t[name] += 1
        wd = state.weight_decay if decays(name, p) else 0.0
        grad = np.ascontiguousarray(p.grad, dtype=p.data.dtype)
        adamw_update(
            p.data,
            grad,
            state.m[name],
            state.v[name],
            state.t[name],
            lr,
            state.beta1,
            state.beta2,
            state.eps,
            wd,
        )
        p.grad = None
    return lr


def grad_global_norm(params):
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return math.sqrt(total)


def clip_grad_norm(params, max_norm):
    """Scale all grads so the global norm is at most max_norm; returns the
    pre-clip norm."""
    norm = grad_global_norm(params)
    if max_norm > 0 and norm > max_norm:
        factor = np.float32(max_norm / norm)
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm
