"""Numpy reference kernels.

These are the fallback implementations of the hot inner-loop routines used by
the autodiff layer: multi-head attention, layer norm, GELU, and the fused
AdamW parameter update. They are dtype-generic (float32 in training, float64
in the finite-difference harness), which is why they double as the reference
side of kernel-parity tests against the compiled backend.
"""

import numpy as np


def gelu_fwd(x):
    # tanh-approximation GELU
    c = np.asarray(0.7978845608028654, dtype=x.dtype)  # sqrt(2/pi)
    a = np.asarray(0.044715, dtype=x.dtype)
    return 0.5 * x * (1.0 + np.tanh(c * (x + a * x * x * x)))


def gelu_bwd(x, dy):
    c = np.asarray(0.7978845608028654, dtype=x.dtype)
    a = np.asarray(0.044715, dtype=x.dtype)
    u = c * (x + a * x * x * x)
    t = np.tanh(u)
    du = c * (1.0 + 3.0 * a * x * x)
    dydx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
    return dy * dydx


def layernorm_fwd(x, g, b, eps):
    """Row-wise layer norm over the last axis of a 2-d array.

    Returns (y, mean, rstd); mean/rstd are cached for the backward pass.
    """
    mean = x.mean(axis=1)
    var = ((x - mean[:, None]) ** 2).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = (x - mean[:, None]) * rstd[:, None]
    y = xhat * g[None, :] + b[None, :]
    return y, mean.astype(x.dtype, copy=False), rstd.astype(x.dtype, copy=False)


def layernorm_bwd(x, g, mean, rstd, dy):
    xhat = (x - mean[:, None]) * rstd[:, None]
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    ghat = dy * g[None, :]
    m1 = ghat.mean(axis=1, keepdims=True)
    m2 = (ghat * xhat).mean(axis=1, keepdims=True)
    dx = (ghat - m1 - xhat * m2) * rstd[:, None]
    return dx, dg, db


def mha_fwd(q, k, v, n_heads, causal):
    """Multi-head attention over a single sequence.

    q, k, v: (T, d) with d divisible by n_heads. Returns (out (T, d),
    probs (h, T, T)) where probs is cached for the backward pass.
    """
    T, d = q.shape
    dh = d // n_heads
    scale = np.asarray(1.0 / np.sqrt(dh), dtype=q.dtype)
    qh = q.reshape(T, n_heads, dh).transpose(1, 0, 2)
    kh = k.reshape(T, n_heads, dh).transpose(1, 0, 2)
    vh = v.reshape(T, n_heads, dh).transpose(1, 0, 2)
    scores = np.matmul(qh, kh.transpose(0, 2, 1)) * scale
    if causal:
        mask = np.triu(np.ones((T, T), dtype=bool), k=1)
        scores = np.where(mask[None, :, :], np.asarray(-np.inf, dtype=q.dtype), scores)
    scores = scores - scores.max(axis=2, keepdims=True)
    e = np.exp(scores)
    probs = e / e.sum(axis=2, keepdims=True)
    out = np.matmul(probs, vh)
    return out.transpose(1, 0, 2).reshape(T, d), probs


def mha_bwd(q, k, v, probs, dout, n_heads, causal):
    T, d = q.shape
    dh = d // n_heads
    scale = np.asarray(1.0 / np.sqrt(dh), dtype=q.dtype)
    qh = q.reshape(T, n_heads, dh).transpose(1, 0, 2)
    kh = k.reshape(T, n_heads, dh).transpose(1, 0, 2)
    vh = v.reshape(T, n_heads, dh).transpose(1, 0, 2)
    doh = dout.reshape(T, n_heads, dh).transpose(1, 0, 2)
    dv = np.matmul(probs.transpose(0, 2, 1), doh)
    dp = np.matmul(doh, vh.transpose(0, 2, 1))
    ds = probs * (dp - (dp * probs).sum(axis=2, keepdims=True))
    dq = np.matmul(ds, kh) * scale
    dk = np.matmul(ds.transpose(0, 2, 1), qh) * scale
    to_flat = lambda a: a.transpose(1, 0, 2).reshape(T, d)
    return to_flat(dq), to_flat(dk), to_flat(dv)


def adamw_update(p, grad, m, v, t, lr, beta1, beta2, eps, weight_decay):
    """Fused AdamW update, in place on p/m/v. Decay is decoupled."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    if weight_decay != 0.0:
        p *= 1.0 - lr * weight_decay
    p -= lr * mhat / (np.sqrt(vhat) + eps)
