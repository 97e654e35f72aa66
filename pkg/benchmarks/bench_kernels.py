#!/usr/bin/env python3
"""Benchmark the compiled kernels against the numpy fallback.

Times each hot kernel on training-shaped inputs, then a full train step on a
small synthetic batch under whichever backend is active. Run twice to compare
end to end:

    EHRJEPA_KERNELS=numpy    python benchmarks/bench_kernels.py
    EHRJEPA_KERNELS=compiled python benchmarks/bench_kernels.py

Kernel-level rows always show both backends (the compiled module is imported
directly when available).
"""

import time

import numpy as np

from ehrjepa.kernels import BACKEND, _npkernels

try:
    from ehrjepa.kernels import _ckernels
except ImportError:
    _ckernels = None


def timeit(fn, *args, repeats=50):
    fn(*args)  # warmup
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats * 1e3  # ms


def bench_kernels():
    rng = np.random.default_rng(0)
    T, d, heads = 256, 64, 4
    q, k, v, dout = (rng.standard_normal((T, d)).astype(np.float32) for _ in range(4))
    x = rng.standard_normal((T, 4 * d)).astype(np.float32)
    g = np.ones(d, np.float32)
    b = np.zeros(d, np.float32)
    xd = rng.standard_normal((T, d)).astype(np.float32)
    dy = rng.standard_normal((T, d)).astype(np.float32)
    p = rng.standard_normal((d, 4 * d)).astype(np.float32)
    grad = rng.standard_normal((d, 4 * d)).astype(np.float32)
    m = np.zeros_like(p)
    vv = np.zeros_like(p)

    probs_np = _npkernels.mha_fwd(q, k, v, heads, True)[1]
    cases = [
        ("mha_fwd(256x64,4h,causal)", lambda mod: mod.mha_fwd(q, k, v, heads, True)),
        (
            "mha_bwd(256x64,4h,causal)",
            lambda mod: mod.mha_bwd(q, k, v, probs_np, dout, heads, True),
        ),
        ("layernorm_fwd(256x64)", lambda mod: mod.layernorm_fwd(xd, g, b, 1e-5)),
        ("gelu_fwd(256x256)", lambda mod: mod.gelu_fwd(x)),
        (
            "adamw_update(64x256)",
            lambda mod: mod.adamw_update(p, grad, m, vv, 1, 1e-3, 0.9, 0.95, 1e-8, 0.1),
        ),
    ]
    print(f"{'kernel':32s} {'numpy ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for name, call in cases:
        t_np = timeit(call, _npkernels)
        if _ckernels is not None:
            t_ck = timeit(call, _ckernels)
            print(f"{name:32s} {t_np:10.3f} {t_ck:12.3f} {t_np / t_ck:7.2f}x")
        else:
            print(f"{name:32s} {t_np:10.3f} {'(not built)':>12s}")


def bench_train_step():
    from ehrjepa.model import EncoderConfig, PredictorConfig
    from ehrjepa.records import build_vocabulary
    from ehrjepa.simulate import config_for_regime, generate_cohort
    from ehrjepa.training import (
        TrainConfig,
        assemble_batch,
        prepare_training_data,
        train_step,
    )
    from ehrjepa.model import ModelBundle
    from ehrjepa import autodiff as ad

    records, _ = generate_cohort(config_for_regime("chronic", n_patients=64, seed=0))
    vocab = build_vocabulary(records)
    tcfg = TrainConfig(total_steps=10, batch_size=8, seed=0)
    data = prepare_training_data([records], vocab, tcfg.horizon_days)
    enc = EncoderConfig(vocab_size=len(vocab))
    pred = PredictorConfig()
    bundle = ModelBundle(enc, pred, vocab.mask_id, seed=0)
    opt = ad.AdamWState(peak_lr=tcfg.peak_lr, total_steps=tcfg.total_steps)
    rng = np.random.default_rng(0)
    batch = assemble_batch(data, 0, tcfg, enc.max_len)
    train_step(bundle, batch, tcfg, opt, rng, True)  # warmup
    t0 = time.perf_counter()
    n = 5
    for step in range(1, n + 1):
        batch = assemble_batch(data, step, tcfg, enc.max_len)
        train_step(bundle, batch, tcfg, opt, rng, True)
    dt = (time.perf_counter() - t0) / n
    print(f"\nhybrid train step (batch 8, d=64, L=2) under {BACKEND}: {dt * 1e3:.0f} ms")


if __name__ == "__main__":
    print(f"active backend: {BACKEND}\n")
    bench_kernels()
    bench_train_step()
