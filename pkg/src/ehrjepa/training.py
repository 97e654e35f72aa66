"""Joint objective, the two-pass training step, schedules, checkpoints.

Each step runs the online encoder twice over the same batch: pass 1 scores
next-token prediction on the unmasked sequence, pass 2 scores latent
prediction on the masked sequence against momentum-encoder targets. Both
backwards accumulate into the same grad buffers, then exactly one optimizer
step and one EMA update happen.

Batch composition is a pure function of (seed, step), so resuming from a
checkpoint replays the identical stream.
"""

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DataError, NumericalAbort
from .model import (
    ModelBundle,
    apply_mask,
    ema_update,
    encoder_forward,
    momentum_forward,
    predictor_forward,
)
from .records import split_at_time
from .simulate import emit_trigger_events

MODES = ("sft_only", "hybrid", "curriculum")

# instrumentation for the one-step/one-EMA contract
COUNTERS = {"optimizer_steps": 0, "ema_updates": 0}


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 1200
    batch_size: int = 8
    peak_lr: float = 3e-3
    seed: int = 0
    mode: str = "hybrid"
    switch_frac: float = 0.5
    lambda_sft: float = 1.0
    lambda_jepa: float = 1.0
    r_m: float = 0.5
    tau: float = 0.996
    horizon_days: float = 60.0
    grad_clip: float = 1.0
    weight_decay: float = 0.1
    warmup_frac: float = 0.03
    checkpoint_every: int = 0  # 0: only the final checkpoint
    mix_weights: tuple = (1.0, 1.0)

    def __post_init__(self):
        if self.mode not in MODES:
            raise DataError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lambda_sft < 0 or self.lambda_jepa < 0:
            raise DataError("loss weights must be >= 0")
        if not 0 < self.r_m <= 1:
            raise DataError(f"r_m must be in (0, 1], got {self.r_m}")
        if not 0 <= self.tau <= 1:
            raise DataError(f"tau must be in [0, 1], got {self.tau}")
        if self.mode == "curriculum" and not 0 < self.switch_frac < 1:
            raise DataError("curriculum switch fraction must be in (0, 1)")


@dataclass
class StepMetrics:
    step: int
    l_sft: float | None
    l_jepa: float | None
    total: float
    lr: float
    grad_norm: float

    def log_line(self):
        sft = "" if self.l_sft is None else f"{self.l_sft:.8g}"
        jep = "" if self.l_jepa is None else f"{self.l_jepa:.8g}"
        return f"{self.step}\t{sft}\t{jep}\t{self.total:.8g}\t{self.lr:.8g}"


# ---------------------------------------------------------------------------
# dataset preparation and deterministic batch assembly
# ---------------------------------------------------------------------------


@dataclass
class TrainingData:
    records: list
    nodes: list  # valid anchor times per record, aligned with records
    vocab: object


def prepare_training_data(cohorts, vocab, horizon_days, mix_weights=None):
    """Keep patients that own at least one decision node with a non-empty
    continuation window; cohort weights repeat whole cohorts."""
    weights = mix_weights or [1.0] * len(cohorts)
    records, nodes = [], []
    for cohort, w in zip(cohorts, weights):
        for _ in range(max(1, int(round(w)))):
            for rec in cohort:
                t0s = [
                    t0
                    for t0, _ in emit_trigger_events(rec)
                    if any(t0 < e.time <= t0 + horizon_days for e in rec.events)
                ]
                if t0s:
                    records.append(rec)
                    nodes.append(t0s)
    if not records:
        raise DataError("no patient has a usable decision node")
    return TrainingData(records, nodes, vocab)


def assemble_batch(data, step, cfg, max_len):
    """Batch for a given step: one uniformly chosen decision node per
    patient per epoch, epoch order shuffled by a step-derived rng."""
    n = len(data.records)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    epoch = step // steps_per_epoch
    offset = (step % steps_per_epoch) * cfg.batch_size
    order = np.random.default_rng([cfg.seed, 101, epoch]).permutation(n)
    chosen = order[offset : offset + cfg.batch_size]
    if len(chosen) == 0:
        chosen = order[: cfg.batch_size]
    batch = []
    for pi in chosen:
        t0s = data.nodes[pi]
        pick = np.random.default_rng([cfg.seed, 202, epoch, int(pi)])
        t0 = t0s[int(pick.integers(len(t0s)))]
        batch.append(
            split_at_time(
                data.records[pi], data.vocab, t0, cfg.horizon_days, max_len
            )
        )
    return batch


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def sft_loss(bundle, batch):
    """Next-token cross-entropy on unmasked sequences, continuation
    positions only, per-sequence mean then batch mean.

    The mask class is excluded from the softmax: it never occurs in data,
    and with a tied output head an included class would leak gradient into
    the mask-token embedding even in SFT-only training.
    """
    losses = []
    for seq in batch:
        if seq.m < 1:
            raise DataError("sft_loss requires every sequence to have m >= 1")
        _, logits = encoder_forward(bundle.online, seq.ids, bundle.enc_cfg)
        T = len(seq.ids)
        targets = np.zeros(T, dtype=np.int64)
        targets[: T - 1] = seq.ids[1:]
        mask = np.zeros(T, dtype=bool)
        mask[seq.n - 1 : T - 1] = True
        losses.append(
            ad.softmax_cross_entropy(
                logits, targets, mask, excluded_classes=[bundle.mask_id]
            )
        )
    return ad.mean_tensors(losses)


def jepa_loss(bundle, batch, rng, r_m=0.5):
    """Masked latent prediction against momentum-encoder targets."""
    losses, index_sets = [], []
    for seq in batch:
        masked_ids, positions = apply_mask(seq, r_m, rng, bundle.mask_id)
        h_online, _ = encoder_forward(bundle.online, masked_ids, bundle.enc_cfg)
        h_target = momentum_forward(bundle.momentum, seq.ids, bundle.enc_cfg)
        pred = predictor_forward(
            bundle.predictor, h_online, positions, bundle.enc_cfg, bundle.pred_cfg
        )
        target_rows = ad.Tensor(h_target.data[positions])
        losses.append(ad.masked_mse(pred, target_rows, np.arange(len(positions))))
        index_sets.append(positions)
    return ad.mean_tensors(losses), index_sets


def train_step(bundle, batch, cfg, opt_state, rng, jepa_active, grad_probe=None):
    """One two-pass step. Returns StepMetrics.

    grad_probe, when given, is called with the accumulated (pre-clip) grads
    right before the optimizer step; used by the gradient-equivalence checks.
    """
    params = bundle.trainable(include_predictor=jepa_active)
    l_sft_val = l_jepa_val = None
    with ad.record():
        if cfg.lambda_sft > 0:
            l_sft = sft_loss(bundle, batch)
            l_sft_val = float(l_sft.data)
            ad.backward(ad.scale(l_sft, cfg.lambda_sft))
        if jepa_active:
            l_jepa, _ = jepa_loss(bundle, batch, rng, cfg.r_m)
            l_jepa_val = float(l_jepa.data)
            ad.backward(ad.scale(l_jepa, cfg.lambda_jepa))
    for name, value in (("SFT", l_sft_val), ("JEPA", l_jepa_val)):
        if value is not None and not math.isfinite(value):
            raise NumericalAbort(opt_state.step_count + 1, f"{name} loss is {value}")
    # parameters in the active set that this batch never touched (possible
    # only for unused position rows) still need grad buffers
    for p in params.values():
        if p.grad is None:
            p.grad = np.zeros(p.data.shape, dtype=np.float64)
    if grad_probe is not None:
        grad_probe(params)
    grad_norm = ad.clip_grad_norm(params, cfg.grad_clip)
    lr = ad.adamw_step(params, opt_state)
    COUNTERS["optimizer_steps"] += 1
    ema_update(bundle.momentum, bundle.online, cfg.tau)
    COUNTERS["ema_updates"] += 1
    total = (cfg.lambda_sft * (l_sft_val or 0.0)) + (
        cfg.lambda_jepa * (l_jepa_val or 0.0) if jepa_active else 0.0
    )
    return StepMetrics(opt_state.step_count, l_sft_val, l_jepa_val, total, lr, grad_norm)


def jepa_active_at(cfg, step):
    if cfg.mode == "sft_only":
        return False
    if cfg.mode == "hybrid":
        return cfg.lambda_jepa > 0
    switch = int(cfg.switch_frac * cfg.total_steps)
    return step >= switch and cfg.lambda_jepa > 0


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, bundle, opt_state, completed_steps):
    tensors = {name: t.data for name, t in bundle.all_params().items()}
    for name in opt_state.m:
        tensors[f"opt/m/{name}"] = opt_state.m[name]
        tensors[f"opt/v/{name}"] = opt_state.v[name]
        tensors[f"opt/t/{name}"] = np.asarray([opt_state.t[name]], np.float32)
    tensors["meta/step"] = np.asarray([completed_steps], np.float32)
    tensors["meta/opt_step"] = np.asarray([opt_state.step_count], np.float32)
    tensors["meta/dims"] = np.asarray(
        [
            bundle.enc_cfg.vocab_size,
            bundle.enc_cfg.hidden,
            bundle.enc_cfg.layers,
            bundle.pred_cfg.depth,
            bundle.pred_cfg.bottleneck,
            bundle.mask_id,
        ],
        np.float32,
    )
    ad.write_container(path, tensors)


def load_checkpoint(path, enc_cfg, pred_cfg, cfg):
    """Rebuild a ModelBundle plus optimizer state; shape or name mismatches
    are reported with the offending names."""
    tensors = ad.read_container(path)
    dims = tensors.get("meta/dims")
    if dims is None:
        raise DataError(f"{path}: missing meta/dims entry")
    expect = [
        enc_cfg.vocab_size,
        enc_cfg.hidden,
        enc_cfg.layers,
        pred_cfg.depth,
        pred_cfg.bottleneck,
    ]
    if list(dims[:5].astype(int)) != expect:
        raise DataError(
            f"{path}: checkpoint dims {dims[:5].astype(int).tolist()} do not "
            f"match configured {expect}"
        )
    mask_id = int(dims[5])
    bundle = ModelBundle(enc_cfg, pred_cfg, mask_id, seed=0)
    bad = []
    for name, t in bundle.all_params().items():
        arr = tensors.get(name)
        if arr is None or arr.shape != t.data.shape:
            bad.append(name)
        else:
            t.data = arr
    if bad:
        raise DataError(f"{path}: missing or mis-shaped tensors: {', '.join(bad)}")
    opt_state = ad.AdamWState(
        peak_lr=cfg.peak_lr,
        total_steps=cfg.total_steps,
        weight_decay=cfg.weight_decay,
        warmup_frac=cfg.warmup_frac,
    )
    for name, arr in tensors.items():
        if name.startswith("opt/m/"):
            opt_state.m[name[6:]] = arr
        elif name.startswith("opt/v/"):
            opt_state.v[name[6:]] = arr
        elif name.startswith("opt/t/"):
            opt_state.t[name[6:]] = int(arr[0])
    opt_state.step_count = int(tensors["meta/opt_step"][0])
    completed = int(tensors["meta/step"][0])
    return bundle, opt_state, completed


# ---------------------------------------------------------------------------
# the run loop
# ---------------------------------------------------------------------------


def run_training(cfg, data, enc_cfg, pred_cfg, run_dir, resume_from=None):
    """Train per the schedule mode; writes metrics.tsv incrementally plus
    periodic and final step_{k}.ckpt. Returns (final path, metrics list)."""
    os.makedirs(run_dir, exist_ok=True)
    if resume_from is not None:
        bundle, opt_state, start = load_checkpoint(resume_from, enc_cfg, pred_cfg, cfg)
        log_mode = "a"
    else:
        bundle = ModelBundle(enc_cfg, pred_cfg, data.vocab.mask_id, seed=cfg.seed)
        opt_state = ad.AdamWState(
            peak_lr=cfg.peak_lr,
            total_steps=cfg.total_steps,
            weight_decay=cfg.weight_decay,
            warmup_frac=cfg.warmup_frac,
        )
        start = 0
        log_mode = "w"
    metrics = []
    log_path = os.path.join(run_dir, "metrics.tsv")
    with open(log_path, log_mode, encoding="utf-8") as log:
        for step in range(start, cfg.total_steps):
            batch = assemble_batch(data, step, cfg, enc_cfg.max_len)
            rng = np.random.default_rng([cfg.seed, 303, step])
            sm = train_step(
                bundle, batch, cfg, opt_state, rng, jepa_active_at(cfg, step)
            )
            metrics.append(sm)
            log.write(sm.log_line() + "\n")
            log.flush()
            done = step + 1
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                save_checkpoint(
                    os.path.join(run_dir, f"step_{done}.ckpt"), bundle, opt_state, done
                )
    final = os.path.join(run_dir, f"step_{cfg.total_steps}.ckpt")
    save_checkpoint(final, bundle, opt_state, cfg.total_steps)
    return final, metrics
