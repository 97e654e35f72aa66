"""Online causal encoder, bottleneck predictor, momentum encoder, masking.

The online encoder is a pre-LN causal transformer with learned absolute
positions and a tied input/output embedding. The predictor down-projects the
encoder's hidden states to a bottleneck width, runs a small bidirectional
transformer there, up-projects, and layer-normalizes. The momentum encoder is
a gradient-free copy of the online encoder refreshed by EMA after every
optimizer step.

The mask token is the embedding row of the <mask> vocabulary id, so masking
is purely an id substitution and the token vector trains through the normal
embedding gradient.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DataError


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    max_len: int = 256
    ff_mult: int = 4

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise DataError(
                f"hidden {self.hidden} not divisible by heads {self.heads}"
            )


@dataclass(frozen=True)
class PredictorConfig:
    depth: int = 2
    bottleneck: int = 64  # d_b; ablations use {0.5, 1.0, 2.0} x hidden
    heads: int = 8
    ff_mult: int = 4

    def __post_init__(self):
        if self.depth < 1 or self.bottleneck < 1:
            raise DataError("predictor depth and bottleneck must be >= 1")
        if self.bottleneck % self.heads != 0:
            raise DataError(
                f"bottleneck {self.bottleneck} not divisible by heads {self.heads}"
            )


def _normal(rng, shape, std=0.02):
    return rng.normal(0.0, std, size=shape).astype(np.float32)


def init_encoder_params(cfg, rng, trainable=True):
    p = {}

    def add(name, arr):
        p[name] = ad.Tensor(arr, requires_grad=trainable)

    add("tok_emb", _normal(rng, (cfg.vocab_size, cfg.hidden)))
    add("pos_emb", _normal(rng, (cfg.max_len, cfg.hidden)))
    for i in range(cfg.layers):
        pre = f"l{i}."
        add(pre + "ln1.g", np.ones(cfg.hidden, np.float32))
        add(pre + "ln1.b", np.zeros(cfg.hidden, np.float32))
        for w in ("wq", "wk", "wv", "wo"):
            add(pre + "attn." + w, _normal(rng, (cfg.hidden, cfg.hidden)))
        add(pre + "ln2.g", np.ones(cfg.hidden, np.float32))
        add(pre + "ln2.b", np.zeros(cfg.hidden, np.float32))
        ff = cfg.ff_mult * cfg.hidden
        add(pre + "mlp.w1", _normal(rng, (cfg.hidden, ff)))
        add(pre + "mlp.b1", np.zeros(ff, np.float32))
        add(pre + "mlp.w2", _normal(rng, (ff, cfg.hidden)))
        add(pre + "mlp.b2", np.zeros(cfg.hidden, np.float32))
    add("lnf.g", np.ones(cfg.hidden, np.float32))
    add("lnf.b", np.zeros(cfg.hidden, np.float32))
    return p


def init_predictor_params(enc_cfg, cfg, rng):
    d, db = enc_cfg.hidden, cfg.bottleneck
    p = {}

    def add(name, arr):
        p[name] = ad.Tensor(arr, requires_grad=True)

    add("down", _normal(rng, (d, db)))
    for i in range(cfg.depth):
        pre = f"l{i}."
        add(pre + "ln1.g", np.ones(db, np.float32))
        add(pre + "ln1.b", np.zeros(db, np.float32))
        for w in ("wq", "wk", "wv", "wo"):
            add(pre + "attn." + w, _normal(rng, (db, db)))
        add(pre + "ln2.g", np.ones(db, np.float32))
        add(pre + "ln2.b", np.zeros(db, np.float32))
        ff = cfg.ff_mult * db
        add(pre + "mlp.w1", _normal(rng, (db, ff)))
        add(pre + "mlp.b1", np.zeros(ff, np.float32))
        add(pre + "mlp.w2", _normal(rng, (ff, db)))
        add(pre + "mlp.b2", np.zeros(db, np.float32))
    add("up", _normal(rng, (db, d)))
    add("ln_out.g", np.ones(d, np.float32))
    add("ln_out.b", np.zeros(d, np.float32))
    return p


class ModelBundle:
    """Online encoder, EMA momentum copy, predictor, and the mask-token id."""

    def __init__(self, enc_cfg, pred_cfg, mask_id, seed=0):
        self.enc_cfg = enc_cfg
        self.pred_cfg = pred_cfg
        self.mask_id = mask_id
        rng = np.random.default_rng([seed, 0xE])
        self.online = init_encoder_params(enc_cfg, rng, trainable=True)
        self.momentum = {
            name: ad.Tensor(t.data.copy(), requires_grad=False)
            for name, t in self.online.items()
        }
        self.predictor = init_predictor_params(
            enc_cfg, pred_cfg, np.random.default_rng([seed, 0xF])
        )

    @property
    def mask_token(self):
        return self.online["tok_emb"].data[self.mask_id]

    def trainable(self, include_predictor=True):
        named = {f"online.{k}": t for k, t in self.online.items()}
        if include_predictor:
            named.update({f"pred.{k}": t for k, t in self.predictor.items()})
        return named

    def all_params(self):
        out = {f"online.{k}": t for k, t in self.online.items()}
        out.update({f"momentum.{k}": t for k, t in self.momentum.items()})
        out.update({f"pred.{k}": t for k, t in self.predictor.items()})
        return out


def _block(params, prefix, x, heads, causal):
    h = ad.layer_norm(x, params[prefix + "ln1.g"], params[prefix + "ln1.b"])
    q = ad.matmul(h, params[prefix + "attn.wq"])
    k = ad.matmul(h, params[prefix + "attn.wk"])
    v = ad.matmul(h, params[prefix + "attn.wv"])
    a = ad.multihead_attention(q, k, v, heads, causal)
    x = ad.add(x, ad.matmul(a, params[prefix + "attn.wo"]))
    h = ad.layer_norm(x, params[prefix + "ln2.g"], params[prefix + "ln2.b"])
    h = ad.gelu(ad.add(ad.matmul(h, params[prefix + "mlp.w1"]), params[prefix + "mlp.b1"]))
    h = ad.add(ad.matmul(h, params[prefix + "mlp.w2"]), params[prefix + "mlp.b2"])
    return ad.add(x, h)


def encoder_forward(params, ids, cfg):
    """-> (final hidden states H (T, d), logits (T, |V|) via the tied
    embedding)."""
    ids = np.asarray(ids, dtype=np.int64)
    T = len(ids)
    if T > cfg.max_len:
        raise DataError(f"sequence length {T} exceeds max {cfg.max_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise DataError(f"token id out of range for |V|={cfg.vocab_size}")
    tok = ad.take_rows(params["tok_emb"], ids)
    pos = ad.take_rows(params["pos_emb"], np.arange(T))
    x = ad.add(tok, pos)
    for i in range(cfg.layers):
        x = _block(params, f"l{i}.", x, cfg.heads, causal=True)
    h = ad.layer_norm(x, params["lnf.g"], params["lnf.b"])
    logits = ad.matmul(h, ad.transpose(params["tok_emb"]))
    return h, logits


def apply_mask(seq, r_m, rng, mask_id):
    """Mask round-half-up(r_m * m) continuation positions (at least one),
    drawn without replacement; context positions are never touched."""
    m = seq.m
    if m < 1:
        raise DataError("no continuation to mask")
    if not 0 < r_m <= 1:
        raise DataError(f"masking ratio must be in (0, 1], got {r_m}")
    n_mask = max(1, int(np.floor(r_m * m + 0.5)))
    offsets = rng.choice(m, size=n_mask, replace=False)
    positions = np.sort(seq.n + offsets)
    masked = seq.ids.copy()
    masked[positions] = mask_id
    return masked, positions


def predictor_forward(params, h_online, mask_positions, enc_cfg, pred_cfg):
    """Bottleneck transformer over the full masked-sequence representation;
    returns predicted embeddings for the masked rows."""
    if params["down"].shape != (enc_cfg.hidden, pred_cfg.bottleneck):
        raise DataError(
            f"predictor bottleneck mismatch: weights {params['down'].shape}, "
            f"config ({enc_cfg.hidden}, {pred_cfg.bottleneck})"
        )
    x = ad.matmul(h_online, params["down"])
    for i in range(pred_cfg.depth):
        x = _block(params, f"l{i}.", x, pred_cfg.heads, causal=False)
    up = ad.matmul(x, params["up"])
    out = ad.layer_norm(up, params["ln_out.g"], params["ln_out.b"])
    return ad.take_rows(out, mask_positions)


def momentum_forward(params, ids, cfg):
    """Target embeddings from the EMA encoder; no gradients are recorded."""
    with ad.no_grad():
        h, _ = encoder_forward(params, ids, cfg)
    return h


def ema_update(momentum_params, online_params, tau):
    """theta_bar <- tau * theta_bar + (1 - tau) * theta, every encoder
    parameter exactly once."""
    if momentum_params.keys() != online_params.keys():
        raise DataError("momentum/online parameter names differ")
    if not 0.0 <= tau <= 1.0:
        raise DataError(f"tau must be in [0, 1], got {tau}")
    tau = float(tau)
    for name, mom in momentum_params.items():
        onl = online_params[name]
        if mom.shape != onl.shape:
            raise DataError(f"shape mismatch for {name}: {mom.shape} vs {onl.shape}")
        mom.data = tau * mom.data + (1.0 - tau) * onl.data
