"""Flat key = value run configuration with dotted namespaces.

Every key has a documented default; unknown keys are rejected. Values in a
config file can be overridden with --key value pairs on the command line,
and the fully resolved configuration is echoed into the run directory.
"""

from .errors import DataError

# key: (default, type, help)
DEFAULTS = {
    "gen.regime": ("chronic", str, "cohort regime: chronic | acute"),
    "gen.n_patients": (1000, int, "patients to simulate"),
    "gen.horizon_days": (0, int, "observation horizon; 0 = regime default"),
    "gen.event_rate": (0.0, float, "mean events/day scale; 0 = regime default"),
    "gen.seed": (0, int, "cohort master seed"),
    "data.numeric_bins": (8, int, "quantile buckets per measurement code"),
    "model.hidden": (64, int, "encoder hidden width d"),
    "model.layers": (2, int, "encoder transformer layers"),
    "model.heads": (4, int, "encoder attention heads"),
    "model.max_len": (256, int, "max serialized sequence length"),
    "model.ff_mult": (4, int, "MLP expansion factor"),
    "pred.depth": (2, int, "predictor transformer layers"),
    "pred.width_mult": (1.0, float, "bottleneck width as multiple of hidden"),
    "pred.heads": (8, int, "predictor attention heads"),
    "train.total_steps": (1200, int, "optimizer steps"),
    "train.batch_size": (8, int, "sequences per step"),
    "train.peak_lr": (3e-3, float, "peak learning rate"),
    "train.seed": (0, int, "training seed: init, batch order, masking"),
    "train.mode": ("hybrid", str, "sft_only | hybrid | curriculum"),
    "train.switch_frac": (0.5, float, "curriculum switch point (fraction of steps)"),
    "train.lambda_sft": (1.0, float, "next-token loss weight"),
    "train.lambda_jepa": (1.0, float, "latent-prediction loss weight"),
    "train.r_m": (0.5, float, "continuation masking ratio"),
    "train.tau": (0.996, float, "momentum-encoder EMA coefficient"),
    "train.horizon_days": (60.0, float, "continuation window for training splits"),
    "train.grad_clip": (1.0, float, "max global grad norm; 0 disables"),
    "train.weight_decay": (0.1, float, "decoupled weight decay"),
    "train.warmup_frac": (0.03, float, "linear warmup fraction"),
    "train.checkpoint_every": (0, int, "periodic checkpoint interval; 0 = final only"),
    "eval.pooling": ("last", str, "snapshot embedding pooling: last | mean"),
    "eval.seed": (0, int, "patient split seed"),
}


def default_config():
    return {k: v[0] for k, v in DEFAULTS.items()}


def _coerce(key, raw):
    default, typ, _ = DEFAULTS[key]
    if typ is bool:
        return raw.lower() in ("1", "true", "yes")
    try:
        return typ(raw)
    except ValueError:
        raise DataError(f"config key {key}: cannot parse {raw!r} as {typ.__name__}")


def load_config(path=None):
    cfg = default_config()
    if path is None:
        return cfg
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected key = value")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in DEFAULTS:
                raise DataError(f"{path}:{lineno}: unknown config key {key!r}")
            cfg[key] = _coerce(key, raw)
    return cfg


def apply_overrides(cfg, pairs):
    """pairs: flat list like ["--train.r_m", "0.25", ...]."""
    if len(pairs) % 2 != 0:
        raise DataError(f"dangling config override near {pairs[-1]!r}")
    for flag, raw in zip(pairs[::2], pairs[1::2]):
        if not flag.startswith("--"):
            raise DataError(f"expected --key value override, got {flag!r}")
        key = flag[2:]
        if key not in DEFAULTS:
            raise DataError(f"unknown config key {key!r}")
        cfg[key] = _coerce(key, raw)
    return cfg


def dump_config(cfg, extra=None):
    lines = [f"{k} = {cfg[k]}" for k in sorted(cfg)]
    if extra:
        lines = [f"# {k}: {v}" for k, v in extra.items()] + lines
    return "\n".join(lines) + "\n"
