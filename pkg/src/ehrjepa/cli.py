"""Command-line entry points: generate, ingest, train, eval, ablate,
gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
Run directories are self-describing: the resolved configuration, package
version, kernel backend, and seeds are echoed into config.txt.
"""

import argparse
import itertools
import os
import sys

import numpy as np

from . import __version__
from .config import DEFAULTS, apply_overrides, default_config, dump_config, load_config
from .errors import DataError, NumericalAbort
from .evaluate import evaluate_run, summarize_by_category, write_report
from .gradcheck import run_gradcheck
from .kernels import BACKEND
from .model import EncoderConfig, PredictorConfig
from .records import Vocabulary, build_vocabulary, read_events, write_events
from .simulate import build_label_rows, config_for_regime, generate_cohort, read_labels, write_labels
from .training import TrainConfig, load_checkpoint, prepare_training_data, run_training


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise UsageError(message)


def _run_root(path):
    root = os.environ.get("EHRJEPA_RUN_ROOT")
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _require_files(*paths):
    missing = [p for p in paths if p and not os.path.exists(p)]
    if missing:
        raise DataError(f"missing input files: {', '.join(missing)}")


def _gen_config(cfg):
    overrides = {"n_patients": cfg["gen.n_patients"], "seed": cfg["gen.seed"]}
    if cfg["gen.horizon_days"]:
        overrides["horizon_days"] = cfg["gen.horizon_days"]
    if cfg["gen.event_rate"]:
        overrides["event_rate"] = cfg["gen.event_rate"]
    return config_for_regime(cfg["gen.regime"], **overrides)


def _enc_config(cfg, vocab_size):
    return EncoderConfig(
        vocab_size=vocab_size,
        hidden=cfg["model.hidden"],
        layers=cfg["model.layers"],
        heads=cfg["model.heads"],
        max_len=cfg["model.max_len"],
        ff_mult=cfg["model.ff_mult"],
    )


def _pred_config(cfg):
    return PredictorConfig(
        depth=cfg["pred.depth"],
        bottleneck=int(round(cfg["pred.width_mult"] * cfg["model.hidden"])),
        heads=cfg["pred.heads"],
    )


def _train_config(cfg):
    return TrainConfig(
        total_steps=cfg["train.total_steps"],
        batch_size=cfg["train.batch_size"],
        peak_lr=cfg["train.peak_lr"],
        seed=cfg["train.seed"],
        mode=cfg["train.mode"],
        switch_frac=cfg["train.switch_frac"],
        lambda_sft=cfg["train.lambda_sft"],
        lambda_jepa=cfg["train.lambda_jepa"],
        r_m=cfg["train.r_m"],
        tau=cfg["train.tau"],
        horizon_days=cfg["train.horizon_days"],
        grad_clip=cfg["train.grad_clip"],
        weight_decay=cfg["train.weight_decay"],
        warmup_frac=cfg["train.warmup_frac"],
        checkpoint_every=cfg["train.checkpoint_every"],
    )


def _resolved(args, extra_pairs):
    cfg = load_config(args.config)
    return apply_overrides(cfg, extra_pairs)


def _echo_config(path, cfg):
    meta = {"version": __version__, "kernels": BACKEND}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg, meta))


def cmd_generate(args, extra):
    cfg = _resolved(args, extra)
    if args.regime:
        cfg["gen.regime"] = args.regime
    if args.patients:
        cfg["gen.n_patients"] = args.patients
    if args.seed is not None:
        cfg["gen.seed"] = args.seed
    if cfg["gen.regime"] not in ("chronic", "acute"):
        raise UsageError(f"invalid regime {cfg['gen.regime']!r}")
    out = _run_root(args.out)
    os.makedirs(out, exist_ok=True)
    gcfg = _gen_config(cfg)
    records, latents = generate_cohort(gcfg)
    write_events(os.path.join(out, "events.tsv"), records)
    write_labels(
        os.path.join(out, "labels.tsv"), build_label_rows(records, gcfg.horizon_days)
    )
    if args.write_latents:
        with open(os.path.join(out, "latents.tsv"), "w", encoding="utf-8") as fh:
            for pid, lat in latents.items():
                for day, (sev, vel, res) in enumerate(lat):
                    fh.write(f"{pid}\t{day}\t{sev:.6g}\t{vel:.6g}\t{res:.6g}\n")
    _echo_config(os.path.join(out, "config.txt"), cfg)
    print(f"wrote {len(records)} patients to {out}")
    return 0


def cmd_ingest(args, extra):
    cfg = _resolved(args, extra)
    _require_files(args.events)
    records = read_events(args.events)
    vocab = build_vocabulary(records, cfg["data.numeric_bins"])
    vocab.save(args.vocab)
    print(f"wrote vocabulary of {len(vocab)} tokens to {args.vocab}")
    return 0


def cmd_train(args, extra):
    cfg = _resolved(args, extra)
    if args.mode:
        cfg["train.mode"] = args.mode
    if args.switch is not None:
        cfg["train.switch_frac"] = args.switch
    secondary = args.secondary_events if args.datasets == "primary+secondary" else None
    if args.datasets == "primary+secondary" and not args.secondary_events:
        raise UsageError("--datasets primary+secondary requires --secondary-events")
    _require_files(args.events, args.vocab, secondary)
    run_dir = _run_root(args.run_dir)
    if os.path.exists(os.path.join(run_dir, "metrics.tsv")) and not args.overwrite:
        raise DataError(
            f"run directory {run_dir} already holds a run; pass --overwrite to replace"
        )
    os.makedirs(run_dir, exist_ok=True)
    vocab = Vocabulary.load(args.vocab)
    cohorts = [read_events(args.events)]
    if secondary:
        cohorts.append(read_events(secondary))
    tcfg = _train_config(cfg)
    data = prepare_training_data(cohorts, vocab, tcfg.horizon_days)
    enc_cfg = _enc_config(cfg, len(vocab))
    pred_cfg = _pred_config(cfg)
    _echo_config(os.path.join(run_dir, "config.txt"), cfg)
    final, metrics = run_training(
        tcfg, data, enc_cfg, pred_cfg, run_dir, resume_from=args.resume
    )
    print(f"trained {len(metrics)} steps; final checkpoint {final}")
    return 0


def _load_eval_bundle(args, cfg):
    _require_files(args.checkpoint, args.events, args.labels, args.vocab)
    run_cfg_path = os.path.join(os.path.dirname(args.checkpoint), "config.txt")
    if args.config is None and os.path.exists(run_cfg_path):
        cfg = apply_overrides(load_config(run_cfg_path), [])
    vocab = Vocabulary.load(args.vocab)
    enc_cfg = _enc_config(cfg, len(vocab))
    pred_cfg = _pred_config(cfg)
    bundle, _, _ = load_checkpoint(args.checkpoint, enc_cfg, pred_cfg, _train_config(cfg))
    return cfg, vocab, bundle


def cmd_eval(args, extra):
    cfg = _resolved(args, extra)
    cfg, vocab, bundle = _load_eval_bundle(args, cfg)
    if args.pooling:
        cfg["eval.pooling"] = args.pooling
    records = read_events(args.events)
    labels = read_labels(args.labels)
    out = _run_root(args.out)
    os.makedirs(out, exist_ok=True)
    report = evaluate_run(
        bundle, records, labels, vocab, cfg["eval.seed"], cfg["eval.pooling"]
    )
    write_report(os.path.join(out, "report.tsv"), report)
    _echo_config(os.path.join(out, "eval_config.txt"), cfg)
    print(f"wrote report for {report['n_snapshots']} snapshots to {out}")
    return 0


def _parse_grid(specs):
    axes = []
    for spec in specs:
        if "=" not in spec:
            raise UsageError(f"grid spec {spec!r} must be key=v1,v2,...")
        key, raw = spec.split("=", 1)
        key = key.strip()
        if key not in DEFAULTS:
            raise UsageError(f"unknown grid key {key!r}")
        values = [v.strip() for v in raw.split(",") if v.strip()]
        if not values:
            raise UsageError(f"grid axis {key} has no values")
        axes.append((key, values))
    return axes


def cmd_ablate(args, extra):
    base_cfg = _resolved(args, extra)
    if not args.grid:
        raise UsageError("ablate requires at least one --grid axis")
    axes = _parse_grid(args.grid)
    _require_files(args.events, args.vocab, args.labels)
    out = _run_root(args.out)
    os.makedirs(out, exist_ok=True)
    vocab = Vocabulary.load(args.vocab)
    records = read_events(args.events)
    labels = read_labels(args.labels)
    keys = [k for k, _ in axes]
    rows = []
    for i, combo in enumerate(itertools.product(*(vals for _, vals in axes))):
        cfg = dict(base_cfg)
        apply_overrides(cfg, [x for k, v in zip(keys, combo) for x in (f"--{k}", v)])
        cell = os.path.join(out, f"cell_{i:03d}_" + "_".join(
            f"{k.split('.')[-1]}={v}" for k, v in zip(keys, combo)
        ))
        try:
            tcfg = _train_config(cfg)
            data = prepare_training_data([records], vocab, tcfg.horizon_days)
            enc_cfg = _enc_config(cfg, len(vocab))
            pred_cfg = _pred_config(cfg)
            os.makedirs(cell, exist_ok=True)
            _echo_config(os.path.join(cell, "config.txt"), cfg)
            final, _ = run_training(tcfg, data, enc_cfg, pred_cfg, cell)
            bundle, _, _ = load_checkpoint(final, enc_cfg, pred_cfg, tcfg)
            report = evaluate_run(
                bundle, records, labels, vocab, cfg["eval.seed"], cfg["eval.pooling"]
            )
            write_report(os.path.join(cell, "report.tsv"), report)
            cats = summarize_by_category(report["results"], "auc/embedding")
            aucs = [m for m, _s, _n in cats.values()]
            rows.append(list(combo) + [f"{float(np.mean(aucs)):.6f}", "ok"])
        except (DataError, NumericalAbort) as exc:
            rows.append(list(combo) + ["nan", f"failed: {exc}"])
    summary = os.path.join(out, "summary.tsv")
    with open(summary, "w", encoding="utf-8") as fh:
        fh.write("\t".join(keys + ["mean_auc", "status"]) + "\n")
        for row in rows:
            fh.write("\t".join(str(x) for x in row) + "\n")
    print(f"wrote {len(rows)}-cell ablation summary to {summary}")
    return 0


def cmd_gradcheck(args, extra):
    results = run_gradcheck()
    failed = False
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:28s} max_rel_err={r.max_rel_err:.3e} tol={r.tolerance:.0e} {status}")
        failed |= not r.passed
    if failed:
        raise NumericalAbort(0, "gradient check failed")
    return 0


def build_parser():
    parser = _Parser(prog="ehrjepa", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate a cohort and write event/label files")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--regime")
    p.add_argument("--patients", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--write-latents", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("ingest", help="build a vocabulary from an event file")
    p.add_argument("--events", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train a model on ingested cohorts")
    p.add_argument("--events", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--secondary-events")
    p.add_argument("--datasets", choices=("primary", "primary+secondary"), default="primary")
    p.add_argument("--mode", choices=("sft_only", "hybrid", "curriculum"))
    p.add_argument("--switch", type=float)
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("--resume")
    p.add_argument("--config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="point-in-time probe evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pooling", choices=("last", "mean"))
    p.add_argument("--config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train+eval over a config grid")
    p.add_argument("--events", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", action="append", default=[])
    p.add_argument("--config")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        return args.func(args, extra)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
