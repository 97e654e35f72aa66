"""Point-in-time evaluation: snapshots, frozen embeddings, linear probes.

Snapshots are taken at decision-node triggers with three safeguards: a
patient-level 85/15 split, a 24-hour buffer between the anchor and every
label window (enforced when labels are built), and exclusion of snapshots
within seven days of death. Probes are linear only: logistic for binary
outcomes, Cox partial likelihood for survival, both fit by full-batch
gradient ascent with a step-halving line search.
"""

import hashlib
import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DataError
from .model import encoder_forward
from .records import CATEGORIES, serialize_record
from .simulate import emit_trigger_events

DEATH_EXCLUSION_DAYS = 7.0


@dataclass
class Snapshot:
    patient_id: str
    t0: float
    trigger: str
    context: object  # TokenSequence over history <= t0
    labels: dict


@dataclass
class ProbeDataset:
    X: np.ndarray
    y: np.ndarray | None = None
    times: np.ndarray | None = None
    events: np.ndarray | None = None
    split: str = "train"

    def __post_init__(self):
        if self.X.size and np.any(self.X.std(axis=0) == 0):
            warnings.warn("probe design matrix has constant columns", stacklevel=2)


def make_snapshots(records, labels_table, vocab, max_len=None):
    """One snapshot per trigger passing the end-of-life filter; context is
    the serialized history at t0 with no continuation."""
    out = []
    for rec in records:
        for t0, kind in emit_trigger_events(rec):
            if (
                rec.death_time is not None
                and t0 > rec.death_time - DEATH_EXCLUSION_DAYS
            ):
                continue
            key = (rec.patient_id, t0)
            if key not in labels_table:
                raise DataError(
                    f"missing label row for patient {rec.patient_id} at t0={t0}"
                )
            ctx = serialize_record(rec, vocab, t0, max_len)
            out.append(Snapshot(rec.patient_id, t0, kind, ctx, labels_table[key]))
    return out


def patient_split(patient_ids, seed, test_frac=0.15):
    """Deterministic hash-ordered split with |test| = round(test_frac * N)."""
    ids = sorted(set(patient_ids))
    if len(ids) < 20:
        raise DataError(f"need >= 20 patients to split, got {len(ids)}")
    keyed = sorted(
        ids, key=lambda p: hashlib.sha256(f"{seed}:{p}".encode()).hexdigest()
    )
    k = int(round(test_frac * len(ids)))
    test = set(keyed[:k])
    train = set(ids) - test
    return train, test


def extract_embedding(bundle, snapshot, pooling="last"):
    """Frozen online-encoder state for the snapshot context."""
    if len(snapshot.context.ids) < 1:
        raise DataError("empty snapshot context")
    with ad.no_grad():
        h, _ = encoder_forward(bundle.online, snapshot.context.ids, bundle.enc_cfg)
    if pooling == "last":
        return h.data[-1].copy()
    if pooling == "mean":
        return h.data.mean(axis=0)
    raise DataError(f"unknown pooling {pooling!r}")


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------


def _ascend(objective_grad, w0, iters, tol=1e-7):
    """Maximize via gradient ascent with a step-halving line search; the
    objective never decreases between iterations."""
    w = w0.astype(np.float64)
    obj, grad = objective_grad(w)
    step = 1.0
    for _ in range(iters):
        gnorm = np.abs(grad).max()
        if gnorm < tol:
            break
        improved = False
        while step > 1e-12:
            cand = w + step * grad
            cobj, cgrad = objective_grad(cand)
            if cobj > obj:
                w, obj, grad = cand, cobj, cgrad
                step = min(step * 2.0, 1e3)
                improved = True
                break
            step *= 0.5
        if not improved:
            break
    return w, obj


def fit_logistic_probe(X, y, l2=1e-3, iters=500):
    """L2-penalized logistic regression (unpenalized intercept), zero init,
    full-batch ascent. Returns (weights, intercept)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    classes = np.unique(y)
    if len(classes) < 2:
        raise DataError("degenerate labels: only one class in training data")
    n, d = X.shape

    def objective_grad(w):
        beta, b = w[:d], w[d]
        z = X @ beta + b
        # log-likelihood with stable log(sigmoid)
        ll = -(np.logaddexp(0.0, -z) * y + np.logaddexp(0.0, z) * (1 - y)).sum()
        ll -= 0.5 * l2 * (beta @ beta)
        p = _sigmoid_vec(z)
        g = np.concatenate([X.T @ (y - p) - l2 * beta, [np.sum(y - p)]])
        return ll, g

    w, _ = _ascend(objective_grad, np.zeros(d + 1), iters)
    return w[:d], w[d]


def _sigmoid_vec(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logistic_predict(weights, intercept, X):
    return _sigmoid_vec(np.asarray(X, dtype=np.float64) @ weights + intercept)


def cox_partial_loglik(beta, X, times, events, l2=0.0):
    """Breslow partial log-likelihood and its gradient."""
    X = np.asarray(X, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    order = np.argsort(-times, kind="mergesort")  # decreasing time
    Xs, ts, es = X[order], times[order], events[order]
    s = Xs @ beta
    smax = s.max() if len(s) else 0.0
    e = np.exp(s - smax)
    cum_e = np.cumsum(e)
    cum_xe = np.cumsum(Xs * e[:, None], axis=0)
    # risk set of subject i (time t_i) = everyone with t_j >= t_i; with the
    # decreasing sort that is the cumulative prefix through the end of the
    # tie group containing i
    idx = np.empty(len(ts), dtype=np.int64)
    i = 0
    while i < len(ts):
        j = i
        while j + 1 < len(ts) and ts[j + 1] == ts[i]:
            j += 1
        idx[i : j + 1] = j
        i = j + 1
    ll = 0.0
    grad = -l2 * beta
    ll -= 0.5 * l2 * (beta @ beta)
    ev = np.where(es)[0]
    for i in ev:
        r = idx[i]
        denom = cum_e[r]
        ll += s[i] - (math.log(denom) + smax)
        grad += Xs[i] - cum_xe[r] / denom
    return ll, grad


def fit_cox_probe(X, times, events, l2=1e-3, iters=500):
    """Cox proportional-hazards weights by penalized partial-likelihood
    ascent (Breslow ties)."""
    events = np.asarray(events, dtype=bool)
    if events.sum() < 1:
        raise DataError("Cox probe requires at least one uncensored event")
    d = np.asarray(X).shape[1]

    def objective_grad(beta):
        return cox_partial_loglik(beta, X, times, events, l2)

    beta, _ = _ascend(objective_grad, np.zeros(d), iters)
    return beta


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def auc_roc(scores, labels):
    """Rank-based AUC with 0.5 credit for ties; matches pair enumeration
    exactly."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    neg = labels == 0
    n_pos, n_neg = int(pos.sum()), int(neg.sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC requires both classes")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * ((i + 1) + (j + 1))
        i = j + 1
    rank_sum = ranks[pos].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def concordance_index(scores, times, events):
    """Fraction of comparable pairs ranked correctly; the subject with the
    strictly earlier observed event should carry the higher risk score."""
    scores = np.asarray(scores, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    num = 0.0
    comparable = 0
    for i in np.where(events)[0]:
        later = times > times[i]
        comparable += int(later.sum())
        num += (scores[i] > scores[later]).sum()
        num += 0.5 * (scores[i] == scores[later]).sum()
    if comparable == 0:
        raise DataError("no comparable pairs")
    return num / comparable


# ---------------------------------------------------------------------------
# baseline features
# ---------------------------------------------------------------------------


def baseline_bag_of_counts(records, snapshots, vocab):
    """Flattened tabular features per snapshot: per-category event counts in
    the history, the most recent value bucket per measurement code (-1 when
    unobserved), and the anchor time as an age proxy."""
    by_pid = {r.patient_id: r for r in records}
    codes = vocab.measurement_codes()
    rows = []
    for snap in snapshots:
        rec = by_pid[snap.patient_id]
        ctx = [e for e in rec.events if e.time <= snap.t0]
        counts = [float(sum(e.category == c for e in ctx)) for c in CATEGORIES]
        recent = []
        for code in codes:
            vals = [e.value for e in ctx if e.code == code and e.value is not None]
            if vals:
                edges = vocab.quantile_edges[code]
                recent.append(float(np.searchsorted(edges, vals[-1], side="right")))
            else:
                recent.append(-1.0)
        rows.append(counts + recent + [float(snap.t0)])
    return np.asarray(rows, dtype=np.float64)


# ---------------------------------------------------------------------------
# full evaluation
# ---------------------------------------------------------------------------

TASKS = (
    ("progression_within_180d", "progression", "binary"),
    ("toxicity_within_90d", "toxicity", "binary"),
    ("mortality_within_365d", "mortality", "binary"),
    ("survival", "survival", "cox"),
)


def _standardize(train, other):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd[sd == 0] = 1.0
    return (train - mu) / sd, (other - mu) / sd


def evaluate_run(bundle, records, labels_table, vocab, seed, pooling="last", tasks=TASKS):
    """Probe the frozen encoder and the bag-of-counts baseline on every task;
    aggregate AUC by category (mean, population std)."""
    snapshots = make_snapshots(records, labels_table, vocab, bundle.enc_cfg.max_len)
    if not snapshots:
        raise DataError("no snapshots to evaluate")
    train_ids, test_ids = patient_split([s.patient_id for s in snapshots], seed)
    is_test = np.array([s.patient_id in test_ids for s in snapshots])
    emb = np.asarray([extract_embedding(bundle, s, pooling) for s in snapshots])
    base = baseline_bag_of_counts(records, snapshots, vocab)

    results = []  # (category, task, metric, value, n_train, n_test)
    skipped = []
    for name, category, kind in tasks:
        if kind == "binary":
            y = np.array([s.labels[name] for s in snapshots])
            ytr, yte = y[~is_test], y[is_test]
            if len(np.unique(yte)) < 2 or len(np.unique(ytr)) < 2:
                skipped.append((category, name, "degenerate labels"))
                continue
            for tag, X in (("embedding", emb), ("baseline", base)):
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    Xtr, Xte = _standardize(X[~is_test], X[is_test])
                w, b = fit_logistic_probe(Xtr, ytr)
                auc = auc_roc(logistic_predict(w, b, Xte), yte)
                results.append(
                    (category, name, f"auc/{tag}", auc, int((~is_test).sum()), int(is_test.sum()))
                )
        else:
            times = np.array([s.labels["survival_time"] for s in snapshots])
            events = np.array([s.labels["event_indicator"] for s in snapshots], dtype=bool)
            mort = np.array([s.labels["mortality_within_365d"] for s in snapshots])
            if events[~is_test].sum() < 1 or events[is_test].sum() < 1:
                skipped.append((category, name, "no events"))
                continue
            for tag, X in (("embedding", emb), ("baseline", base)):
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    Xtr, Xte = _standardize(X[~is_test], X[is_test])
                beta = fit_cox_probe(Xtr, times[~is_test], events[~is_test])
                risk = Xte @ beta
                ci = concordance_index(risk, times[is_test], events[is_test])
                results.append(
                    (category, name, f"cindex/{tag}", ci, int((~is_test).sum()), int(is_test.sum()))
                )
                # the same risk score doubles as a long-horizon mortality
                # classifier; both views are reported
                if len(np.unique(mort[is_test])) == 2:
                    auc = auc_roc(risk, mort[is_test])
                    results.append(
                        (
                            category,
                            name,
                            f"auc365/{tag}",
                            auc,
                            int((~is_test).sum()),
                            int(is_test.sum()),
                        )
                    )
    return {
        "results": results,
        "skipped": skipped,
        "n_snapshots": len(snapshots),
        "n_train_patients": len(train_ids),
        "n_test_patients": len(test_ids),
        "pooling": pooling,
        "seed": seed,
    }


def summarize_by_category(results, metric_prefix="auc/embedding"):
    """-> {category: (mean, population std, n_tasks)}"""
    by_cat = {}
    for category, _task, metric, value, _ntr, _nte in results:
        if metric == metric_prefix:
            by_cat.setdefault(category, []).append(value)
    return {
        c: (float(np.mean(v)), float(np.std(v)), len(v)) for c, v in by_cat.items()
    }


def write_report(path, report):
    """Text report (one task per line plus category summaries) and a JSON
    mirror next to it."""
    lines = [
        "# point-in-time probe report",
        f"# pooling={report['pooling']} seed={report['seed']} "
        f"snapshots={report['n_snapshots']} "
        f"train_patients={report['n_train_patients']} test_patients={report['n_test_patients']}",
        "# category aggregation uses the population std; survival is reported "
        "as both concordance and a 365d-mortality AUC of the same risk score",
    ]
    for category, task, metric, value, ntr, nte in report["results"]:
        lines.append(f"{category}\t{task}\t{metric}\t{value:.6f}\t{ntr}\t{nte}")
    for category, task, reason in report["skipped"]:
        lines.append(f"{category}\t{task}\tskipped\t{reason}\t-\t-")
    for metric in ("auc/embedding", "auc/baseline"):
        for cat, (mean, std, n) in summarize_by_category(
            report["results"], metric
        ).items():
            lines.append(
                f"summary\t{cat}\t{metric}\t{mean:.6f}±{std:.6f}\tn_tasks={n}\t-"
            )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(
            {
                "header": {
                    k: report[k]
                    for k in (
                        "pooling",
                        "seed",
                        "n_snapshots",
                        "n_train_patients",
                        "n_test_patients",
                    )
                },
                "results": [
                    dict(
                        zip(
                            ("category", "task", "metric", "value", "n_train", "n_test"),
                            row,
                        )
                    )
                    for row in report["results"]
                ],
                "skipped": [
                    dict(zip(("category", "task", "reason"), row))
                    for row in report["skipped"]
                ],
            },
            fh,
            indent=1,
        )
