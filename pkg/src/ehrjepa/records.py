"""Longitudinal event records and their delimiter-tagged token serialization.

A patient history is an ordered list of timestamped coded events in eight
clinical categories. Serialization emits one tagged section per event,
<category> ... </category>, in time order; numeric measurement values are
discretized into per-code quantile bucket tokens.
"""

import json
import math
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

CATEGORIES = (
    "demographics",
    "conditions",
    "measurements",
    "observations",
    "procedures",
    "drugs",
    "notes",
    "death",
)
CATEGORY_RANK = {c: i for i, c in enumerate(CATEGORIES)}

PAD_TOKEN = "<pad>"
BOS_TOKEN = "<bos>"
MASK_TOKEN = "<mask>"


@dataclass(frozen=True)
class ClinicalEvent:
    patient_id: str
    time: float
    category: str
    code: str
    value: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "time", float(self.time))
        if self.value is not None:
            object.__setattr__(self, "value", float(self.value))
        if not (math.isfinite(self.time) and self.time >= 0):
            raise DataError(f"event time must be finite and >= 0, got {self.time}")
        if self.category not in CATEGORY_RANK:
            raise DataError(f"unknown category {self.category!r}")

    def sort_key(self):
        return (self.time, CATEGORY_RANK[self.category], self.code)


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    events: tuple
    death_time: float | None = field(init=False, default=None)

    def __post_init__(self):
        ordered = tuple(sorted(self.events, key=ClinicalEvent.sort_key))
        object.__setattr__(self, "events", ordered)
        deaths = [e for e in ordered if e.category == "death"]
        if len(deaths) > 1:
            raise DataError(f"patient {self.patient_id}: multiple death events")
        if deaths:
            dt = deaths[0].time
            if any(e.time > dt for e in ordered):
                raise DataError(
                    f"patient {self.patient_id}: event after death time {dt}"
                )
            object.__setattr__(self, "death_time", dt)


@dataclass
class TokenSequence:
    """Serialized record: ids[0:n] is context, ids[n:] the continuation."""

    ids: np.ndarray
    split_index: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if not 0 < self.split_index <= len(self.ids):
            raise DataError(
                f"split index {self.split_index} invalid for length {len(self.ids)}"
            )

    def __len__(self):
        return len(self.ids)

    @property
    def n(self):
        return self.split_index

    @property
    def m(self):
        return len(self.ids) - self.split_index


class Vocabulary:
    """Dense token<->id bijection with specials, section delimiters, and the
    per-code quantile edges used to bucket measurement values."""

    def __init__(self, tokens, quantile_edges=None, numeric_bins=8):
        self._id_to_token = list(tokens)
        self._token_to_id = {t: i for i, t in enumerate(self._id_to_token)}
        if len(self._token_to_id) != len(self._id_to_token):
            raise DataError("duplicate token in vocabulary")
        self.quantile_edges = {
            k: np.asarray(v, dtype=float) for k, v in (quantile_edges or {}).items()
        }
        self.numeric_bins = numeric_bins
        for special in (PAD_TOKEN, BOS_TOKEN, MASK_TOKEN):
            if special not in self._token_to_id:
                raise DataError(f"vocabulary missing special token {special}")
        for cat in CATEGORIES:
            for tag in (f"<{cat}>", f"</{cat}>"):
                if tag not in self._token_to_id:
                    raise DataError(f"vocabulary missing delimiter {tag}")

    def __len__(self):
        return len(self._id_to_token)

    def __contains__(self, token):
        return token in self._token_to_id

    @property
    def pad_id(self):
        return self._token_to_id[PAD_TOKEN]

    @property
    def bos_id(self):
        return self._token_to_id[BOS_TOKEN]

    @property
    def mask_id(self):
        return self._token_to_id[MASK_TOKEN]

    def encode(self, token):
        try:
            return self._token_to_id[token]
        except KeyError:
            raise DataError(f"unknown token {token!r}") from None

    def decode(self, idx):
        if not 0 <= idx < len(self._id_to_token):
            raise DataError(f"token id {idx} out of range for |V|={len(self)}")
        return self._id_to_token[idx]

    def open_tag(self, category):
        return self.encode(f"<{category}>")

    def close_tag(self, category):
        return self.encode(f"</{category}>")

    def bucket_token(self, code, value):
        edges = self.quantile_edges.get(code)
        if edges is None:
            raise DataError(f"no quantile edges for measurement code {code!r}")
        k = bisect_right(edges.tolist(), value)
        return f"{code}#q{k}"

    def event_token(self, event):
        if event.category == "measurements" and event.value is not None:
            return self.bucket_token(event.code, event.value)
        return event.code

    def measurement_codes(self):
        return sorted(self.quantile_edges)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self._id_to_token:
                fh.write(tok + "\n")
        with open(_edges_path(path), "w", encoding="utf-8") as fh:
            json.dump(
                {
                    "numeric_bins": self.numeric_bins,
                    "edges": {k: v.tolist() for k, v in self.quantile_edges.items()},
                },
                fh,
                indent=1,
                sort_keys=True,
            )

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        edges, bins = {}, 8
        try:
            with open(_edges_path(path), encoding="utf-8") as fh:
                side = json.load(fh)
            edges, bins = side["edges"], side["numeric_bins"]
        except FileNotFoundError:
            pass
        return cls(tokens, edges, bins)


def _edges_path(vocab_path):
    return str(vocab_path) + ".quantiles.json"


def build_vocabulary(records, numeric_bins=8):
    """Vocabulary over every observed code; measurement codes contribute one
    bucket token per quantile bin, with edges estimated from the corpus."""
    records = list(records)
    if not records:
        raise DataError("empty corpus")
    if numeric_bins < 2:
        raise DataError(f"numeric_bins must be >= 2, got {numeric_bins}")
    plain = set()
    meas_values = {}
    for rec in records:
        for ev in rec.events:
            if ev.category == "measurements" and ev.value is not None:
                meas_values.setdefault(ev.code, []).append(ev.value)
            else:
                plain.add(ev.code)
    edges = {}
    tokens = set(plain)
    for code, values in meas_values.items():
        qs = [i / numeric_bins for i in range(1, numeric_bins)]
        edges[code] = np.quantile(np.asarray(values, dtype=float), qs)
        tokens.update(f"{code}#q{k}" for k in range(numeric_bins))
    ordered = [PAD_TOKEN, BOS_TOKEN, MASK_TOKEN]
    for cat in CATEGORIES:
        ordered.extend((f"<{cat}>", f"</{cat}>"))
    ordered.extend(sorted(tokens))
    return Vocabulary(ordered, edges, numeric_bins)


def _sections(events, vocab):
    """One [open, token, close] section per event, in record order."""
    out = []
    for ev in events:
        out.append(
            (
                ev,
                [
                    vocab.open_tag(ev.category),
                    vocab.encode(vocab.event_token(ev)),
                    vocab.close_tag(ev.category),
                ],
            )
        )
    return out


def _truncate(ctx_sections, cont_sections, max_len):
    """Fit 1 (BOS) + context + continuation into max_len tokens.

    Oldest non-demographics context sections go first; demographics are
    global covariates and are always kept. If the continuation alone still
    overflows, its tail sections are dropped as a last resort.
    """
    total = 1 + sum(len(s) for _, s in ctx_sections) + sum(
        len(s) for _, s in cont_sections
    )
    if total <= max_len:
        return ctx_sections, cont_sections
    kept = list(ctx_sections)
    i = 0
    while total > max_len and i < len(kept):
        if kept[i][0].category == "demographics":
            i += 1
            continue
        total -= len(kept[i][1])
        del kept[i]
    cont = list(cont_sections)
    while total > max_len and cont:
        total -= len(cont[-1][1])
        del cont[-1]
    return kept, cont


def serialize_record(record, vocab, upto_time, max_len=None):
    """[BOS] then one tagged section per event with time <= upto_time."""
    if upto_time < 0:
        raise DataError(f"upto_time must be >= 0, got {upto_time}")
    ctx = _sections((e for e in record.events if e.time <= upto_time), vocab)
    if max_len is not None:
        ctx, _ = _truncate(ctx, [], max_len)
    ids = [vocab.bos_id]
    for _, sec in ctx:
        ids.extend(sec)
    return TokenSequence(np.asarray(ids, dtype=np.int64), len(ids))


def split_at_time(record, vocab, t0, horizon, max_len=None):
    """Context = history <= t0; continuation = events in (t0, t0+horizon]."""
    if horizon <= 0:
        raise DataError(f"horizon must be > 0, got {horizon}")
    ctx = _sections((e for e in record.events if e.time <= t0), vocab)
    cont = _sections(
        (e for e in record.events if t0 < e.time <= t0 + horizon), vocab
    )
    if max_len is not None:
        ctx, cont = _truncate(ctx, cont, max_len)
    ids = [vocab.bos_id]
    for _, sec in ctx:
        ids.extend(sec)
    n = len(ids)
    for _, sec in cont:
        ids.extend(sec)
    return TokenSequence(np.asarray(ids, dtype=np.int64), n)


def detokenize(ids, vocab):
    return [vocab.decode(int(i)) for i in ids]


# ---------------------------------------------------------------------------
# event-file format: patient_id<TAB>time<TAB>category<TAB>code<TAB>[value]
# ---------------------------------------------------------------------------


def write_events(path, records):
    # times use shortest round-trip formatting so label-file anchors parsed
    # back from disk compare equal to in-memory trigger times
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            for ev in rec.events:
                base = f"{ev.patient_id}\t{ev.time!r}\t{ev.category}\t{ev.code}"
                if ev.value is not None:
                    fh.write(f"{base}\t{ev.value:.6g}\n")
                else:
                    fh.write(base + "\n")


def read_events(path):
    """Parse an event file into one PatientRecord per patient, in first-seen
    patient order."""
    by_patient = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) not in (4, 5):
                raise DataError(f"{path}:{lineno}: expected 4 or 5 fields")
            pid, time_s, category, code = parts[:4]
            value = float(parts[4]) if len(parts) == 5 and parts[4] != "" else None
            by_patient.setdefault(pid, []).append(
                ClinicalEvent(pid, float(time_s), category, code, value)
            )
    return [PatientRecord(pid, tuple(evs)) for pid, evs in by_patient.items()]
