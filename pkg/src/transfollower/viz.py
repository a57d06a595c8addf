"""Plot-ready exports: attention matrices, top-k attention lines and trajectories.

Attention CSV layout: the first row is ``query_time\\key_time`` followed by the
key times in seconds; each later row is a query time followed by that row's
weights. Trajectory CSV columns are
``t,observed_speed,predicted_speed,observed_spacing,predicted_spacing``.
All numbers are written with round-trip precision.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .cf import HISTORY_STEPS, CFEvent, PredictionResult, batch_inputs
from .errors import ContractError
from .model import AttentionRecord, TransFollower
from .nn import atomic_write_text

ROW_TOL = 1e-9


@dataclass
class AttentionExport:
    event_id: str
    kind: str
    layer: int
    head: int
    matrix: np.ndarray
    query_times: np.ndarray
    key_times: np.ndarray

    @property
    def filename(self) -> str:
        return f"{self.event_id}_{self.kind}_l{self.layer}_h{self.head}.csv"


@dataclass
class TopKAttention:
    query_time: float
    k: int
    entries: list[tuple[float, float]]  # (key time, weight), weight descending


def export_from_records(event: CFEvent, records: Iterable[AttentionRecord]) -> list[AttentionExport]:
    out = []
    for r in records:
        matrix = np.asarray(r.weights, dtype=np.float64)
        if matrix.ndim != 2:
            raise ContractError("export needs single-event attention records")
        if np.max(np.abs(matrix.sum(axis=1) - 1.0)) > ROW_TOL:
            raise ContractError(f"{r.kind} layer {r.layer} head {r.head} is not row-stochastic")
        out.append(AttentionExport(event.id, r.kind, r.layer, r.head, matrix,
                                   r.query_labels * event.dt, r.key_labels * event.dt))
    return out


def export_attention(model: TransFollower, event: CFEvent) -> list[AttentionExport]:
    """Every attention head of one eval-mode forward pass over ``event``."""
    enc, dec = batch_inputs([event])
    _, records = model.predict(enc[0], dec[0], capture=True)
    return export_from_records(event, records)


def _row(export: AttentionExport, query_time: float) -> int:
    hits = np.flatnonzero(np.abs(export.query_times - query_time) < 1e-6)
    if not len(hits):
        lo, hi = export.query_times[0], export.query_times[-1]
        raise ContractError(f"query time {query_time} s not on the query axis [{lo}, {hi}]")
    return int(hits[0])


def top_k_attention(exports: AttentionExport | Sequence[AttentionExport], query_time: float,
                    k: int) -> TopKAttention:
    """Top-``k`` keys for one query, averaging the weights of all given heads.

    Pass a single export for per-head lines. Ties go to the earlier key.
    """
    if isinstance(exports, AttentionExport):
        exports = [exports]
    if not exports:
        raise ContractError("no attention exports given")
    if k < 1:
        raise ContractError("k must be positive")
    first = exports[0]
    for e in exports[1:]:
        if e.matrix.shape != first.matrix.shape or not np.allclose(e.key_times, first.key_times):
            raise ContractError("heads to average must share their axes")
    row = _row(first, query_time)
    weights = np.mean([e.matrix[row] for e in exports], axis=0)
    order = np.lexsort((np.arange(len(weights)), -weights))[: min(k, len(weights))]
    entries = [(float(first.key_times[j]), float(weights[j])) for j in order]
    return TopKAttention(float(first.query_times[row]), k, entries)


def heads_of(exports: Sequence[AttentionExport], kind: str, layer: int) -> list[AttentionExport]:
    return [e for e in exports if e.kind == kind and e.layer == layer]


# -- csv ------------------------------------------------------------------------------------

def attention_csv(export: AttentionExport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["query_time\\key_time"] + [repr(float(t)) for t in export.key_times])
    for t, row in zip(export.query_times, export.matrix):
        w.writerow([repr(float(t))] + [repr(float(v)) for v in row])
    return buf.getvalue()


def read_attention_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(query_times, key_times, matrix)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    keys = np.array([float(v) for v in rows[0][1:]])
    queries = np.array([float(r[0]) for r in rows[1:]])
    matrix = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return queries, keys, matrix


def top_k_csv(result: TopKAttention) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["query_time", "rank", "key_time", "weight"])
    for rank, (t, weight) in enumerate(result.entries, 1):
        w.writerow([repr(result.query_time), rank, repr(t), repr(weight)])
    return buf.getvalue()


def trajectory_csv(event: CFEvent, result: PredictionResult, history: int = HISTORY_STEPS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "observed_speed", "predicted_speed", "observed_spacing", "predicted_spacing"])
    for i, (v, s) in enumerate(zip(result.fv_speed, result.spacing)):
        j = history + i
        w.writerow([repr(round(j * event.dt, 10)), repr(float(event.fv_speed[j])), repr(float(v)),
                    repr(float(event.spacing[j])), repr(float(s))])
    return buf.getvalue()


def read_trajectory_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols: dict[str, list[float]] = {name: [] for name in reader.fieldnames}
        for row in reader:
            for name, value in row.items():
                cols[name].append(float(value))
    return {name: np.array(values) for name, values in cols.items()}


def write_attention_exports(out_dir, exports: Sequence[AttentionExport],
                            query_times: Sequence[float] = (), k: Optional[int] = None,
                            per_head: bool = False) -> list[Path]:
    """Write one CSV per head plus, for each query time, top-k reports per (kind, layer)."""
    out_dir = Path(out_dir)
    written = []
    for e in exports:
        path = out_dir / e.filename
        atomic_write_text(path, attention_csv(e))
        written.append(path)
    if k is None:
        return written
    groups = sorted({(e.kind, e.layer) for e in exports})
    for kind, layer in groups:
        heads = heads_of(exports, kind, layer)
        for qt in query_times:
            if not np.any(np.abs(heads[0].query_times - qt) < 1e-6):
                continue
            targets = [(f"h{e.head}", e) for e in heads] if per_head else [("mean", heads)]
            for tag, group in targets:
                res = top_k_attention(group, qt, k)
                path = out_dir / f"{heads[0].event_id}_{kind}_l{layer}_{tag}_top{k}_q{qt:g}.csv"
                atomic_write_text(path, top_k_csv(res))
                written.append(path)
    return written
