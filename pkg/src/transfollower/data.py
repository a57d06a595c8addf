"""Event sources: synthetic generation, radar-log extraction, trimming, splitting and file IO.

Event file format (``*.jsonl``)
-------------------------------
Line 1 is a header ``{"format": "transfollower-events", "schema_version": 1}``.
Every following line is one event::

    {"id": str, "dt": float, "source": "synthetic" | "ingested",
     "fv_speed": [...], "lv_speed": [...], "spacing": [...]}

Numbers are written with Python's shortest round-trip repr, so reading a file
back yields bit-identical arrays.

Raw log CSV
-----------
Header ``time,subject_speed,target_id,range,range_rate,lateral_offset``; an
empty ``target_id`` means no lead target. ``range_rate`` follows the radar
convention ``lead speed - subject speed``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .baselines.idm import IDMParams, equilibrium_spacing, idm_step
from .cf import DT, EVENT_STEPS, CFEvent
from .errors import ContractError
from .nn import atomic_write_text
from .rng import SPLIT, SYNTH_EVENT, make_rng

logger = logging.getLogger(__name__)

EVENT_FILE_FORMAT = "transfollower-events"
EVENT_SCHEMA_VERSION = 1
RAW_LOG_HEADER = ["time", "subject_speed", "target_id", "range", "range_rate", "lateral_offset"]
MIN_EVENT_SECONDS = 15.0
MAX_LATERAL = 2.5
SPACING_REJECT = 0.1


class GenerationError(ContractError):
    """Synthetic generation could not produce a collision-free event."""


# -- synthetic data ------------------------------------------------------------------

Range = tuple[float, float]


@dataclass
class SynthConfig:
    """Synthetic dataset recipe: lead-speed profiles and a population of IDM drivers."""

    n_events: int = 2000
    seed: int = 0
    n_samples: int = EVENT_STEPS
    dt: float = DT
    # lead vehicle profile
    lv_base_speed: Range = (3.0, 22.0)
    lv_osc_amplitude: Range = (0.5, 4.0)
    lv_osc_period: Range = (6.0, 30.0)
    lv_walk_std: Range = (0.02, 0.15)
    smoothing_window: int = 9
    # follower population (one driver per event)
    desired_speed: Range = (25.0, 38.0)
    desired_time_headway: Range = (0.6, 2.6)
    max_accel: Range = (0.6, 2.5)
    comfort_decel: Range = (1.0, 3.0)
    jam_spacing: Range = (1.0, 4.5)
    initial_gap_factor: Range = (0.85, 1.15)
    # Gaussian acceleration noise on the follower, m/s^2
    noise_std: float = 0.05
    fixed_driver: Optional[dict] = None
    max_attempts: int = 50

    def __post_init__(self):
        if self.n_events < 0 or self.n_samples < 2:
            raise ContractError("n_events must be >= 0 and n_samples >= 2")
        if self.noise_std < 0:
            raise ContractError("noise_std must be non-negative")
        if self.smoothing_window < 1 or self.max_attempts < 1:
            raise ContractError("smoothing_window and max_attempts must be positive")
        for name in self._range_fields():
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ContractError(f"{name} range must be non-degenerate, got {(lo, hi)}")
            setattr(self, name, (float(lo), float(hi)))

    @staticmethod
    def _range_fields() -> list[str]:
        return ["lv_base_speed", "lv_osc_amplitude", "lv_osc_period", "lv_walk_std",
                "desired_speed", "desired_time_headway", "max_accel", "comfort_decel",
                "jam_spacing", "initial_gap_factor"]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        kwargs = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        for name in cls._range_fields():
            if name in kwargs:
                kwargs[name] = tuple(kwargs[name])
        return cls(**kwargs)


def _uniform(rng, bounds: Range) -> float:
    return float(rng.uniform(bounds[0], bounds[1]))


def _smooth(x: np.ndarray, window: int) -> np.ndarray:
    if window <= 1:
        return x
    pad = window // 2
    padded = np.pad(x, (pad, window - 1 - pad), mode="edge")
    return np.convolve(padded, np.ones(window) / window, mode="valid")


def lead_profile(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Smoothed base + sinusoid + random walk lead speed, clipped at zero."""
    t = np.arange(cfg.n_samples) * cfg.dt
    base = _uniform(rng, cfg.lv_base_speed)
    amp = _uniform(rng, cfg.lv_osc_amplitude)
    period = _uniform(rng, cfg.lv_osc_period)
    phase = rng.uniform(0.0, 2 * np.pi)
    walk = np.cumsum(rng.normal(0.0, _uniform(rng, cfg.lv_walk_std), cfg.n_samples))
    raw = base + amp * np.sin(2 * np.pi * t / period + phase) + walk
    return np.maximum(_smooth(raw, cfg.smoothing_window), 0.0)


def draw_driver(cfg: SynthConfig, rng: np.random.Generator) -> IDMParams:
    if cfg.fixed_driver is not None:
        return IDMParams.from_dict(cfg.fixed_driver)
    return IDMParams(
        desired_speed=_uniform(rng, cfg.desired_speed),
        desired_time_headway=_uniform(rng, cfg.desired_time_headway),
        max_accel=_uniform(rng, cfg.max_accel),
        comfort_decel=_uniform(rng, cfg.comfort_decel),
        jam_spacing=_uniform(rng, cfg.jam_spacing),
    )


def simulate_follower(p: IDMParams, lv: np.ndarray, s_init: float, v_init: float,
                      dt: float, accel_noise: Optional[np.ndarray] = None):
    """Closed-loop follower behind ``lv``; returns ``(fv_speed, spacing)`` including the initial sample."""
    n = len(lv)
    free = p.free_vector()
    fv = np.empty(n)
    sp = np.empty(n)
    s, v = np.array([s_init]), np.array([v_init])
    dv = lv[0] - v
    fv[0], sp[0] = v[0], s[0]
    for i in range(1, n):
        noise = 0.0 if accel_noise is None else accel_noise[i - 1]
        v, dv, s = idm_step(free, p.accel_exponent, s, v, dv, lv[i], dt, noise)
        fv[i], sp[i] = v[0], s[0]
    return fv, sp


def generate_event(cfg: SynthConfig, index: int) -> CFEvent:
    """Event ``index`` of the dataset described by ``cfg``; depends only on ``(cfg, index)``."""
    rng = make_rng(cfg.seed, SYNTH_EVENT, index)
    for attempt in range(cfg.max_attempts):
        driver = draw_driver(cfg, rng)
        lv = lead_profile(cfg, rng)
        v_init = min(lv[0], 0.95 * driver.desired_speed)
        s_init = equilibrium_spacing(driver, v_init) * _uniform(rng, cfg.initial_gap_factor)
        noise = rng.normal(0.0, cfg.noise_std, cfg.n_samples - 1) if cfg.noise_std > 0 else None
        fv, sp = simulate_follower(driver, lv, s_init, v_init, cfg.dt, noise)
        if np.all(sp > SPACING_REJECT):
            return CFEvent(
                id=f"syn{cfg.seed}-{index:06d}", fv_speed=fv, lv_speed=lv, spacing=sp,
                dt=cfg.dt, source="synthetic",
                meta={"driver": driver.to_dict(), "attempts": attempt + 1},
            )
    raise GenerationError(
        f"event {index}: no collision-free event after {cfg.max_attempts} attempts"
    )


def _generate_chunk(args) -> list[CFEvent]:
    cfg, indices = args
    return [generate_event(cfg, i) for i in indices]


def generate_synthetic_dataset(cfg: SynthConfig, workers: int = 1) -> list[CFEvent]:
    """All events for ``cfg``; the output does not depend on ``workers``."""
    indices = list(range(cfg.n_events))
    if workers <= 1 or cfg.n_events < 2:
        return [generate_event(cfg, i) for i in indices]
    chunks = [indices[i::workers] for i in range(workers)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_generate_chunk, [(cfg, c) for c in chunks]))
    by_index = {}
    for chunk, events in zip(chunks, parts):
        by_index.update(zip(chunk, events))
    return [by_index[i] for i in indices]


# -- windowing and splits -----------------------------------------------------------

def trim_event(event: CFEvent, offset: int = 0, length: int = EVENT_STEPS) -> CFEvent:
    """The ``length``-sample window of ``event`` that starts at ``offset``."""
    if offset < 0 or len(event) < offset + length:
        raise ContractError(
            f"event {event.id} has {len(event)} samples, window needs {offset + length}"
        )
    if offset == 0 and len(event) == length:
        return event
    sl = slice(offset, offset + length)
    return CFEvent(
        id=f"{event.id}@{offset}", fv_speed=event.fv_speed[sl].copy(),
        lv_speed=event.lv_speed[sl].copy(), spacing=event.spacing[sl].copy(),
        dt=event.dt, source=event.source, meta=dict(event.meta),
    )


def window_events(events: Iterable[CFEvent], length: int = EVENT_STEPS) -> list[CFEvent]:
    """Cut every event into as many non-overlapping windows as fit."""
    out = []
    for e in events:
        for k in range(len(e) // length):
            out.append(trim_event(e, k * length, length))
    return out


@dataclass
class DatasetSplit:
    train: list[str]
    val: list[str]
    test: list[str]
    seed: int

    def select(self, events: Sequence[CFEvent], part: str) -> list[CFEvent]:
        by_id = {e.id: e for e in events}
        return [by_id[i] for i in getattr(self, part)]

    def to_dict(self) -> dict:
        return asdict(self)


def split_dataset(events: Sequence[CFEvent], seed: int = 0,
                  fractions: tuple[float, float] = (0.70, 0.15)) -> DatasetSplit:
    """Seeded shuffle, then train/val/test in 70/15/15 proportions (test takes the remainder)."""
    n = len(events)
    if n < 10:
        raise ContractError(f"need at least 10 events to split, got {n}")
    ids = [e.id for e in events]
    if len(set(ids)) != n:
        raise ContractError("event ids must be unique")
    order = make_rng(seed, SPLIT).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    shuffled = [ids[i] for i in order]
    return DatasetSplit(shuffled[:n_train], shuffled[n_train : n_train + n_val],
                        shuffled[n_train + n_val :], seed)


# -- radar log extraction ---------------------------------------------------------------

@dataclass(frozen=True)
class RawLogRecord:
    time: float
    subject_speed: float
    target_id: Optional[int]
    range: float
    range_rate: float
    lateral_offset: float


@dataclass
class ExtractionStats:
    records: int = 0
    skipped: int = 0
    runs: int = 0
    events: int = 0
    reasons: dict = field(default_factory=dict)

    def skip(self, reason: str) -> None:
        self.skipped += 1
        self.reasons[reason] = self.reasons.get(reason, 0) + 1


def _malformed(rec: RawLogRecord) -> Optional[str]:
    values = (rec.time, rec.subject_speed, rec.range, rec.range_rate, rec.lateral_offset)
    if not all(math.isfinite(v) for v in values):
        return "non-finite field"
    if rec.subject_speed < 0:
        return "negative subject speed"
    if rec.target_id is not None:
        if rec.range <= 0:
            return "non-positive range"
        if rec.subject_speed + rec.range_rate < 0:
            return "negative lead speed"
    return None


def extract_events(log: Iterable[RawLogRecord], dt: float = DT, prefix: str = "log",
                   stats: Optional[ExtractionStats] = None) -> list[CFEvent]:
    """Maximal runs that follow one target, stay within 2.5 m laterally and last more than 15 s.

    A run's duration is ``samples * dt``. Runs also break at time gaps larger
    than 1.5 sample intervals. Malformed records are skipped and counted.
    """
    stats = stats if stats is not None else ExtractionStats()
    events: list[CFEvent] = []
    run: list[RawLogRecord] = []
    last_time = -math.inf

    def flush():
        if run:
            stats.runs += 1
            duration = round(len(run) * dt, 9)
            if duration > MIN_EVENT_SECONDS:
                fv = np.array([r.subject_speed for r in run])
                rate = np.array([r.range_rate for r in run])
                events.append(CFEvent(
                    id=f"{prefix}-{len(events):05d}", fv_speed=fv, lv_speed=fv + rate,
                    spacing=np.array([r.range for r in run]), dt=dt, source="ingested",
                    meta={"target_id": run[0].target_id, "t0": run[0].time},
                ))
        run.clear()

    for rec in log:
        stats.records += 1
        reason = _malformed(rec)
        if reason is None and rec.time <= last_time:
            reason = "non-increasing timestamp"
        if reason is not None:
            stats.skip(reason)
            continue
        gap = rec.time - last_time
        last_time = rec.time
        following = rec.target_id is not None and abs(rec.lateral_offset) < MAX_LATERAL
        if run and (not following or rec.target_id != run[-1].target_id or gap > 1.5 * dt):
            flush()
        if following:
            run.append(rec)
    flush()
    stats.events = len(events)
    if stats.skipped:
        logger.warning("skipped %d malformed log records: %s", stats.skipped, stats.reasons)
    return events


def event_to_log(event: CFEvent, target_id: int = 1, t0: float = 0.0) -> list[RawLogRecord]:
    """Inverse of extraction for one event (lateral offset 0)."""
    return [
        RawLogRecord(t0 + i * event.dt, float(event.fv_speed[i]), target_id,
                     float(event.spacing[i]), float(event.lv_speed[i] - event.fv_speed[i]), 0.0)
        for i in range(len(event))
    ]


def read_raw_log(path) -> Iterator[RawLogRecord]:
    """Parse a raw-log CSV; rows that do not parse are yielded as NaN records so extraction counts them."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RAW_LOG_HEADER:
            raise ContractError(f"{path}: expected header {','.join(RAW_LOG_HEADER)}")
        for row in reader:
            try:
                tid = row["target_id"].strip()
                yield RawLogRecord(
                    float(row["time"]), float(row["subject_speed"]),
                    int(tid) if tid else None, float(row["range"] or "nan"),
                    float(row["range_rate"] or "nan"), float(row["lateral_offset"] or "nan"),
                )
            except (TypeError, ValueError, AttributeError):
                nan = float("nan")
                yield RawLogRecord(nan, nan, None, nan, nan, nan)


def write_raw_log(path, records: Iterable[RawLogRecord]) -> None:
    lines = [",".join(RAW_LOG_HEADER)]
    for r in records:
        tid = "" if r.target_id is None else str(r.target_id)
        lines.append(f"{r.time!r},{r.subject_speed!r},{tid},{r.range!r},{r.range_rate!r},{r.lateral_offset!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


# -- event files ---------------------------------------------------------------------------

def _event_record(e: CFEvent) -> dict:
    return {
        "id": e.id, "dt": e.dt, "source": e.source,
        "fv_speed": e.fv_speed.tolist(), "lv_speed": e.lv_speed.tolist(),
        "spacing": e.spacing.tolist(), "meta": e.meta,
    }


def dumps_events(events: Iterable[CFEvent]) -> str:
    header = {"format": EVENT_FILE_FORMAT, "schema_version": EVENT_SCHEMA_VERSION}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(_event_record(e), sort_keys=True) for e in events]
    return "\n".join(lines) + "\n"


def save_events(path, events: Iterable[CFEvent]) -> None:
    atomic_write_text(path, dumps_events(events))


def load_events(path) -> list[CFEvent]:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != EVENT_FILE_FORMAT:
            raise ContractError(f"{path}: not an event file")
        if header.get("schema_version") != EVENT_SCHEMA_VERSION:
            raise ContractError(f"{path}: unsupported schema version {header.get('schema_version')}")
        events = []
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            events.append(CFEvent(rec["id"], rec["fv_speed"], rec["lv_speed"], rec["spacing"],
                                  dt=rec["dt"], source=rec["source"], meta=rec.get("meta", {})))
    return events


def save_split(path, split: DatasetSplit) -> None:
    atomic_write_text(path, json.dumps(split.to_dict(), indent=1) + "\n")


def load_split(path) -> DatasetSplit:
    return DatasetSplit(**json.loads(Path(path).read_text()))
