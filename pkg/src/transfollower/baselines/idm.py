"""Intelligent driver model: acceleration law and closed-loop event simulation.

The law is the standard one::

    a_idm = a * (1 - (v / v0)**delta - (s_star / s)**2)
    s_star = s0 + max(0, v * T + v * dv_approach / (2 * sqrt(a * b)))

where ``dv_approach = v_fv - v_lv`` is positive while closing in. Elsewhere
in the package relative speed is ``v_lv - v_fv``; :func:`approach_rate` is
the only place that flips the sign.

The simulation core is vectorized so one call can roll out many parameter sets
over many events; the single-event API runs through the same code, which keeps
both paths bit-identical.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from ..cf import CFEvent, CFState, HISTORY_STEPS, HORIZON_STEPS, PredictionResult, score_prediction
from ..errors import ContractError
from ..nn import atomic_write_text

CRASH_FLOOR = 0.01

# (name, lower, upper); delta is fixed and not calibrated.
BOUNDS: tuple[tuple[str, float, float], ...] = (
    ("desired_speed", 1.0, 42.0),
    ("desired_time_headway", 0.1, 5.0),
    ("max_accel", 0.1, 6.0),
    ("comfort_decel", 0.1, 6.0),
    ("jam_spacing", 0.1, 10.0),
)
LOWER = np.array([b[1] for b in BOUNDS])
UPPER = np.array([b[2] for b in BOUNDS])


@dataclass(frozen=True)
class IDMParams:
    desired_speed: float = 33.3
    desired_time_headway: float = 1.5
    max_accel: float = 1.0
    comfort_decel: float = 1.5
    jam_spacing: float = 2.0
    accel_exponent: float = 4.0

    def __post_init__(self):
        for (name, lo, hi), value in zip(BOUNDS, self.free_vector()):
            if not lo <= value <= hi:
                raise ContractError(f"{name}={value} outside [{lo}, {hi}]")

    def free_vector(self) -> np.ndarray:
        return np.array([getattr(self, name) for name, _, _ in BOUNDS])

    @classmethod
    def from_vector(cls, vec, accel_exponent: float = 4.0) -> "IDMParams":
        return cls(*(float(x) for x in vec), accel_exponent=accel_exponent)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "IDMParams":
        return cls(**{f.name: float(d[f.name]) for f in fields(cls) if f.name in d})

    def save(self, path, meta: Optional[dict] = None) -> None:
        doc = {"format": "transfollower-idm-params", "version": 1, "params": self.to_dict()}
        if meta:
            doc["meta"] = meta
        atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "IDMParams":
        with open(path) as fh:
            doc = json.load(fh)
        return cls.from_dict(doc["params"])


def approach_rate(state: CFState) -> float:
    """Closing speed ``v_fv - v_lv`` from a state that stores ``v_lv - v_fv``."""
    return -state.rel_speed


def idm_accel_array(free, delta, spacing, speed, approach):
    """Vectorized IDM law. ``free`` has the five bounded parameters on its last axis."""
    free = np.asarray(free, dtype=np.float64)
    v0, th, a, b, s0 = (free[..., i] for i in range(5))
    s_star = s0 + np.maximum(0.0, speed * th + speed * approach / (2.0 * np.sqrt(a * b)))
    return a * (1.0 - np.power(speed / v0, delta) - np.square(s_star / spacing))


def idm_acceleration(p: IDMParams, state: CFState) -> float:
    if not state.spacing > 0:
        raise ContractError(f"IDM needs positive spacing, got {state.spacing}")
    out = idm_accel_array(p.free_vector(), p.accel_exponent, np.array([state.spacing]),
                          np.array([state.fv_speed]), np.array([approach_rate(state)]))
    return float(out[0])


def equilibrium_spacing(p: IDMParams, speed: float) -> float:
    """Spacing at which a follower at constant ``speed`` behind an equal-speed leader has zero acceleration."""
    if speed >= p.desired_speed:
        raise ContractError("no equilibrium at or above the desired speed")
    return (p.jam_spacing + speed * p.desired_time_headway) / np.sqrt(
        1.0 - (speed / p.desired_speed) ** p.accel_exponent
    )


def idm_step(free, delta, spacing, speed, rel_speed, lv_next, dt, accel_noise=0.0):
    """Advance one step; returns ``(speed, rel_speed, spacing)`` after the update.

    Speed is floored at zero, spacing follows the trapezoid rule on relative speed.
    """
    acc = idm_accel_array(free, delta, spacing, speed, -rel_speed) + accel_noise
    v_next = np.maximum(0.0, speed + acc * dt)
    dv_next = lv_next - v_next
    s_next = spacing + (rel_speed + dv_next) / 2.0 * dt
    return v_next, dv_next, s_next


def simulate_arrays(free, delta, s_init, v_init, dv_init, lv_future, dt):
    """Closed-loop rollout for broadcastable parameter sets and events.

    ``lv_future`` has time on its last axis. Returns ``(speed, spacing, crashed)``
    with the same time axis; spacing that collapses is floored at
    :data:`CRASH_FLOOR` and the run is flagged.
    """
    free = np.asarray(free, dtype=np.float64)
    lv_future = np.asarray(lv_future, dtype=np.float64)
    steps = lv_future.shape[-1]
    shape = np.broadcast_shapes(free.shape[:-1], lv_future.shape[:-1])
    s = np.broadcast_to(np.asarray(s_init, dtype=np.float64), shape).copy()
    v = np.broadcast_to(np.asarray(v_init, dtype=np.float64), shape).copy()
    dv = np.broadcast_to(np.asarray(dv_init, dtype=np.float64), shape).copy()
    speeds = np.empty(shape + (steps,))
    spacings = np.empty(shape + (steps,))
    crashed = np.zeros(shape, dtype=bool)
    for i in range(steps):
        v, dv, s = idm_step(free, delta, s, v, dv, lv_future[..., i], dt)
        hit = s <= 0.0
        if hit.any():
            crashed |= hit
            s = np.where(hit, CRASH_FLOOR, s)
        speeds[..., i] = v
        spacings[..., i] = s
    return speeds, spacings, crashed


def _event_arrays(events: Sequence[CFEvent], history: int, horizon: int):
    sl = slice(history, history + horizon)
    s0 = np.array([e.spacing[history - 1] for e in events])
    v0 = np.array([e.fv_speed[history - 1] for e in events])
    dv0 = np.array([e.rel_speed[history - 1] for e in events])
    lv = np.stack([e.lv_speed[sl] for e in events]) if events else np.empty((0, horizon))
    return s0, v0, dv0, lv


class EventBatch:
    """Pre-stacked arrays for fast repeated IDM evaluation over a fixed event set."""

    def __init__(self, events: Sequence[CFEvent], history: int = HISTORY_STEPS,
                 horizon: int = HORIZON_STEPS):
        if not events:
            raise ContractError("EventBatch needs at least one event")
        for e in events:
            if len(e) < history + horizon:
                raise ContractError(f"event {e.id} shorter than {history + horizon} samples")
        self.dt = events[0].dt
        self.s0, self.v0, self.dv0, self.lv = _event_arrays(events, history, horizon)
        sl = slice(history, history + horizon)
        self.fv_obs = np.stack([e.fv_speed[sl] for e in events])
        self.spacing_obs = np.stack([e.spacing[sl] for e in events])

    def __len__(self) -> int:
        return len(self.s0)

    def per_event_mse(self, population, delta: float = 4.0) -> np.ndarray:
        """Combined (speed + spacing) MSE per event, shape ``population.shape[:-1] + (n_events,)``."""
        pop = np.asarray(population, dtype=np.float64)[..., None, :]
        speeds, spacings, _ = simulate_arrays(pop, delta, self.s0, self.v0, self.dv0, self.lv, self.dt)
        speed_mse = np.mean(np.square(speeds - self.fv_obs), axis=-1)
        spacing_mse = np.mean(np.square(spacings - self.spacing_obs), axis=-1)
        return speed_mse + spacing_mse

    def mean_mse(self, population, delta: float = 4.0) -> np.ndarray:
        return self.per_event_mse(population, delta).mean(axis=-1)


def simulate_idm(p: IDMParams, event: CFEvent, history: int = HISTORY_STEPS,
                 horizon: int = HORIZON_STEPS) -> PredictionResult:
    """Roll the IDM forward from the observed state at ``history-1`` for ``horizon`` steps."""
    if horizon == 0:
        return PredictionResult(event.id, np.empty(0), np.empty(0), 0.0, 0.0, False)
    if len(event) < history + horizon:
        raise ContractError(f"event {event.id} shorter than {history + horizon} samples")
    s0, v0, dv0, lv = _event_arrays([event], history, horizon)
    speeds, spacings, crashed = simulate_arrays(
        p.free_vector(), p.accel_exponent, s0, v0, dv0, lv, event.dt
    )
    return score_prediction(event, speeds[0], crashed=bool(crashed[0]),
                            spacing_pred=spacings[0], history=history)
