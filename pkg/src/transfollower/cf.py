"""Car-following events, model input construction, spacing rollout and the training loss.

Conventions: ``rel_speed = lv_speed - fv_speed`` (positive when the gap opens),
sample interval 0.1 s, and for a trimmed 150-sample event the "current" step is
index 39, so history is samples ``0..39`` and the prediction target ``40..149``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor

DT = 0.1
HISTORY_STEPS = 40
TOKEN_STEPS = 10
HORIZON_STEPS = 110
EVENT_STEPS = HISTORY_STEPS + HORIZON_STEPS
CONSISTENCY_TOL = 1e-6


@dataclass(frozen=True)
class CFState:
    spacing: float
    fv_speed: float
    rel_speed: float

    def __post_init__(self):
        if not self.spacing > 0:
            raise ContractError(f"spacing must be positive, got {self.spacing}")
        if self.fv_speed < 0:
            raise ContractError(f"fv_speed must be non-negative, got {self.fv_speed}")


@dataclass
class CFEvent:
    """One car-following episode sampled every ``dt`` seconds."""

    id: str
    fv_speed: np.ndarray
    lv_speed: np.ndarray
    spacing: np.ndarray
    dt: float = DT
    source: str = "synthetic"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.fv_speed = np.asarray(self.fv_speed, dtype=np.float64)
        self.lv_speed = np.asarray(self.lv_speed, dtype=np.float64)
        self.spacing = np.asarray(self.spacing, dtype=np.float64)
        n = len(self.fv_speed)
        if len(self.lv_speed) != n or len(self.spacing) != n:
            raise ContractError(f"event {self.id}: series lengths differ")

    def __len__(self) -> int:
        return len(self.fv_speed)

    @property
    def rel_speed(self) -> np.ndarray:
        return self.lv_speed - self.fv_speed

    def state(self, t: int) -> CFState:
        return CFState(float(self.spacing[t]), float(self.fv_speed[t]), float(self.rel_speed[t]))

    def violations(self, check_consistency: bool = True) -> list[str]:
        """Human-readable list of broken invariants (empty when the event is valid)."""
        problems = []
        if not np.all(self.spacing > 0):
            problems.append("non-positive spacing")
        if np.any(self.fv_speed < 0) or np.any(self.lv_speed < 0):
            problems.append("negative speed")
        if check_consistency and len(self) > 1:
            dv = self.rel_speed
            gap = np.diff(self.spacing) - (dv[:-1] + dv[1:]) / 2 * self.dt
            if np.max(np.abs(gap)) > CONSISTENCY_TOL:
                problems.append(f"trapezoid inconsistency {np.max(np.abs(gap)):.3g}")
        return problems


@dataclass
class PredictionResult:
    event_id: str
    fv_speed: np.ndarray
    spacing: np.ndarray
    speed_mse: float
    spacing_mse: float
    crashed: bool = False

    @property
    def combined_mse(self) -> float:
        return self.speed_mse + self.spacing_mse


def _require_length(event: CFEvent, n: int = EVENT_STEPS) -> None:
    if len(event) < n:
        raise ContractError(f"event {event.id} has {len(event)} samples, need {n}")


def build_encoder_input(event: CFEvent, history: int = HISTORY_STEPS) -> np.ndarray:
    """History rows ``[spacing, fv_speed, rel_speed]`` for samples ``0..history-1``."""
    _require_length(event, history)
    return np.stack(
        [event.spacing[:history], event.fv_speed[:history], event.rel_speed[:history]], axis=1
    )


def build_decoder_input(
    event: CFEvent,
    history: int = HISTORY_STEPS,
    token: int = TOKEN_STEPS,
    horizon: int = HORIZON_STEPS,
) -> np.ndarray:
    """``[lv_speed, fv_speed]`` over ``history-token .. history+horizon``.

    The FV column keeps the ``token`` known speeds and fills the future with
    their mean as a placeholder.
    """
    _require_length(event, history + horizon)
    start = history - token
    lv = event.lv_speed[start : history + horizon]
    known = event.fv_speed[start:history]
    fv = np.concatenate([known, np.full(horizon, known.mean())])
    return np.stack([lv, fv], axis=1)


def batch_inputs(events: Sequence[CFEvent]) -> tuple[np.ndarray, np.ndarray]:
    enc = np.stack([build_encoder_input(e) for e in events])
    dec = np.stack([build_decoder_input(e) for e in events])
    return enc, dec


def rollout_spacing(s0: float, lv_speed, fv_speed, dt: float = DT) -> np.ndarray:
    """Integrate spacing with the trapezoid rule on relative speed.

    ``out[0] = s0`` and ``out[i+1] = out[i] + (dv[i] + dv[i+1]) / 2 * dt``.
    Negative spacing is returned as is.
    """
    dv = np.asarray(lv_speed, dtype=np.float64) - np.asarray(fv_speed, dtype=np.float64)
    out = np.empty(len(dv))
    if len(dv) == 0:
        return out
    s = float(s0)
    out[0] = s
    for i in range(len(dv) - 1):
        s = s + (dv[i] + dv[i + 1]) / 2 * dt
        out[i + 1] = s
    return out


def rollout_spacing_tensor(s0, dv0, lv_future, fv_future: Tensor, dt: float = DT) -> Tensor:
    """Differentiable rollout of ``len(future)`` steps after a known state.

    ``s0`` and ``dv0`` are the observed spacing and relative speed at the last
    history step (arrays of shape ``(B,)`` or scalars); ``lv_future`` and
    ``fv_future`` cover the following steps. Returns spacing for those steps.
    """
    dv = T.sub(T.as_tensor(lv_future), fv_future)
    dv0 = np.asarray(dv0, dtype=np.float64)[..., None]
    prev = T.concat([T.as_tensor(np.broadcast_to(dv0, dv.shape[:-1] + (1,))), dv[..., :-1]], axis=-1)
    increments = (prev + dv) * (dt / 2)
    return T.add(T.cumsum(increments, axis=-1), np.asarray(s0, dtype=np.float64)[..., None])


def future_targets(events: Sequence[CFEvent], history: int = HISTORY_STEPS, horizon: int = HORIZON_STEPS):
    """Stacked arrays used by the loss: ``(s0, dv0, lv, fv, spacing)`` over the horizon."""
    sl = slice(history, history + horizon)
    s0 = np.array([e.spacing[history - 1] for e in events])
    dv0 = np.array([e.rel_speed[history - 1] for e in events])
    lv = np.stack([e.lv_speed[sl] for e in events])
    fv = np.stack([e.fv_speed[sl] for e in events])
    sp = np.stack([e.spacing[sl] for e in events])
    return s0, dv0, lv, fv, sp


def cf_loss_terms(pred_speed: Tensor, events: Sequence[CFEvent], token: int = TOKEN_STEPS):
    """Per-batch mean speed MSE and spacing MSE tensors for decoder outputs ``B × (token+horizon)``."""
    pred_speed = T.as_tensor(pred_speed)
    horizon = pred_speed.shape[-1] - token
    s0, dv0, lv, fv, sp = future_targets(events, horizon=horizon)
    future = pred_speed[..., token:]
    spacing = rollout_spacing_tensor(s0, dv0, lv, future)
    speed_mse = T.mean(T.square(T.sub(future, fv)))
    spacing_mse = T.mean(T.square(T.sub(spacing, sp)))
    return speed_mse, spacing_mse


def cf_loss(pred_speed, event_or_events, token: int = TOKEN_STEPS) -> Tensor:
    """Speed MSE plus spacing MSE over the horizon; the first ``token`` outputs are ignored.

    Accepts one event with a ``(token+horizon,)`` prediction, or a list of events
    with a ``B × (token+horizon)`` prediction (averaged over the batch).
    """
    pred_speed = T.as_tensor(pred_speed)
    if isinstance(event_or_events, CFEvent):
        events = [event_or_events]
        pred_speed = pred_speed.reshape(1, pred_speed.shape[-1])
    else:
        events = list(event_or_events)
    speed_mse, spacing_mse = cf_loss_terms(pred_speed, events, token)
    return speed_mse + spacing_mse


def score_prediction(event: CFEvent, fv_pred_future, crashed=None,
                     spacing_pred=None, history: int = HISTORY_STEPS) -> PredictionResult:
    """Metrics for a predicted future FV speed series (length = horizon).

    Predicted speeds are clamped at 0 for reporting; the spacing is rolled out
    from the observed state at ``history-1`` unless supplied. Unless given,
    ``crashed`` is set when the rolled-out spacing reaches zero.
    """
    fv_pred = np.maximum(np.asarray(fv_pred_future, dtype=np.float64), 0.0)
    horizon = len(fv_pred)
    sl = slice(history, history + horizon)
    if spacing_pred is None:
        lv = event.lv_speed[history - 1 : history + horizon]
        fv = np.concatenate([[event.fv_speed[history - 1]], fv_pred])
        spacing_pred = rollout_spacing(event.spacing[history - 1], lv, fv, event.dt)[1:]
    if crashed is None:
        crashed = bool(np.any(np.asarray(spacing_pred) <= 0))
    speed_mse = float(np.mean((fv_pred - event.fv_speed[sl]) ** 2)) if horizon else 0.0
    spacing_mse = float(np.mean((spacing_pred - event.spacing[sl]) ** 2)) if horizon else 0.0
    return PredictionResult(event.id, fv_pred, np.asarray(spacing_pred), speed_mse, spacing_mse, crashed)
