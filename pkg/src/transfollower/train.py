"""Adam, the minibatch training loop with validation model selection, and evaluation.

Run directory layout written by :func:`train_model` when ``run_dir`` is given::

    config.json    model kind, model config, train config, split sizes
    curve.csv      epoch,train_mse,val_mse
    best.ckpt      checkpoint of the best-validation epoch (see ``nn`` for format)
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .baselines.feedforward import FeedForwardBaseline, FeedForwardConfig
from .baselines.idm import IDMParams, simulate_idm
from .baselines.lstm import LSTMBaseline, LSTMConfig
from .cf import (
    HISTORY_STEPS,
    TOKEN_STEPS,
    CFEvent,
    PredictionResult,
    batch_inputs,
    cf_loss,
    score_prediction,
)
from .errors import ContractError, DivergenceError
from .model import ModelConfig, TransFollower
from .nn import Module, atomic_write_bytes, atomic_write_text, checkpoint_bytes, load_checkpoint, save_checkpoint
from .rng import DROPOUT, SHUFFLE, make_rng

logger = logging.getLogger(__name__)

# Test-set combined MSE reported for the real-world naturalistic dataset; documentation only.
PUBLISHED_TEST_MSE = {"transfollower": 8.07, "idm": 22.5, "lstm": 31.8, "nn": 50.6}

EVAL_CHUNK = 64


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: Optional[float] = 5.0
    workers: int = 1
    standardize: bool = True
    lr_schedule: str = "constant"  # or "cosine": anneal to 0 over max_epochs

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ContractError("lr, batch_size, max_epochs and patience must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ContractError(f"unknown lr_schedule {self.lr_schedule!r}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during ``epoch`` (1-based)."""
        if self.lr_schedule == "constant":
            return self.lr
        return 0.5 * self.lr * (1.0 + np.cos(np.pi * (epoch - 1) / self.max_epochs))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


# -- optimizer ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[T.Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[T.Tensor], state: AdamState, cfg: TrainConfig,
              names: Optional[Sequence[str]] = None, lr: Optional[float] = None) -> None:
    """One bias-corrected Adam update using each parameter's ``grad``."""
    for k, p in enumerate(params):
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            label = names[k] if names else (p.name or f"#{k}")
            raise DivergenceError(f"non-finite gradient in parameter {label}")
    lr = cfg.lr if lr is None else lr
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def clip_grad_norm(params: Sequence[T.Tensor], max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None)))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


def fit_standardization(events: Sequence[CFEvent]) -> dict:
    """Per-channel mean/std of the encoder and decoder inputs and of the FV speed target."""
    enc, dec = batch_inputs(events)
    target = np.stack([e.fv_speed[HISTORY_STEPS:] for e in events])

    def stats(x):
        flat = x.reshape(-1, x.shape[-1])
        std = flat.std(axis=0)
        return [float(v) for v in flat.mean(axis=0)], [float(v) if v > 1e-6 else 1.0 for v in std]

    enc_shift, enc_scale = stats(enc)
    dec_shift, dec_scale = stats(dec)
    out_std = float(target.std())
    return {"enc_shift": enc_shift, "enc_scale": enc_scale, "dec_shift": dec_shift,
            "dec_scale": dec_scale, "out_shift": float(target.mean()),
            "out_scale": out_std if out_std > 1e-6 else 1.0}


# -- models ---------------------------------------------------------------------------------

MODEL_KINDS = ("transfollower", "nn", "lstm")


def build_model(kind: str, config: Optional[dict] = None, seed: int = 0) -> Module:
    config = config or {}
    if kind == "transfollower":
        return TransFollower(ModelConfig.from_dict(config), seed=seed)
    if kind == "nn":
        return FeedForwardBaseline(FeedForwardConfig.from_dict(config), seed=seed)
    if kind == "lstm":
        return LSTMBaseline(LSTMConfig.from_dict(config), seed=seed)
    raise ContractError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def load_model(path) -> Module:
    kind, config, state, meta = load_checkpoint(path)
    model = build_model(kind, config, seed=int(meta.get("seed", 0)))
    model.load_state_dict(state)
    return model.eval()


# -- evaluation -------------------------------------------------------------------------------

@dataclass
class EvalReport:
    model: str
    combined_mse: float
    speed_mse: float
    spacing_mse: float
    crashes: int
    results: list[PredictionResult] = field(default_factory=list, repr=False)

    @classmethod
    def from_results(cls, model: str, results: Sequence[PredictionResult]) -> "EvalReport":
        results = list(results)
        if not results:
            return cls(model, 0.0, 0.0, 0.0, 0, [])
        speed = float(np.mean([r.speed_mse for r in results]))
        spacing = float(np.mean([r.spacing_mse for r in results]))
        combined = float(np.mean([r.combined_mse for r in results]))
        return cls(model, combined, speed, spacing, sum(r.crashed for r in results), results)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "n_events": len(self.results),
            "combined_mse": self.combined_mse,
            "speed_mse": self.speed_mse,
            "spacing_mse": self.spacing_mse,
            "crashes": self.crashes,
            "per_event": [
                {"id": r.event_id, "combined_mse": r.combined_mse, "speed_mse": r.speed_mse,
                 "spacing_mse": r.spacing_mse, "crashed": r.crashed}
                for r in self.results
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"


Predictor = Callable[[Sequence[CFEvent]], np.ndarray]


def neural_predictor(model: Module) -> Predictor:
    """Future FV speeds (``B × horizon``) from a network in eval mode."""

    def predict(events):
        enc, dec = batch_inputs(events)
        pred, _ = model.predict(enc, dec)
        return pred[:, TOKEN_STEPS:]

    return predict


def constant_velocity_predictor(events: Sequence[CFEvent]) -> np.ndarray:
    """Hold the last observed FV speed over the whole horizon."""
    return np.stack([np.full(len(e) - HISTORY_STEPS, e.fv_speed[HISTORY_STEPS - 1]) for e in events])


def ground_truth_predictor(events: Sequence[CFEvent]) -> np.ndarray:
    return np.stack([e.fv_speed[HISTORY_STEPS:] for e in events])


def evaluate_predictor(name: str, predictor: Predictor, events: Sequence[CFEvent],
                       workers: int = 1, chunk: int = EVAL_CHUNK) -> EvalReport:
    """Score a predictor; chunks are fixed-size, so ``workers`` never changes the numbers."""
    events = list(events)
    chunks = [events[i : i + chunk] for i in range(0, len(events), chunk)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            preds = list(pool.map(predictor, chunks))
    else:
        preds = [predictor(c) for c in chunks]
    results = [score_prediction(e, p) for c, ps in zip(chunks, preds) for e, p in zip(c, ps)]
    return EvalReport.from_results(name, results)


def evaluate_idm(params: IDMParams, events: Sequence[CFEvent]) -> EvalReport:
    return EvalReport.from_results("idm", [simulate_idm(params, e) for e in events])


def evaluate(model_or_path, events: Sequence[CFEvent], workers: int = 1) -> EvalReport:
    """Evaluate a trained network, a checkpoint path, or calibrated IDM parameters."""
    if isinstance(model_or_path, IDMParams):
        return evaluate_idm(model_or_path, events)
    model = model_or_path if isinstance(model_or_path, Module) else load_model(model_or_path)
    return evaluate_predictor(model.kind, neural_predictor(model), events, workers)


# -- training ------------------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Module
    curve: list[tuple[int, float, float]]
    best_epoch: int
    best_val: float
    checkpoint: bytes
    stopped_early: bool = False
    diverged: bool = False

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_mse", "val_mse"])
        for row in self.curve:
            w.writerow([row[0], repr(row[1]), repr(row[2])])
        return buf.getvalue()


def _checkpoint(model: Module, seed: int, epoch: int, val: float) -> bytes:
    return checkpoint_bytes(model.state_dict(), model.kind, model.config_dict(),
                            {"seed": seed, "epoch": epoch, "val_mse": val})


def train_model(kind: str, train_events: Sequence[CFEvent], val_events: Sequence[CFEvent],
                cfg: Optional[TrainConfig] = None, model_config: Optional[dict] = None,
                run_dir=None, log_every: int = 1) -> TrainResult:
    """Minibatch Adam on the masked car-following loss with validation early stopping.

    The returned model carries the weights of the epoch with the lowest
    validation combined MSE.
    """
    cfg = cfg or TrainConfig()
    if not train_events or not val_events:
        raise ContractError("training needs non-empty train and validation sets")
    model_config = dict(model_config or {})
    if cfg.standardize:
        for key, value in fit_standardization(train_events).items():
            model_config.setdefault(key, value)
    model = build_model(kind, model_config, seed=cfg.seed)
    params = model.parameters()
    names = [n for n, _ in model.named_parameters()]
    state = AdamState.for_params(params)
    train_events = list(train_events)
    enc_all, dec_all = batch_inputs(train_events)

    run_path = Path(run_dir) if run_dir is not None else None
    if run_path is not None:
        run_path.mkdir(parents=True, exist_ok=True)
        snapshot = {"model": kind, "model_config": model.config_dict(), "train_config": cfg.to_dict(),
                    "n_train": len(train_events), "n_val": len(val_events)}
        atomic_write_text(run_path / "config.json", json.dumps(snapshot, indent=2) + "\n")

    curve: list[tuple[int, float, float]] = []
    best_val, best_epoch = np.inf, -1
    best_ckpt = _checkpoint(model, cfg.seed, -1, float("nan"))
    best_state = model.state_dict()
    stale = 0
    stopped_early = diverged = False
    for epoch in range(1, cfg.max_epochs + 1):
        started = time.perf_counter()
        model.train()
        order = make_rng(cfg.seed, SHUFFLE, epoch).permutation(len(train_events))
        drop_rng = make_rng(cfg.seed, DROPOUT, epoch)
        lr = cfg.lr_at(epoch)
        total, count = 0.0, 0
        try:
            for lo in range(0, len(order), cfg.batch_size):
                idx = order[lo : lo + cfg.batch_size]
                batch = [train_events[i] for i in idx]
                pred = model(enc_all[idx], dec_all[idx], drop_rng)
                loss = cf_loss(pred, batch)
                if not np.isfinite(loss.item()):
                    raise DivergenceError(f"non-finite training loss at epoch {epoch}")
                model.zero_grad()
                loss.backward()
                if cfg.clip_norm is not None:
                    clip_grad_norm(params, cfg.clip_norm)
                adam_step(params, state, cfg, names, lr)
                total += loss.item() * len(idx)
                count += len(idx)
            val = evaluate_predictor(kind, neural_predictor(model), val_events, cfg.workers).combined_mse
            if not np.isfinite(val):
                raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        except DivergenceError:
            diverged = True
            logger.error("training diverged at epoch %d; keeping epoch %d", epoch, best_epoch)
            if run_path is not None:
                atomic_write_bytes(run_path / "best.ckpt", best_ckpt)
            model.load_state_dict(best_state)
            raise
        train_mse = total / count
        curve.append((epoch, train_mse, val))
        if val < best_val:
            best_val, best_epoch, stale = val, epoch, 0
            best_state = model.state_dict()
            best_ckpt = _checkpoint(model, cfg.seed, epoch, val)
        else:
            stale += 1
        if log_every and epoch % log_every == 0:
            logger.info("%s epoch %d train %.4f val %.4f (%.1fs)", kind, epoch, train_mse, val,
                        time.perf_counter() - started)
        if run_path is not None:
            atomic_write_text(run_path / "curve.csv", TrainResult(model, curve, 0, 0, b"").curve_csv())
            if best_epoch == epoch:
                atomic_write_bytes(run_path / "best.ckpt", best_ckpt)
        if stale >= cfg.patience:
            stopped_early = True
            break

    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, curve, best_epoch, float(best_val), best_ckpt, stopped_early, diverged)


def save_train_result(result: TrainResult, run_dir) -> None:
    run_path = Path(run_dir)
    run_path.mkdir(parents=True, exist_ok=True)
    atomic_write_text(run_path / "curve.csv", result.curve_csv())
    atomic_write_bytes(run_path / "best.ckpt", result.checkpoint)


__all__ = [
    "AdamState", "EvalReport", "MODEL_KINDS", "PUBLISHED_TEST_MSE", "TrainConfig", "TrainResult",
    "adam_step", "build_model", "clip_grad_norm", "constant_velocity_predictor", "evaluate",
    "evaluate_idm", "evaluate_predictor", "fit_standardization", "ground_truth_predictor", "load_model",
    "neural_predictor", "save_checkpoint", "save_train_result", "train_model",
]
