"""Module containers, the linear layer, and the checkpoint archive format.

Checkpoint format (``*.ckpt``, version 1)
-----------------------------------------
A zip archive (stored, no compression, fixed timestamps so identical contents
give identical bytes) holding:

* ``manifest.json``  ``{"format": "transfollower-checkpoint", "version": 1,
  "kind": <model kind>, "config": {...}, "params": [{"name", "shape"}, ...],
  "meta": {...}}``
* ``params/<name>.f64``  raw little-endian float64 payload, row-major, one entry
  per parameter in manifest order.
"""

from __future__ import annotations

import io
import json
import os
import tempfile
import zipfile
from pathlib import Path
from typing import Any, Iterator, Optional

import numpy as np

from .errors import ContractError
from .tensor import Tensor, parameter

CHECKPOINT_FORMAT = "transfollower-checkpoint"
CHECKPOINT_VERSION = 1
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class Module:
    """Base class: parameters are discovered from attributes in sorted-name order."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key in sorted(vars(self)):
            value = vars(self)[key]
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ContractError(f"state mismatch; missing={missing} unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ContractError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def uniform_init(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """``y = x @ W + b`` with ``W`` stored as ``in × out``."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = parameter(uniform_init(rng, n_in, (n_in, n_out)))
        self.bias = parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


def standardize(x: Tensor, shift, scale) -> Tensor:
    """``(x - shift) / scale`` with constant (non-learned) per-column statistics."""
    shift = np.asarray(shift, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    if np.all(shift == 0.0) and np.all(scale == 1.0):
        return x
    return (x - shift) * (1.0 / scale)


# -- checkpoints ------------------------------------------------------------------

def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _zip_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def checkpoint_bytes(
    state: dict[str, np.ndarray], kind: str, config: dict[str, Any], meta: Optional[dict] = None
) -> bytes:
    names = sorted(state)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": config,
        "params": [{"name": n, "shape": list(state[n].shape)} for n in names],
        "meta": meta or {},
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _zip_entry(zf, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode())
        for n in names:
            payload = np.ascontiguousarray(state[n], dtype="<f8").tobytes()
            _zip_entry(zf, f"params/{n}.f64", payload)
    return buf.getvalue()


def save_checkpoint(path, state, kind: str, config: dict, meta: Optional[dict] = None) -> None:
    atomic_write_bytes(path, checkpoint_bytes(state, kind, config, meta))


def load_checkpoint(path) -> tuple[str, dict, dict[str, np.ndarray], dict]:
    """Return ``(kind, config, state, meta)`` from a checkpoint archive."""
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ContractError(f"{path}: not a checkpoint archive")
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise ContractError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
        state = {}
        for entry in manifest["params"]:
            raw = zf.read(f"params/{entry['name']}.f64")
            state[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).copy()
    return manifest["kind"], manifest["config"], state, manifest.get("meta", {})
