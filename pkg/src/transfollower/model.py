"""Transformer encoder-decoder car-following predictor.

The encoder reads 40 steps of ``[spacing, fv_speed, rel_speed]`` history; the
decoder reads 120 steps of ``[lv_speed, fv_speed-or-placeholder]`` and emits one
FV speed per step in a single (non-autoregressive) pass. Nothing is masked.

All forward methods accept either one event (``p × c``) or a batch
(``B × p × c``); attention weights are captured only when requested.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ContractError
from .nn import Linear, Module, standardize, uniform_init
from .rng import INIT, make_rng
from .tensor import Tensor, parameter

ENCODER_SELF = "encoder_self"
DECODER_SELF = "decoder_self"
CROSS = "cross"


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 256
    n_heads: int = 8
    encoder_layers: int = 2
    decoder_layers: int = 1
    ff_dim: int = 1024
    dropout: float = 0.1
    pos_table_size: int = 150
    enc_input_dim: int = 3
    dec_input_dim: int = 2
    history_steps: int = 40
    token_steps: int = 10
    horizon_steps: int = 110
    dt: float = 0.1
    # fixed affine maps: inputs become (raw - shift) / scale, outputs head * scale + shift
    enc_shift: tuple = (0.0, 0.0, 0.0)
    enc_scale: tuple = (1.0, 1.0, 1.0)
    dec_shift: tuple = (0.0, 0.0)
    dec_scale: tuple = (1.0, 1.0)
    out_shift: float = 0.0
    out_scale: float = 1.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.token_steps + self.horizon_steps > self.pos_table_size:
            raise ContractError("token_steps + horizon_steps exceeds pos_table_size")
        if self.history_steps > self.pos_table_size:
            raise ContractError("history_steps exceeds pos_table_size")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def decoder_steps(self) -> int:
        return self.token_steps + self.horizon_steps

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: tuple(v) if isinstance(v, list) else v
                 for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class AttentionRecord:
    """One head's attention matrix.

    ``weights`` is ``q_len × k_len`` for a single event, or ``B × q_len × k_len``
    when the forward pass was batched. Labels are sample indices in the event.
    """

    kind: str
    layer: int
    head: int
    weights: np.ndarray
    query_labels: np.ndarray
    key_labels: np.ndarray


@dataclass
class EncoderState:
    hidden: Tensor
    records: list[AttentionRecord] = field(default_factory=list)


class ScalarLayerNorm(Module):
    """Layer norm whose gain and shift are single learnable scalars."""

    def __init__(self, eps: float = 1e-5):
        self.gamma = parameter(np.ones(1))
        self.beta = parameter(np.zeros(1))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with per-head projections packed column-wise.

    Head ``h`` uses columns ``h*k:(h+1)*k`` of the query/key/value matrices and
    rows ``h*k:(h+1)*k`` of the output matrix, which makes the packed product
    identical to summing each head's output projection.
    """

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.w_q = parameter(uniform_init(rng, d_model, (d_model, d_model)))
        self.w_k = parameter(uniform_init(rng, d_model, (d_model, d_model)))
        self.w_v = parameter(uniform_init(rng, d_model, (d_model, d_model)))
        self.w_c = parameter(uniform_init(rng, d_model, (d_model, d_model)))

    def _split(self, x: Tensor) -> Tensor:
        b, p, _ = x.shape
        return x.reshape(b, p, self.n_heads, self.head_dim).transpose(0, 2, 1, 3)

    def __call__(self, q_src: Tensor, kv_src: Tensor) -> tuple[Tensor, np.ndarray]:
        """Return the mixed output ``B × p_q × d`` and weights ``B × H × p_q × p_k``."""
        q = self._split(q_src @ self.w_q)
        k = self._split(kv_src @ self.w_k)
        v = self._split(kv_src @ self.w_v)
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(self.head_dim))
        alpha = T.softmax(scores, axis=-1)
        ctx = alpha @ v
        b, _, p, _ = ctx.shape
        merged = ctx.transpose(0, 2, 1, 3).reshape(b, p, self.n_heads * self.head_dim)
        return merged @ self.w_c, alpha.data


class FeedForward(Module):
    def __init__(self, d_model: int, ff_dim: int, rng: np.random.Generator):
        self.w1 = parameter(uniform_init(rng, d_model, (d_model, ff_dim)))
        self.w2 = parameter(uniform_init(rng, ff_dim, (ff_dim, d_model)))

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(x @ self.w1) @ self.w2


class EncoderBlock(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.norm1 = ScalarLayerNorm()
        self.ff = FeedForward(cfg.d_model, cfg.ff_dim, rng)
        self.norm2 = ScalarLayerNorm()
        self.p_drop = cfg.dropout

    def __call__(self, x: Tensor, rng=None) -> tuple[Tensor, np.ndarray]:
        a, alpha = self.attn(x, x)
        u = self.norm1(x + T.dropout(a, self.p_drop, rng, self.training))
        z = self.norm2(u + T.dropout(self.ff(u), self.p_drop, rng, self.training))
        return z, alpha


class DecoderBlock(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.norm1 = ScalarLayerNorm()
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.norm2 = ScalarLayerNorm()
        self.ff = FeedForward(cfg.d_model, cfg.ff_dim, rng)
        self.norm3 = ScalarLayerNorm()
        self.p_drop = cfg.dropout

    def __call__(self, x: Tensor, memory: Tensor, rng=None):
        a, self_alpha = self.self_attn(x, x)
        u = self.norm1(x + T.dropout(a, self.p_drop, rng, self.training))
        c, cross_alpha = self.cross_attn(u, memory)
        w = self.norm2(u + T.dropout(c, self.p_drop, rng, self.training))
        z = self.norm3(w + T.dropout(self.ff(w), self.p_drop, rng, self.training))
        return z, self_alpha, cross_alpha


def _records(kind, layer, alpha, batched, q_labels, k_labels) -> list[AttentionRecord]:
    out = []
    for h in range(alpha.shape[1]):
        w = alpha[:, h] if batched else alpha[0, h]
        out.append(AttentionRecord(kind, layer, h, w.copy(), q_labels, k_labels))
    return out


class TransFollower(Module):
    """Encoder-decoder speed predictor; see module docstring for the data flow."""

    kind = "transfollower"

    def __init__(self, cfg: Optional[ModelConfig] = None, seed: int = 0):
        self.cfg = cfg = cfg or ModelConfig()
        rng = make_rng(seed, INIT)
        d = cfg.d_model
        self.enc_proj = Linear(cfg.enc_input_dim, d, rng)
        self.enc_pos = parameter(uniform_init(rng, d, (cfg.pos_table_size, d)))
        self.dec_proj = Linear(cfg.dec_input_dim, d, rng)
        self.dec_pos = parameter(uniform_init(rng, d, (cfg.pos_table_size, d)))
        self.encoder = [EncoderBlock(cfg, rng) for _ in range(cfg.encoder_layers)]
        self.decoder = [DecoderBlock(cfg, rng) for _ in range(cfg.decoder_layers)]
        self.head = Linear(d, 1, rng)

    def embed_inputs(self, raw, positions, which: str) -> Tensor:
        """Project raw rows to ``d_model`` and add the positional row for each position."""
        raw = T.as_tensor(raw)
        proj, table = {
            "encoder": (self.enc_proj, self.enc_pos),
            "decoder": (self.dec_proj, self.dec_pos),
        }[which]
        if raw.shape[-1] != proj.weight.shape[0]:
            raise ContractError(
                f"{which} input has {raw.shape[-1]} columns, expected {proj.weight.shape[0]}"
            )
        positions = np.asarray(positions)
        if len(positions) != raw.shape[-2]:
            raise ContractError("one position index is needed per input row")
        shift, scale = {
            "encoder": (self.cfg.enc_shift, self.cfg.enc_scale),
            "decoder": (self.cfg.dec_shift, self.cfg.dec_scale),
        }[which]
        return proj(standardize(raw, shift, scale)) + T.embedding(table, positions)

    def encode(self, enc_input, rng=None, capture: bool = False) -> EncoderState:
        enc_input = T.as_tensor(enc_input)
        batched = enc_input.ndim == 3
        x = enc_input if batched else enc_input.reshape(1, *enc_input.shape)
        p = self.cfg.history_steps
        if x.shape[1] != p:
            raise ContractError(f"encoder input needs {p} steps, got {x.shape[1]}")
        h = self.embed_inputs(x, np.arange(p), "encoder")
        records: list[AttentionRecord] = []
        labels = np.arange(p)
        for i, block in enumerate(self.encoder):
            h, alpha = block(h, rng)
            if capture:
                records += _records(ENCODER_SELF, i, alpha, batched, labels, labels)
        return EncoderState(h if batched else h.reshape(p, self.cfg.d_model), records)

    def decode(self, dec_input, enc: EncoderState, rng=None, capture: bool = False):
        """Return ``(speed prediction, attention records)``.

        The prediction covers all ``token_steps + horizon_steps`` decoder
        positions; the first ``token_steps`` entries are not supervised.
        """
        dec_input = T.as_tensor(dec_input)
        batched = dec_input.ndim == 3
        x = dec_input if batched else dec_input.reshape(1, *dec_input.shape)
        n = self.cfg.decoder_steps
        if x.shape[1] != n:
            raise ContractError(f"decoder input needs {n} steps, got {x.shape[1]}")
        memory = enc.hidden if enc.hidden.ndim == 3 else enc.hidden.reshape(1, *enc.hidden.shape)
        if memory.shape[0] != x.shape[0] or memory.shape[2] != self.cfg.d_model:
            raise ContractError(
                f"encoder state {memory.shape} does not match decoder batch {x.shape}"
            )
        h = self.embed_inputs(x, np.arange(n), "decoder")
        start = self.cfg.history_steps - self.cfg.token_steps
        q_labels = np.arange(start, start + n)
        k_labels = np.arange(memory.shape[1])
        records: list[AttentionRecord] = []
        for i, block in enumerate(self.decoder):
            h, self_alpha, cross_alpha = block(h, memory, rng)
            if capture:
                records += _records(DECODER_SELF, i, self_alpha, batched, q_labels, q_labels)
                records += _records(CROSS, i, cross_alpha, batched, q_labels, k_labels)
        out = self.head(h) * self.cfg.out_scale + self.cfg.out_shift
        out = out.reshape(x.shape[0], n)
        return (out if batched else out.reshape(n)), records

    def __call__(self, enc_input, dec_input, rng=None) -> Tensor:
        return self.decode(dec_input, self.encode(enc_input, rng), rng)[0]

    def predict(self, enc_input, dec_input, capture: bool = False):
        """Eval-mode forward returning ``(speed array, records)``; leaves training flag as found."""
        was_training = self.training
        self.eval()
        try:
            enc = self.encode(enc_input, capture=capture)
            pred, dec_records = self.decode(dec_input, enc, capture=capture)
        finally:
            self.train(was_training)
        return pred.data, enc.records + dec_records

    def config_dict(self) -> dict:
        return self.cfg.to_dict()
