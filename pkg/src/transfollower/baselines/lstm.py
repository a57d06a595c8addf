"""Stacked-LSTM encoder-decoder baseline.

Gate layout in the packed weight columns is ``[input, forget, candidate, output]``.
A whole layer over a sequence is one autograd node (:func:`lstm_layer`) with a
hand-written backpropagation-through-time; :func:`lstm_cell` builds the same
step from primitive ops and serves as the reference for tests.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .. import tensor as T
from ..errors import ShapeError
from ..nn import Linear, Module, standardize, uniform_init
from ..rng import INIT, make_rng
from ..tensor import Tensor, parameter


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor):
    """One LSTM step composed from primitive ops; returns ``(h_next, c_next)``."""
    n = h.shape[-1]
    z = T.as_tensor(x) @ w_x + T.as_tensor(h) @ w_h + b
    i = T.sigmoid(z[..., 0:n])
    f = T.sigmoid(z[..., n : 2 * n])
    g = T.tanh(z[..., 2 * n : 3 * n])
    o = T.sigmoid(z[..., 3 * n : 4 * n])
    c_next = f * c + i * g
    return o * T.tanh(c_next), c_next


def lstm_layer(x, h0, c0, w_x: Tensor, w_h: Tensor, b: Tensor) -> Tensor:
    """Run one LSTM layer over ``x`` (``B × steps × n_in``).

    Returns a ``B × (steps + 1) × H`` tensor: rows ``0..steps-1`` are the hidden
    outputs and the last row is the final cell state.
    """
    x, h0, c0 = T.as_tensor(x), T.as_tensor(h0), T.as_tensor(c0)
    bsz, steps, n_in = x.shape
    hid = w_h.shape[0]
    if w_x.shape != (n_in, 4 * hid) or w_h.shape != (hid, 4 * hid) or b.shape != (4 * hid,):
        raise ShapeError(f"lstm weights {w_x.shape}, {w_h.shape}, {b.shape} do not fit input {x.shape}")

    xw = (x.data.reshape(-1, n_in) @ w_x.data).reshape(bsz, steps, 4 * hid) + b.data
    gates = np.empty((steps, bsz, 4 * hid))
    cells = np.empty((steps + 1, bsz, hid))
    tanh_c = np.empty((steps, bsz, hid))
    hs = np.empty((steps + 1, bsz, hid))
    hs[0], cells[0] = h0.data, c0.data
    for t in range(steps):
        z = xw[:, t] + hs[t] @ w_h.data
        gt = gates[t]
        gt[:, : 2 * hid] = _sigmoid(z[:, : 2 * hid])
        gt[:, 2 * hid : 3 * hid] = np.tanh(z[:, 2 * hid : 3 * hid])
        gt[:, 3 * hid :] = _sigmoid(z[:, 3 * hid :])
        i, f, g, o = gt[:, :hid], gt[:, hid : 2 * hid], gt[:, 2 * hid : 3 * hid], gt[:, 3 * hid :]
        cells[t + 1] = f * cells[t] + i * g
        tanh_c[t] = np.tanh(cells[t + 1])
        hs[t + 1] = o * tanh_c[t]
    out = np.concatenate([hs[1:].transpose(1, 0, 2), cells[-1][:, None, :]], axis=1)

    def backward(grad):
        dz_all = np.empty((bsz, steps, 4 * hid))
        dw_h = np.zeros_like(w_h.data)
        dh_next = np.zeros((bsz, hid))
        dc_next = grad[:, steps].copy()
        for t in reversed(range(steps)):
            gt = gates[t]
            i, f, g, o = gt[:, :hid], gt[:, hid : 2 * hid], gt[:, 2 * hid : 3 * hid], gt[:, 3 * hid :]
            dh = grad[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tanh_c[t] ** 2)
            dz = dz_all[:, t]
            dz[:, :hid] = dc * g * i * (1.0 - i)
            dz[:, hid : 2 * hid] = dc * cells[t] * f * (1.0 - f)
            dz[:, 2 * hid : 3 * hid] = dc * i * (1.0 - g * g)
            dz[:, 3 * hid :] = dh * tanh_c[t] * o * (1.0 - o)
            dw_h += hs[t].T @ dz
            dh_next = dz @ w_h.data.T
            dc_next = dc * f
        flat = dz_all.reshape(-1, 4 * hid)
        dx = (flat @ w_x.data.T).reshape(x.shape)
        dw_x = x.data.reshape(-1, n_in).T @ flat
        db = flat.sum(axis=0)
        return dx, dh_next, dc_next, dw_x, dw_h, db

    return T._make(out, (x, h0, c0, w_x, w_h, b), backward)


class LSTMLayer(Module):
    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        self.w_x = parameter(uniform_init(rng, n_in, (n_in, 4 * hidden)))
        self.w_h = parameter(uniform_init(rng, hidden, (hidden, 4 * hidden)))
        self.b = parameter(np.zeros(4 * hidden))
        self.hidden = hidden

    def __call__(self, x, h0=None, c0=None):
        """Returns ``(outputs B×steps×H, h_last, c_last)``."""
        bsz, steps = x.shape[0], x.shape[1]
        zeros = np.zeros((bsz, self.hidden))
        packed = lstm_layer(x, zeros if h0 is None else h0, zeros if c0 is None else c0,
                            self.w_x, self.w_h, self.b)
        return packed[:, :steps], packed[:, steps - 1], packed[:, steps]


@dataclass(frozen=True)
class LSTMConfig:
    hidden: int = 256
    layers: int = 4
    dropout: float = 0.4
    enc_input_dim: int = 3
    dec_input_dim: int = 2
    enc_shift: tuple = (0.0, 0.0, 0.0)
    enc_scale: tuple = (1.0, 1.0, 1.0)
    dec_shift: tuple = (0.0, 0.0)
    dec_scale: tuple = (1.0, 1.0)
    out_shift: float = 0.0
    out_scale: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LSTMConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v
                      for k, v in d.items() if k in cls.__dataclass_fields__})


class LSTMBaseline(Module):
    """Encoder and decoder stacks; decoder layer ``l`` starts from encoder layer ``l``'s final state."""

    kind = "lstm"

    def __init__(self, cfg: LSTMConfig | None = None, seed: int = 0):
        self.cfg = cfg = cfg or LSTMConfig()
        rng = make_rng(seed, INIT)
        self.enc_proj = Linear(cfg.enc_input_dim, cfg.hidden, rng)
        self.dec_proj = Linear(cfg.dec_input_dim, cfg.hidden, rng)
        self.encoder = [LSTMLayer(cfg.hidden, cfg.hidden, rng) for _ in range(cfg.layers)]
        self.decoder = [LSTMLayer(cfg.hidden, cfg.hidden, rng) for _ in range(cfg.layers)]
        self.head = Linear(cfg.hidden, 1, rng)

    def _stack(self, layers, x, init, rng):
        finals = []
        for depth, layer in enumerate(layers):
            if depth:
                x = T.dropout(x, self.cfg.dropout, rng, self.training)
            h0, c0 = init[depth] if init else (None, None)
            x, h, c = layer(x, h0, c0)
            finals.append((h, c))
        return x, finals

    def __call__(self, enc_input, dec_input, rng=None) -> Tensor:
        enc_input, dec_input = T.as_tensor(enc_input), T.as_tensor(dec_input)
        batched = dec_input.ndim == 3
        if not batched:
            enc_input = enc_input.reshape(1, *enc_input.shape)
            dec_input = dec_input.reshape(1, *dec_input.shape)
        cfg = self.cfg
        enc_x = self.enc_proj(standardize(enc_input, cfg.enc_shift, cfg.enc_scale))
        dec_x = self.dec_proj(standardize(dec_input, cfg.dec_shift, cfg.dec_scale))
        _, states = self._stack(self.encoder, enc_x, None, rng)
        out, _ = self._stack(self.decoder, dec_x, states, rng)
        pred = self.head(out) * cfg.out_scale + cfg.out_shift
        pred = pred.reshape(pred.shape[:-1])
        return pred if batched else pred.reshape(pred.shape[-1])

    def forward(self, enc_input, dec_input) -> Tensor:
        """``Tensor[p × 1]`` speed column for one event."""
        pred = self(enc_input, dec_input)
        return pred.reshape(*pred.shape, 1)

    def predict(self, enc_input, dec_input, capture: bool = False):
        was_training = self.training
        self.eval()
        try:
            return self(enc_input, dec_input).data, []
        finally:
            self.train(was_training)

    def config_dict(self) -> dict:
        return self.cfg.to_dict()


def lstm_baseline_forward(model: LSTMBaseline, enc_input, dec_input) -> Tensor:
    return model.forward(enc_input, dec_input)
