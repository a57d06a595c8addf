"""Position-wise feedforward baseline: sees only the decoder input, no history."""

from __future__ import annotations

from dataclasses import asdict, dataclass

from .. import tensor as T
from ..nn import Linear, Module, standardize
from ..rng import INIT, make_rng


@dataclass(frozen=True)
class FeedForwardConfig:
    hidden: int = 256
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
    def from_dict(cls, d: dict) -> "FeedForwardConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v
                      for k, v in d.items() if k in cls.__dataclass_fields__})


class FeedForwardBaseline(Module):
    """2 → hidden → hidden → 1 applied independently at every decoder position."""

    kind = "nn"

    def __init__(self, cfg: FeedForwardConfig | None = None, seed: int = 0):
        self.cfg = cfg = cfg or FeedForwardConfig()
        rng = make_rng(seed, INIT)
        self.layer1 = Linear(cfg.dec_input_dim, cfg.hidden, rng)
        self.layer2 = Linear(cfg.hidden, cfg.hidden, rng)
        self.layer3 = Linear(cfg.hidden, 1, rng)

    def forward(self, dec_input) -> T.Tensor:
        """``… × p × 2`` → ``… × p × 1``."""
        x = standardize(T.as_tensor(dec_input), self.cfg.dec_shift, self.cfg.dec_scale)
        h = T.relu(self.layer1(x))
        h = T.relu(self.layer2(h))
        return self.layer3(h) * self.cfg.out_scale + self.cfg.out_shift

    def __call__(self, enc_input, dec_input, rng=None) -> T.Tensor:
        out = self.forward(dec_input)
        return out.reshape(out.shape[:-1])

    def predict(self, enc_input, dec_input, capture: bool = False):
        return self(enc_input, dec_input).data, []

    def config_dict(self) -> dict:
        return self.cfg.to_dict()


def nn_baseline_forward(model: FeedForwardBaseline, dec_input) -> T.Tensor:
    return model.forward(dec_input)

