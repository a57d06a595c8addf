import io
import json
import zipfile

import numpy as np
import pytest

from transfollower.errors import ContractError
from transfollower.model import ModelConfig, TransFollower
from transfollower.nn import (
    Linear,
    Module,
    atomic_write_text,
    checkpoint_bytes,
    load_checkpoint,
    save_checkpoint,
    standardize,
)
from transfollower.rng import make_rng
from transfollower.tensor import Tensor
from transfollower.train import load_model

TOY = ModelConfig(d_model=8, n_heads=2, ff_dim=16, pos_table_size=8, history_steps=5, token_steps=2,
                  horizon_steps=4)


def test_linear_init_bounds_and_zero_bias():
    layer = Linear(16, 4, make_rng(0))
    assert np.all(np.abs(layer.weight.data) <= 0.25)
    np.testing.assert_array_equal(layer.bias.data, 0.0)
    assert Linear(2, 3, make_rng(0), bias=False).bias is None


def test_named_parameters_are_stable_and_nested():
    model = TransFollower(TOY)
    names = [n for n, _ in model.named_parameters()]
    assert len(set(names)) == len(names)
    assert "encoder.1.attn.w_q" in names and "decoder.0.norm3.gamma" in names
    assert model.num_parameters() == sum(p.size for p in model.parameters())


def test_train_eval_propagates():
    model = TransFollower(TOY)
    model.eval()
    assert not any(m.training for m in model.modules())
    model.train()
    assert all(m.training for m in model.modules())


def test_load_state_dict_is_strict():
    model = TransFollower(TOY)
    state = model.state_dict()
    state.pop("head.bias")
    with pytest.raises(ContractError, match="head.bias"):
        model.load_state_dict(state)
    state = model.state_dict()
    state["head.bias"] = np.zeros(2)
    with pytest.raises(ContractError):
        model.load_state_dict(state)


def test_checkpoint_round_trip(tmp_path):
    model = TransFollower(TOY, seed=4)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model.state_dict(), model.kind, model.config_dict(), {"seed": 4})
    kind, config, state, meta = load_checkpoint(path)
    assert kind == "transfollower" and meta == {"seed": 4}
    assert ModelConfig.from_dict(config) == TOY
    for name, value in model.state_dict().items():
        assert np.array_equal(state[name], value)
    again = load_model(path)
    rng = np.random.default_rng(0)
    enc, dec = rng.normal(size=(5, 3)), rng.normal(size=(6, 2))
    assert np.array_equal(again.predict(enc, dec)[0], model.predict(enc, dec)[0])


def test_checkpoint_bytes_are_deterministic_and_documented():
    model = TransFollower(TOY, seed=1)
    a = checkpoint_bytes(model.state_dict(), "transfollower", model.config_dict())
    b = checkpoint_bytes(TransFollower(TOY, seed=1).state_dict(), "transfollower", model.config_dict())
    assert a == b
    with zipfile.ZipFile(io.BytesIO(a)) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        assert manifest["format"] == "transfollower-checkpoint" and manifest["version"] == 1
        raw = zf.read("params/head.bias.f64")
    assert np.frombuffer(raw, dtype="<f8").tolist() == model.head.bias.data.tolist()


def test_checkpoint_rejects_foreign_archives(tmp_path):
    path = tmp_path / "x.ckpt"
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("manifest.json", json.dumps({"format": "other"}))
    with pytest.raises(ContractError):
        load_checkpoint(path)


def test_atomic_write_leaves_no_temp_files(tmp_path):
    target = tmp_path / "sub" / "f.txt"
    atomic_write_text(target, "one")
    atomic_write_text(target, "two")
    assert target.read_text() == "two"
    assert [p.name for p in target.parent.iterdir()] == ["f.txt"]


def test_standardize():
    x = Tensor(np.array([[2.0, 10.0]]))
    assert standardize(x, 0.0, 1.0) is x
    np.testing.assert_allclose(standardize(x, [1.0, 4.0], [2.0, 3.0]).data, [[0.5, 2.0]])


def test_rng_streams_are_independent_and_repeatable():
    a = make_rng(1, 2, 3).random(5)
    assert np.array_equal(a, make_rng(1, 2, 3).random(5))
    assert not np.array_equal(a, make_rng(1, 2, 4).random(5))
    assert not np.array_equal(a, make_rng(2, 2, 3).random(5))


class _Pair(Module):
    def __init__(self):
        self.b = Linear(1, 1, make_rng(0))
        self.a = [Linear(1, 2, make_rng(1))]


def test_parameter_discovery_order():
    assert [n for n, _ in _Pair().named_parameters()] == ["a.0.bias", "a.0.weight", "b.bias", "b.weight"]
