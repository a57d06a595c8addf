import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from factories import constant_event, make_event, wavy_event
from transfollower.cf import (
    CFEvent,
    CFState,
    build_decoder_input,
    build_encoder_input,
    cf_loss,
    cf_loss_terms,
    rollout_spacing,
    rollout_spacing_tensor,
    score_prediction,
)
from transfollower.errors import ContractError
from transfollower.tensor import Tensor, parameter


def test_encoder_input_stationary_pair():
    ev = constant_event(lv=0.0, fv=0.0, s0=10.0)
    enc = build_encoder_input(ev)
    assert enc.shape == (40, 3)
    np.testing.assert_array_equal(enc, np.tile([10.0, 0.0, 0.0], (40, 1)))


def test_encoder_input_columns():
    ev = wavy_event(1)
    enc = build_encoder_input(ev)
    np.testing.assert_array_equal(enc[:, 0], ev.spacing[:40])
    np.testing.assert_array_equal(enc[:, 1], ev.fv_speed[:40])
    np.testing.assert_array_equal(enc[:, 2], ev.lv_speed[:40] - ev.fv_speed[:40])


def test_inputs_reject_short_events():
    ev = make_event(np.full(100, 5.0), np.full(100, 5.0))
    with pytest.raises(ContractError):
        build_decoder_input(ev)
    with pytest.raises(ContractError):
        build_encoder_input(make_event(np.full(30, 5.0), np.full(30, 5.0)))


def test_decoder_input_constant_token_speed():
    ev = constant_event(lv=12.0, fv=8.0)
    dec = build_decoder_input(ev)
    assert dec.shape == (120, 2)
    np.testing.assert_array_equal(dec[10:, 1], 8.0)


def test_decoder_input_placeholder_is_token_mean():
    fv = np.full(150, 3.0)
    fv[30:40] = [9, 9, 9, 9, 9, 11, 11, 11, 11, 11]
    ev = make_event(np.full(150, 10.0), fv)
    dec = build_decoder_input(ev)
    np.testing.assert_array_equal(dec[:10, 1], fv[30:40])
    np.testing.assert_array_equal(dec[10:, 1], 10.0)
    np.testing.assert_array_equal(dec[:, 0], ev.lv_speed[30:150])


def test_rollout_examples():
    np.testing.assert_array_equal(rollout_spacing(20.0, np.full(50, 10.0), np.full(50, 10.0), 0.1), 20.0)
    out = rollout_spacing(20.0, [10.0, 10.0], [8.0, 8.0], 0.1)
    assert out[0] == 20.0 and abs(out[1] - 20.2) < 1e-12
    assert len(rollout_spacing(5.0, [], [], 0.1)) == 0


def test_rollout_does_not_clamp():
    out = rollout_spacing(1.0, np.zeros(30), np.full(30, 10.0), 0.1)
    assert out[-1] < 0


def test_rollout_round_trip_on_events():
    for seed in range(20):
        ev = wavy_event(seed)
        again = rollout_spacing(ev.spacing[0], ev.lv_speed, ev.fv_speed, ev.dt)
        assert np.max(np.abs(again - ev.spacing)) < 1e-9


speeds = hnp.arrays(np.float64, st.integers(2, 60), elements=st.floats(0, 40))


@settings(max_examples=100, deadline=None)
@given(speeds, st.floats(0.5, 50), st.floats(-3, 3))
def test_rollout_is_linear_in_relative_speed(lv, s0, c):
    fv = lv[::-1].copy()
    base = rollout_spacing(s0, lv, fv) - s0
    scaled = rollout_spacing(s0, c * (lv - fv), np.zeros_like(lv)) - s0
    np.testing.assert_allclose(scaled, c * base, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(speeds, st.floats(0.5, 50))
def test_relative_speed_recoverable_by_differencing(dv, s0):
    dv = dv - 20.0
    spacing = rollout_spacing(s0, dv, np.zeros_like(dv), 0.1)
    recovered = np.empty_like(dv)
    recovered[0] = dv[0]
    for i in range(len(dv) - 1):
        recovered[i + 1] = 2 * (spacing[i + 1] - spacing[i]) / 0.1 - recovered[i]
    np.testing.assert_allclose(recovered, dv, atol=1e-9)


def test_tensor_rollout_matches_numpy_rollout():
    ev = wavy_event(3)
    fv = ev.fv_speed[40:] + 0.3
    got = rollout_spacing_tensor(ev.spacing[39], ev.rel_speed[39], ev.lv_speed[40:], Tensor(fv)).data
    lv = ev.lv_speed[39:]
    want = rollout_spacing(ev.spacing[39], lv, np.concatenate([[ev.fv_speed[39]], fv]))[1:]
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_loss_zero_for_ground_truth():
    ev = wavy_event(2)
    pred = np.concatenate([np.zeros(10), ev.fv_speed[40:]])
    assert abs(cf_loss(pred, ev).item()) < 1e-20


def test_loss_constant_offset_closed_form():
    ev = constant_event(lv=10.0, fv=10.0, s0=20.0)
    speed, spacing = cf_loss_terms(Tensor(np.full((1, 120), 11.0)), [ev])
    want_spacing = sum((0.1 * (i - 0.5)) ** 2 for i in range(1, 111)) / 110
    assert abs(speed.item() - 1.0) < 1e-12
    assert abs(spacing.item() - want_spacing) < 1e-9
    assert abs(spacing.item() - 40.3325) < 1e-9
    assert abs(cf_loss(np.full(120, 11.0), ev).item() - 41.3325) < 1e-9


def test_loss_ignores_token_outputs():
    ev = wavy_event(4)
    rng = np.random.default_rng(0)
    pred = parameter(rng.normal(10, 1, size=120))
    base = cf_loss(pred, ev)
    base.backward()
    np.testing.assert_array_equal(pred.grad[:10], 0.0)
    assert np.any(pred.grad[10:] != 0.0)
    for i in range(10):
        bumped = pred.data.copy()
        bumped[i] += rng.normal() * 100
        assert cf_loss(bumped, ev).item() == base.item()


def test_loss_non_negative_and_zero_only_at_truth():
    ev = wavy_event(5)
    truth = np.concatenate([np.zeros(10), ev.fv_speed[40:]])
    rng = np.random.default_rng(0)
    for _ in range(20):
        noisy = truth + rng.normal(scale=0.1, size=120)
        assert cf_loss(noisy, ev).item() > 0


def test_batched_loss_is_mean_of_single_losses():
    events = [wavy_event(s) for s in range(3)]
    rng = np.random.default_rng(0)
    preds = rng.normal(10, 2, size=(3, 120))
    batched = cf_loss(preds, events).item()
    singles = [cf_loss(p, e).item() for p, e in zip(preds, events)]
    assert abs(batched - np.mean(singles)) < 1e-10


def test_loss_gradient_through_rollout():
    from transfollower.gradcheck import max_gradient_error

    ev = wavy_event(6)
    pred = parameter(np.random.default_rng(1).normal(10, 1, size=120))
    assert max_gradient_error(lambda: cf_loss(pred, ev), [pred]) < 1e-4


def test_score_prediction_clamps_and_flags():
    ev = constant_event(lv=0.0, fv=0.0, s0=2.0)
    res = score_prediction(ev, np.full(110, 5.0))
    assert res.crashed and res.spacing.min() < 0
    assert abs(res.combined_mse - (res.speed_mse + res.spacing_mse)) < 1e-15
    clamped = score_prediction(ev, np.full(110, -3.0))
    np.testing.assert_array_equal(clamped.fv_speed, 0.0)
    assert clamped.combined_mse == 0.0 and not clamped.crashed


def test_cf_state_and_event_validation():
    with pytest.raises(ContractError):
        CFState(0.0, 1.0, 0.0)
    with pytest.raises(ContractError):
        CFState(1.0, -1.0, 0.0)
    with pytest.raises(ContractError):
        CFEvent("x", np.ones(3), np.ones(4), np.ones(3))
    ev = wavy_event(0)
    assert ev.violations() == []
    assert ev.state(39).rel_speed == ev.lv_speed[39] - ev.fv_speed[39]
    broken = CFEvent("b", ev.fv_speed, ev.lv_speed, ev.spacing + np.linspace(0, 1, 150))
    assert any("trapezoid" in v for v in broken.violations())
    assert broken.violations(check_consistency=False) == []
