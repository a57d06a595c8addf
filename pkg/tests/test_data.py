import logging

import numpy as np
import pytest

from factories import wavy_event
from transfollower.baselines.idm import IDMParams
from transfollower.data import (
    DatasetSplit,
    ExtractionStats,
    GenerationError,
    RawLogRecord,
    SynthConfig,
    dumps_events,
    event_to_log,
    extract_events,
    generate_event,
    generate_synthetic_dataset,
    load_events,
    load_split,
    read_raw_log,
    save_events,
    save_split,
    simulate_follower,
    split_dataset,
    trim_event,
    window_events,
    write_raw_log,
)
from transfollower.errors import ContractError


def _log(n, t0=0.0, target=1, lateral=0.0, speed=10.0, rng=1.0, rate=0.5):
    return [RawLogRecord(round(t0 + i * 0.1, 10), speed, target, 20.0 + rate * i * 0.1, rate,
                         lateral if np.isscalar(lateral) else lateral[i]) for i in range(n)]


# -- extraction -------------------------------------------------------------------------------

def test_twenty_second_run_is_one_event():
    events = extract_events(_log(200))
    assert len(events) == 1 and len(events[0]) == 200
    ev = events[0]
    np.testing.assert_allclose(ev.lv_speed, 10.5)
    np.testing.assert_allclose(ev.spacing, 20.0 + 0.05 * np.arange(200))
    assert ev.source == "ingested"


@pytest.mark.parametrize("n,expected", [(149, 0), (150, 0), (151, 1)])
def test_duration_must_exceed_fifteen_seconds(n, expected):
    assert len(extract_events(_log(n))) == expected


def test_lateral_boundary_splits_runs():
    lateral = np.zeros(400)
    lateral[200] = 2.5  # exactly at the limit already breaks the run
    events = extract_events(_log(400, lateral=lateral))
    assert [len(e) for e in events] == [200, 199]
    lateral = np.zeros(400)
    lateral[140] = -2.6
    assert [len(e) for e in extract_events(_log(400, lateral=lateral))] == [259]
    lateral[140] = 2.4999
    assert [len(e) for e in extract_events(_log(400, lateral=lateral))] == [400]


def test_target_change_and_absence_break_runs():
    log = _log(160, target=1) + _log(170, t0=16.0, target=2) + _log(5, t0=33.0, target=None) + _log(152, t0=33.5, target=2)
    events = extract_events(log)
    assert [len(e) for e in events] == [160, 170, 152]
    assert [e.meta["target_id"] for e in events] == [1, 2, 2]


def test_time_gap_breaks_run():
    log = _log(100) + _log(100, t0=10.5)
    assert extract_events(log) == []
    assert len(extract_events(_log(100) + _log(100, t0=10.0))) == 1


def test_malformed_records_are_counted_and_logged(caplog):
    log = _log(400)
    log[50] = RawLogRecord(log[50].time, float("nan"), 1, 20.0, 0.5, 0.0)
    log[60] = RawLogRecord(log[60].time, 10.0, 1, -1.0, 0.5, 0.0)
    stats = ExtractionStats()
    with caplog.at_level(logging.WARNING):
        events = extract_events(log, stats=stats)
    assert stats.skipped == 2 and stats.records == 400
    assert stats.reasons == {"non-finite field": 1, "non-positive range": 1}
    assert "skipped 2" in caplog.text
    # a skipped sample leaves a 0.2 s hole, which breaks the run
    assert [len(e) for e in events] == [339]


def test_extraction_is_idempotent():
    events = [wavy_event(s, n=160 + 10 * s) for s in range(4)]
    log = []
    for i, e in enumerate(events):
        log += event_to_log(e, target_id=i + 1, t0=100.0 * i)
    first = extract_events(log, prefix="x")
    again_log = []
    for i, e in enumerate(first):
        again_log += event_to_log(e, target_id=i + 1, t0=100.0 * i)
    second = extract_events(again_log, prefix="x")
    assert [e.id for e in first] == [e.id for e in second]
    for a, b, orig in zip(first, second, events):
        np.testing.assert_array_equal(a.fv_speed, b.fv_speed)
        np.testing.assert_array_equal(a.spacing, b.spacing)
        np.testing.assert_allclose(a.lv_speed, orig.lv_speed, atol=1e-12)
        np.testing.assert_allclose(b.lv_speed, a.lv_speed, atol=1e-12)


def test_raw_log_csv_round_trip(tmp_path):
    log = _log(20) + [RawLogRecord(2.0, 5.0, None, 0.0, 0.0, 0.0)]
    path = tmp_path / "raw.csv"
    write_raw_log(path, log)
    assert list(read_raw_log(path)) == log


def test_raw_log_bad_rows_become_skips(tmp_path):
    path = tmp_path / "raw.csv"
    path.write_text("time,subject_speed,target_id,range,range_rate,lateral_offset\n"
                    "0.0,10,1,20,0,0\n0.1,abc,1,20,0,0\n0.2,10,x,20,0,0\n")
    stats = ExtractionStats()
    extract_events(read_raw_log(path), stats=stats)
    assert stats.records == 3 and stats.skipped == 2


def test_raw_log_rejects_other_schema(tmp_path):
    path = tmp_path / "raw.csv"
    path.write_text("t,v\n0,1\n")
    with pytest.raises(ContractError):
        list(read_raw_log(path))


# -- synthetic generation ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def thousand():
    return generate_synthetic_dataset(SynthConfig(n_events=1000, seed=11))


def test_generated_events_satisfy_invariants(thousand):
    assert len({e.id for e in thousand}) == 1000
    for e in thousand:
        assert len(e) == 150
        assert e.violations() == [], e.id
        assert e.spacing.min() > 0.1


def test_generation_is_deterministic_and_worker_independent():
    cfg = SynthConfig(n_events=12, seed=4)
    a = generate_synthetic_dataset(cfg)
    b = generate_synthetic_dataset(cfg, workers=3)
    assert dumps_events(a) == dumps_events(b)
    assert dumps_events(generate_synthetic_dataset(SynthConfig(n_events=12, seed=5))) != dumps_events(a)
    assert dumps_events([generate_event(cfg, 7)]) == dumps_events([a[7]])


def test_noise_free_events_are_idm_consistent():
    cfg = SynthConfig(n_events=50, seed=2, noise_std=0.0)
    for e in generate_synthetic_dataset(cfg):
        driver = IDMParams.from_dict(e.meta["driver"])
        fv, sp = simulate_follower(driver, e.lv_speed, e.spacing[0], e.fv_speed[0], e.dt)
        assert np.max(np.abs(fv - e.fv_speed)) < 1e-9
        assert np.max(np.abs(sp - e.spacing)) < 1e-9


def test_fixed_driver_is_used():
    p = IDMParams(desired_speed=28.0)
    events = generate_synthetic_dataset(SynthConfig(n_events=3, fixed_driver=p.to_dict()))
    assert all(IDMParams.from_dict(e.meta["driver"]) == p for e in events)


def test_infeasible_config_raises_after_bounded_attempts():
    cfg = SynthConfig(n_events=1, initial_gap_factor=(0.0001, 0.0002), max_attempts=3)
    with pytest.raises(GenerationError, match="3 attempts"):
        generate_event(cfg, 0)


def test_synth_config_validation_and_round_trip():
    with pytest.raises(ContractError):
        SynthConfig(noise_std=-1.0)
    with pytest.raises(ContractError):
        SynthConfig(lv_base_speed=(5.0, 5.0))
    cfg = SynthConfig(n_events=3, seed=9)
    assert SynthConfig.from_dict(cfg.to_dict()) == cfg


# -- trimming and windows -----------------------------------------------------------------------

def test_trim_identity_and_windows():
    ev = wavy_event(0)
    assert trim_event(ev, 0) is ev
    long = wavy_event(1, n=300)
    a, b = trim_event(long, 0), trim_event(long, 150)
    assert len(a) == len(b) == 150 and a.id != b.id
    np.testing.assert_array_equal(np.r_[a.spacing, b.spacing], long.spacing)
    assert a.violations() == [] and b.violations() == []
    assert [w.id for w in window_events([long, ev])] == [a.id, b.id, ev.id]


def test_trim_too_short():
    with pytest.raises(ContractError):
        trim_event(wavy_event(0), 1)


def test_trimmed_generated_events_stay_consistent():
    cfg = SynthConfig(n_events=5, seed=3, n_samples=400)
    for e in window_events(generate_synthetic_dataset(cfg)):
        assert e.violations() == []


# -- splits ------------------------------------------------------------------------------------

def _ids(n):
    return [wavy_event(0, n=2, id=f"e{i}") for i in range(n)]


def test_split_proportions_and_partition():
    events = _ids(100)
    split = split_dataset(events, seed=0)
    assert (len(split.train), len(split.val), len(split.test)) == (70, 15, 15)
    members = split.train + split.val + split.test
    assert sorted(members) == sorted(e.id for e in events)
    assert split_dataset(events, seed=0) == split


def test_split_seeds_differ():
    events = _ids(100)
    trains = {tuple(sorted(split_dataset(events, seed=s).train)) for s in range(20)}
    assert len(trains) == 20


def test_split_desk_sizes_and_errors():
    split = split_dataset(_ids(2000), seed=1)
    assert (len(split.train), len(split.val), len(split.test)) == (1400, 300, 300)
    with pytest.raises(ContractError):
        split_dataset(_ids(9), seed=0)
    dup = _ids(10)
    dup[3] = dup[4]
    with pytest.raises(ContractError):
        split_dataset(dup, seed=0)


def test_split_file_round_trip(tmp_path):
    split = split_dataset(_ids(20), seed=2)
    save_split(tmp_path / "s.json", split)
    assert load_split(tmp_path / "s.json") == split
    assert isinstance(split, DatasetSplit)


# -- event files ------------------------------------------------------------------------------

def test_event_file_round_trip_is_bit_exact(tmp_path, thousand):
    path = tmp_path / "ev.jsonl"
    save_events(path, thousand[:50])
    back = load_events(path)
    for a, b in zip(thousand[:50], back):
        assert a.id == b.id and a.dt == b.dt and a.source == b.source and a.meta == b.meta
        for name in ("fv_speed", "lv_speed", "spacing"):
            assert np.array_equal(getattr(a, name), getattr(b, name))
    assert path.read_text() == dumps_events(back)


def test_event_file_header_checked(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"format": "other"}\n')
    with pytest.raises(ContractError):
        load_events(path)
    path.write_text('{"format": "transfollower-events", "schema_version": 99}\n')
    with pytest.raises(ContractError):
        load_events(path)
