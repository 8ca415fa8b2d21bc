import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kneecut.geometry import SE3Transform
from kneecut.synth import SynthConfig, generate_episode
from kneecut.timeline import (GRID_STEP_US, ReferenceGrid, StampedStream, align_episode, detect_dropouts,
                              pose_graph_from_streams, records_from_aligned, resample, streams_from_records, window)


def stream(times, kind="pose", sid="s"):
    times = np.asarray(times, dtype=np.int64)
    return StampedStream(sid, kind, times, list(range(len(times))))


def periodic(rate_hz, seconds, t0=0):
    return t0 + np.round(np.arange(int(seconds * rate_hz)) * 1e6 / rate_hz).astype(np.int64)


def test_stream_invariants():
    with pytest.raises(ValueError):
        stream([0, 10, 10])
    with pytest.raises(ValueError):
        StampedStream("s", "pose", np.array([0, 1]), [0])
    with pytest.raises(ValueError):
        ReferenceGrid(0, 10, 0)


def test_grid_times_and_covering():
    g = ReferenceGrid(1000, 4)
    assert g.times.tolist() == [1000, 26000, 51000, 76000]
    c = ReferenceGrid.covering(0, 99_999)
    assert c.length == 4 and c.times[-1] <= 99_999


def test_on_grid_stream_has_zero_staleness():
    g = ReferenceGrid(0, 40)
    r = resample(stream(g.times), g, 100_000)
    assert not r.missing.any()
    assert (r.staleness_us == 0).all()
    assert r.source_index.tolist() == list(range(40))


def test_30hz_on_40hz_grid():
    g = ReferenceGrid(0, 200)
    r = resample(stream(periodic(30, 6)), g, 100_000)
    assert not r.missing.any()
    assert r.staleness_us.max() < 33_400
    assert (r.source_times() <= g.times).all()


def test_gap_interior_missing():
    t = periodic(60, 3)
    kept = t[(t < 1_000_000) | (t >= 1_500_000)]
    g = ReferenceGrid(0, 120)
    r = resample(stream(kept), g, 100_000)
    last_before = kept[kept < 1_000_000].max()
    expect = (g.times - last_before > 100_000) & (g.times < 1_500_000)
    assert np.array_equal(r.missing, expect)
    assert expect.sum() > 10


def test_grid_before_first_sample_is_missing():
    g = ReferenceGrid(0, 5)
    r = resample(stream([60_000]), g, 100_000)
    assert r.missing.tolist() == [True, True, True, False, False]
    assert r.staleness_us.tolist()[:3] == [-1, -1, -1]


def test_empty_stream_warns(caplog):
    g = ReferenceGrid(0, 5)
    with caplog.at_level(logging.WARNING):
        r = resample(stream([]), g, 100_000)
    assert r.missing.all() and "empty" in caplog.text
    assert r.payload(0) is None


@settings(max_examples=200)
@given(st.lists(st.integers(0, 2_000_000), min_size=1, max_size=200, unique=True),
       st.integers(-50_000, 50_000), st.integers(1_000, 60_000), st.integers(1_000, 500_000))
def test_no_future_leakage(ts, epoch, step, bound):
    s = stream(sorted(ts))
    g = ReferenceGrid(epoch, 2_100_000 // step, step)
    r = resample(s, g, bound)
    ok = ~r.missing
    assert (r.source_times()[ok] <= g.times[ok]).all()
    assert (r.staleness_us[ok] <= bound).all()
    # the held sample is the latest one: the next sample, if any, is in the future
    nxt = r.source_index[ok] + 1
    has = nxt < len(s)
    assert (s.timestamps[nxt[has]] > g.times[ok][has]).all()


def test_detect_dropouts_examples():
    t = periodic(60, 4)
    assert detect_dropouts(stream(t), 100_000) == []
    kept = t[(t < 1_000_000) | (t >= 2_000_000)]
    (a, b), = detect_dropouts(stream(kept), 100_000)
    assert abs((b - a) - 1_000_000) <= 1e6 / 60 + 1
    assert detect_dropouts(stream([5]), 100_000) == []


@given(st.lists(st.integers(0, 10_000_000), min_size=2, max_size=100, unique=True), st.integers(1, 2_000_000))
def test_dropouts_disjoint_sorted_and_maximal(ts, bound):
    s = stream(sorted(ts))
    gaps = detect_dropouts(s, bound)
    for (a0, a1), (b0, b1) in zip(gaps, gaps[1:]):
        assert a1 <= b0
    for a, b in gaps:
        assert b - a > bound
        inside = s.timestamps[(s.timestamps > a) & (s.timestamps < b)]
        assert len(inside) == 0


# --- windows --------------------------------------------------------------

@pytest.fixture(scope="module")
def frames(grammar):
    g = ReferenceGrid(0, 12)
    pose = SE3Transform.identity().to_dict()
    s = StampedStream("pose/femur", "pose", g.times, [pose] * g.length)
    return align_episode([s], g, grammar)


def test_window_examples(frames):
    assert window(frames, 5, 1).frames == (frames[5],)
    a, b = window(frames, 5, 4), window(frames, 6, 4)
    assert a.frames[1:] == b.frames[:-1]
    assert [f.index for f in a.frames] == [2, 3, 4, 5]
    with pytest.raises(IndexError):
        window(frames, 2, 4)
    with pytest.raises(IndexError):
        window(frames, len(frames), 4)
    with pytest.raises(ValueError):
        window(frames, 5, 0)


def test_window_coverage(frames):
    k = 4
    counts = np.zeros(len(frames), dtype=int)
    for t in range(k - 1, len(frames)):
        for f in window(frames, t, k).frames:
            counts[f.index] += 1
    assert (counts[k - 1:len(frames) - k + 1] == k).all()


# --- aligned episodes -----------------------------------------------------

def test_degraded_frames_name_missing_stream(grammar):
    g = ReferenceGrid(0, 20)
    pose = SE3Transform.identity().to_dict()
    femur = StampedStream("pose/femur", "pose", g.times, [pose] * 20)
    tibia = StampedStream("pose/tibia", "pose", g.times[:5], [pose] * 5)
    out = align_episode([femur, tibia], g, grammar)
    assert not out[4].degraded
    bad = [f for f in out if f.degraded]
    assert bad and all(f.missing == ("pose/tibia",) for f in bad)
    assert bad[0].index == 9  # 125 ms after the last sample at 100 ms
    rec = out[15].to_record()
    assert rec["degraded"] and rec["streams"]["pose/tibia"] is None


def test_robot_state_tokens_follow_payload(grammar):
    g = ReferenceGrid(0, 3)
    n = grammar.n_joints
    st_ = StampedStream("robot/state", "robot_state", g.times,
                        [{"q": [0.1 * k] * n, "qd": [0.0] * n, "tau": [0.0] * n} for k in range(3)])
    out = align_episode([st_], g, grammar)
    assert out[0].state_tokens != out[2].state_tokens
    assert len(out[0].state_tokens) == 3 * n


@pytest.fixture(scope="module")
def raw(model, grammar):
    return generate_episode(model, grammar, 0, SynthConfig(seed=3, gaps=2))


def test_synthetic_gaps_recovered_exactly(raw):
    header, records = raw[0], raw[1:]
    streams = {s.stream_id: s for s in streams_from_records(records)}
    found = set()
    for sid, s in streams.items():
        if s.kind == "event":
            continue
        for a, b in detect_dropouts(s, 250_000 if s.kind == "frame" else 100_000):
            found.add((sid, a, b))
    injected = {(g["stream"], g["prev_us"], g["next_us"]) for g in header["gaps"]}
    assert len(injected) == 2
    assert found == injected


def test_synthetic_streams_resample_without_leakage(raw):
    header, records = raw[0], raw[1:]
    streams = [s for s in streams_from_records(records) if s.kind != "event"]
    grid = ReferenceGrid.covering(header["epoch_us"], header["epoch_us"] + header["duration_us"])
    for s in streams:
        rate = header["rates_hz"][s.stream_id]
        r = resample(s, grid, 100_000)
        ok = ~r.missing
        assert (r.source_times()[ok] <= grid.times[ok]).all()
        gap_free = ok & (r.staleness_us <= 100_000)
        # outside injected gaps staleness is bounded by one source period
        near_gap = np.zeros(grid.length, dtype=bool)
        for g in header["gaps"]:
            if g["stream"] == s.stream_id:
                near_gap |= (grid.times >= g["prev_us"]) & (grid.times < g["next_us"])
        assert r.staleness_us[gap_free & ~near_gap].max() <= 1e6 / rate + 1


def test_resample_is_idempotent(raw, grammar):
    header, records = raw[0], raw[1:]
    streams = [s for s in streams_from_records(records) if s.kind != "event"]
    grid = ReferenceGrid.covering(header["epoch_us"], header["epoch_us"] + header["duration_us"])
    first = [f.to_record() for f in align_episode(streams, grid, grammar)]
    again = streams_from_records(records_from_aligned(first))
    second = [f.to_record() for f in align_episode(again, grid, grammar)]
    assert first == second


def test_pose_graph_from_streams(raw):
    records = raw[1:]
    g = pose_graph_from_streams(streams_from_records(records))
    t = records[len(records) // 2]["t_us"]
    T = g.relative_transform("end_effector", "femur", t)
    assert isinstance(T, SE3Transform)


def test_grid_step_default():
    assert GRID_STEP_US == 25_000
