import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from p2p.errors import ConfigError, NoActiveFlows, UnknownClockRate, WrongCount
from p2p.windowing import (
    FlowKey, PacketTable, WindowingConfig, active_flows, build_dataset, build_features,
    features_from_records, label_bitrate, label_fps, label_jitter, label_loss, read_dataset,
    read_dataset_dir, rfc3550_jitter, unwrap_seq, window_at, write_dataset,
)

from conftest import make_flow, merge

CFG = WindowingConfig()


def test_unwrap_examples():
    assert unwrap_seq([65534, 65535, 0, 1]).tolist() == [65534, 65535, 65536, 65537]
    assert unwrap_seq([10, 13]).tolist() == [10, 13]
    assert unwrap_seq([5, 4]).tolist() == [5, 4]
    assert unwrap_seq([]).tolist() == []


@given(st.lists(st.integers(-300, 300), min_size=1, max_size=200), st.integers(0, 65535))
def test_unwrap_property(steps, start):
    true = np.cumsum([start] + steps)
    ext = unwrap_seq(true % 65536)
    assert np.all(np.abs(np.diff(ext)) <= 32768)
    assert np.array_equal(ext % 65536, true % 65536)
    assert np.array_equal(np.diff(ext), np.diff(true))


def test_config_validation():
    with pytest.raises(ConfigError):
        WindowingConfig(per_flow_packets=4096)
    with pytest.raises(ConfigError):
        WindowingConfig(window_ms=0)


def test_features_uniform_flow():
    recs = make_flow(128, dt=0.01, size=1000)
    f = features_from_records(recs, CFG)
    assert f.shape == (128, 6)
    assert f[0, 0] == 0.0
    assert np.allclose(f[1:, 0], 0.01)
    assert f[127, 1] == pytest.approx(1.27)
    assert np.all(f[:, 2] == 1000)
    assert np.allclose(f[:, 3], np.arange(128) * 900 / 90000)
    assert np.all(f[:, 5] == 1)


def test_features_seq_gap():
    recs = make_flow(129, seq0=1)
    recs = [r for r in recs if r.seq != 101]
    f = features_from_records(recs, CFG)
    assert sorted(f[:, 5].tolist()) == [1.0] * 127 + [2.0]


def _feature_oracle(recs, clock):
    rows, ext = [], None
    for i, r in enumerate(recs):
        if i == 0:
            ext = r.seq
            rows.append([0.0, 0.0, r.size_bytes, 0.0, float(r.marker), 1.0])
            continue
        p = recs[i - 1]
        d = (r.seq - p.seq) % 65536
        d = d - 65536 if d >= 32768 else d
        ext += d
        ticks = (r.rtp_timestamp - recs[0].rtp_timestamp) % 2**32
        ticks = ticks - 2**32 if ticks >= 2**31 else ticks
        rows.append([r.arrival_time - p.arrival_time, r.arrival_time - recs[0].arrival_time,
                     r.size_bytes, ticks / clock, float(r.marker), float(d)])
    return np.array(rows)


def test_features_match_row_oracle(rng):
    recs = make_flow(128, seq0=65500, ts_step=3000, marker_every=4)
    jittered = []
    t = 0.0
    for r in recs:
        t += float(rng.exponential(0.01))
        jittered.append(type(r)(**{**{k: getattr(r, k) for k in r.__slots__}, "arrival_time": t,
                                   "rtp_timestamp": (r.rtp_timestamp + 2**32 - 60000) % 2**32,
                                   "size_bytes": int(rng.integers(100, 1200))}))
    got = features_from_records(jittered, CFG)
    assert np.allclose(got, _feature_oracle(jittered, 90000), rtol=0, atol=1e-12)


def test_features_wrong_count_and_unknown_clock():
    with pytest.raises(WrongCount):
        features_from_records(make_flow(100), CFG)
    f = features_from_records(make_flow(128, pt=35, ts_step=1000), CFG)
    assert f[1, 3] == pytest.approx(1000 * 1e-5)


def test_label_examples():
    assert label_bitrate(np.full(10, 625), 0.5) == pytest.approx(0.1)
    assert label_bitrate(np.array([], dtype=int), 0.5) == 0.0
    assert label_fps(np.arange(15), 0.5) == 30.0
    assert label_fps(np.zeros(40), 0.5) == 2.0
    assert label_fps(np.array([]), 0.5) == 0.0
    assert not label_loss(np.random.default_rng(1).permutation(np.arange(100, 150)))
    assert label_loss(np.array([s for s in range(100, 121) if s != 111]))
    assert not label_loss(np.array([7]))


def test_jitter_hand_iteration():
    # arrivals 0, 10, 30 ms; timestamps 10 ms apart: D = 0, 10 ms -> J = 0, 0, 0.625 ms
    j = rfc3550_jitter(np.array([0.0, 0.010, 0.030]), np.array([0, 900, 1800]), 90000)
    assert np.allclose(j, [0.0, 0.0, 0.000625])
    assert label_jitter(j) == pytest.approx(0.625 / 3)
    paced = rfc3550_jitter(np.arange(50) * 0.02, np.arange(50) * 960, 48000)
    assert np.allclose(paced, 0, atol=1e-15)
    assert label_jitter(j[:1]) is None
    with pytest.raises(UnknownClockRate):
        rfc3550_jitter(np.zeros(3), np.zeros(3), None)


def test_jitter_matches_loop_recursion(rng):
    arr = np.cumsum(rng.exponential(0.02, 500))
    ts = (np.arange(500) * 1800 + 2**32 - 5000) % 2**32
    J, out = 0.0, [0.0]
    for i in range(1, 500):
        dts = (int(ts[i]) - int(ts[i - 1])) % 2**32
        D = (arr[i] - arr[i - 1]) - dts / 90000
        J += (abs(D) - J) / 16
        out.append(J)
    assert np.allclose(rfc3550_jitter(arr, ts, 90000), out, rtol=1e-12, atol=0)


@given(st.lists(st.integers(0, 60), min_size=0, max_size=40), st.randoms(use_true_random=False))
def test_labels_permutation_invariant(seqs, rnd):
    arr = np.array(seqs, dtype=np.int64)
    perm = arr.copy()
    rnd.shuffle(perm)
    assert label_loss(arr) == label_loss(perm)
    assert label_fps(arr, 0.5) == label_fps(perm, 0.5)
    assert label_bitrate(arr, 0.5) == label_bitrate(perm, 0.5)


def _table(records):
    return PacketTable.from_records(records)


def test_active_flow_clauses():
    few = make_flow(127, ssrc=1, dt=0.001)
    table = _table(few)
    assert active_flows(table, 0.2, CFG) == []
    stale = make_flow(500, ssrc=2, dt=0.001)  # last packet at 0.499
    assert active_flows(_table(stale), 0.499 + 1.5, CFG) == []
    one = make_flow(2048, ssrc=3, dt=0.001)
    t = one[-1].arrival_time + 0.01
    assert active_flows(_table(one), t, CFG) == [FlowKey.of(one[0])]


def test_active_flow_order():
    late = make_flow(200, t0=0.5, ssrc=1, dt=0.005)
    early = make_flow(200, t0=0.0, ssrc=9, dt=0.005)
    keys = active_flows(_table(merge(late, early)), 1.6, CFG)
    assert [k.ssrc for k in keys] == [9, 1]


def _three_flow_session(seconds=60.0, pps=200):
    n = int(seconds * pps)
    dt = 1.0 / pps
    return merge(
        make_flow(n, dt=dt, ssrc=1, port=5000),
        make_flow(n, t0=dt / 3, dt=dt, ssrc=2, port=5002, pt=111, ts_step=240),
        make_flow(n, t0=2 * dt / 3, dt=dt, ssrc=3, port=5004, pt=100),
    )


def test_dataset_three_flows():
    batches = build_dataset(_three_flow_session())
    # windows start every 0.5 s from 0; at t=0 and 0.5 no flow has 128 packets yet
    starts = [b.window_start for b in batches]
    assert len(batches) == 118
    assert starts[0] == pytest.approx(1.0) and starts[-1] == pytest.approx(59.5)
    assert all(len(b) == 3 for b in batches)
    mid = batches[50]
    video, audio, screen = mid.samples
    assert video.label_bitrate_mbps == pytest.approx(100 * 1000 * 8 / 0.5 / 1e6)
    assert video.fps_mask and not audio.fps_mask and screen.fps_mask
    assert audio.label_fps == 0.0
    assert video.label_fps == pytest.approx(200.0)  # every packet carries its own timestamp
    assert not any(s.label_loss for b in batches for s in b.samples)


def test_dataset_short_session_is_empty():
    assert build_dataset(make_flow(100)) == []
    assert build_dataset([]) == []


def test_dataset_staleness_drop():
    stays = make_flow(40 * 200, dt=0.005, ssrc=1)
    stops = make_flow(30 * 200, dt=0.005, ssrc=2, port=5010)
    batches = build_dataset(merge(stays, stops))
    for b in batches:
        has = any(s.flow.ssrc == 2 for s in b.samples)
        assert has == (b.window_start <= 30.5 + 1e-9), b.window_start


def test_dataset_matches_bruteforce_rescan(rng):
    flows = []
    for i in range(4):
        n = int(rng.integers(200, 900))
        t0 = float(rng.uniform(0, 3))
        flows.append(make_flow(n, t0=t0, dt=float(rng.uniform(0.003, 0.02)), ssrc=10 + i,
                               port=6000 + i, seq0=int(rng.integers(0, 65536))))
    recs = merge(*flows)
    batches = build_dataset(recs)
    arrivals = np.array([r.arrival_time for r in recs])
    t0, t_end = arrivals[0], arrivals[-1]
    expect = 0
    for w in range(int(math.floor((t_end - t0) / 0.5)) + 1):
        t = t0 + 0.5 * w
        hist = [r for r in recs if r.arrival_time < t][-2048:]
        keys = {}
        for r in hist:
            keys.setdefault(FlowKey.of(r), []).append(r)
        last = {k: max(r.arrival_time for r in recs if FlowKey.of(r) == k and r.arrival_time < t) for k in keys}
        ok = [k for k, v in keys.items() if len(v) >= 128 and last[k] >= t - 1.0]
        expect += len(ok)
        batch = next((b for b in batches if abs(b.window_start - t) < 1e-9), None)
        if not ok:
            assert batch is None
            continue
        assert {s.flow for s in batch.samples} == set(ok)
        for s in batch.samples:
            own = [r for r in recs if FlowKey.of(r) == s.flow and r.arrival_time < t][-128:]
            assert np.allclose(s.features, features_from_records(own, CFG), atol=1e-12)
            inwin = [r for r in recs if FlowKey.of(r) == s.flow and t <= r.arrival_time < t + 0.5]
            assert s.label_bitrate_mbps == pytest.approx(sum(r.size_bytes for r in inwin) * 8 / 0.5 / 1e6)
    assert sum(len(b) for b in batches) == expect


def test_window_at(tmp_path):
    recs = _three_flow_session(10.0)
    batch = window_at(recs, 5.0)
    assert len(batch) == len(active_flows(_table([r for r in recs if r.arrival_time < 5.0][-2048:]), 5.0, CFG))
    with pytest.raises(NoActiveFlows):
        window_at(recs, 0.2)


@pytest.mark.parametrize("name", ["d.jsonl", "d.jsonl.gz"])
def test_dataset_file_roundtrip(tmp_path, name):
    batches = build_dataset(_three_flow_session(5.0))
    write_dataset(batches, tmp_path / name, CFG, "sess")
    header, back = read_dataset(tmp_path / name)
    assert header["session"] == "sess" and header["version"] == 1
    assert len(back) == len(batches)
    for a, b in zip(batches, back):
        assert a.window_start == b.window_start
        for x, y in zip(a.samples, b.samples):
            assert x.flow == y.flow
            assert np.array_equal(x.features, y.features)
            assert (x.label_bitrate_mbps, x.label_jitter_ms, x.label_fps, x.label_loss) == \
                   (y.label_bitrate_mbps, y.label_jitter_ms, y.label_fps, y.label_loss)
    assert list(read_dataset_dir(tmp_path)) == ["sess"]


@settings(max_examples=30, deadline=None)
@given(st.integers(128, 400), st.floats(0.001, 0.05), st.integers(0, 65535))
def test_features_idempotent_property(n, dt, seq0):
    recs = make_flow(n, dt=dt, seq0=seq0)
    batches = build_dataset(recs)
    for b in batches:
        s = b.samples[0]
        own = [r for r in recs if r.arrival_time < b.window_start][-128:]
        assert np.allclose(s.features, build_features(
            np.array([r.arrival_time for r in own]), np.array([r.size_bytes for r in own]),
            np.array([r.rtp_timestamp for r in own]), np.array([r.marker for r in own]),
            unwrap_seq([r.seq for r in own]), 90000, 128))
