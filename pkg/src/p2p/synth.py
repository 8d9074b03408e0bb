"""Synthetic RTC sessions with known ground truth.

Flows are generated from explicit frame or packet schedules, so every label
the windowing stage computes has an independent reference: bitrate from the
generator's byte counts, FPS from its frame ids, loss from its drop record
and jitter from its own RFC 3550 recursion over media time.
"""
from __future__ import annotations

import configparser
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import InvalidScenario
from .ingest import write_packet_log
from .windowing import FlowKey, PacketTable

MTU_PAYLOAD = 1200
RTP_HEADER = 12
AUDIO_PTIME = 0.02
MEDIA = ("video", "audio", "screen")
MEDIA_DEFAULTS = {
    "video": {"payload_type": 96, "clock_rate": 90000.0},
    "screen": {"payload_type": 100, "clock_rate": 90000.0},
    "audio": {"payload_type": 111, "clock_rate": 48000.0},
}


@dataclass
class FlowSpec:
    media: str
    bitrate_mbps: float
    start_s: float
    stop_s: float
    ssrc: int
    fps: float = 30.0  # ignored for audio (one packet per 20 ms)
    payload_type: int | None = None
    clock_rate: float | None = None
    ip_src: str = "10.0.0.1"
    ip_dst: str = "10.0.0.2"
    port_src: int = 5004
    port_dst: int = 5004
    base_delay_s: float = 0.02
    delay_noise_s: float = 0.0
    drop_rate: float = 0.0  # per-packet probability that a drop burst starts
    burst_len: int = 1
    keyframe_every_s: float = 0.0  # 0 disables keyframes
    keyframe_scale: float = 4.0
    size_noise: float = 0.0  # lognormal sigma of frame sizes
    frame_skip: float = 0.0
    reorder: bool = False  # keep raw noisy arrival order instead of per-flow FIFO
    loss_signature: bool = False  # delay ramp before each drop, drain after
    signature_lead_s: float = 0.6
    signature_peak_s: float = 0.6  # peak == lead doubles inter-arrival gaps over the lead
    signature_drain_s: float = 0.3
    stall_rate: float = 0.0  # delivery stalls per second; held packets arrive in one burst
    stall_min_s: float = 0.1
    stall_max_s: float = 0.4
    stall_spacing_s: float = 2e-4  # spacing of the released burst
    seq0: int = 0
    ts0: int = 0

    def __post_init__(self):
        if self.media not in MEDIA:
            raise InvalidScenario(f"media must be one of {MEDIA}, got {self.media!r}")
        d = MEDIA_DEFAULTS[self.media]
        if self.payload_type is None:
            self.payload_type = d["payload_type"]
        if self.clock_rate is None:
            self.clock_rate = d["clock_rate"]

    @property
    def key(self) -> FlowKey:
        return FlowKey(self.ip_src, self.ip_dst, self.port_src, self.port_dst, self.ssrc, self.payload_type)


@dataclass
class SynthScenario:
    duration_s: float
    flows: list[FlowSpec]
    seed: int = 0
    window_s: float = 0.5

    def validate(self) -> None:
        if not self.duration_s > 0:
            raise InvalidScenario("duration_s must be positive")
        if not self.flows:
            raise InvalidScenario("scenario has no flows")
        ssrcs = [f.ssrc for f in self.flows]
        if len(set(ssrcs)) != len(ssrcs):
            raise InvalidScenario("ssrc values must be unique per flow")
        for f in self.flows:
            if f.bitrate_mbps <= 0 or f.fps <= 0 or f.clock_rate <= 0:
                raise InvalidScenario(f"flow {f.ssrc}: rates must be positive")
            if not 0 <= f.drop_rate < 1:
                raise InvalidScenario(f"flow {f.ssrc}: drop_rate must be in [0, 1)")
            if not 0 <= f.frame_skip < 1:
                raise InvalidScenario(f"flow {f.ssrc}: frame_skip must be in [0, 1)")
            if f.stall_rate < 0 or not 0 < f.stall_min_s <= f.stall_max_s or f.stall_spacing_s < 0:
                raise InvalidScenario(f"flow {f.ssrc}: bad stall parameters")
            if f.burst_len < 1 or f.delay_noise_s < 0 or f.base_delay_s < 0:
                raise InvalidScenario(f"flow {f.ssrc}: bad burst length or delay")
            if not 0 <= f.start_s < f.stop_s <= self.duration_s:
                raise InvalidScenario(f"flow {f.ssrc}: need 0 <= start < stop <= duration")
            if not 0 <= f.payload_type <= 127 or not 0 <= f.ssrc <= 0xFFFFFFFF:
                raise InvalidScenario(f"flow {f.ssrc}: payload type or ssrc out of range")


@dataclass
class FlowTruth:
    """Generator-side record of one flow, in received (arrival) order."""

    counter: np.ndarray  # unwrapped sequence counter of each received packet
    arrival: np.ndarray
    size: np.ndarray
    frame: np.ndarray  # frame (or audio packet) index
    media_time: np.ndarray  # sampling instant in seconds
    dropped: np.ndarray  # counters removed before delivery
    jitter: np.ndarray  # running RFC 3550 J (seconds) after each received packet
    is_video: bool
    bitrate_mbps: np.ndarray = field(default_factory=lambda: np.empty(0))
    fps: np.ndarray = field(default_factory=lambda: np.empty(0))
    loss: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=bool))
    jitter_ms: np.ndarray = field(default_factory=lambda: np.empty(0))  # NaN below 2 packets


@dataclass
class GroundTruth:
    window_s: float
    n_windows: int
    flows: dict[FlowKey, FlowTruth]

    def to_json(self) -> dict:
        def arr(a):
            return [None if isinstance(v, float) and math.isnan(v) else v for v in a.tolist()]

        return {
            "window_s": self.window_s,
            "n_windows": self.n_windows,
            "flows": [
                {
                    "flow": list(k),
                    "dropped": v.dropped.tolist(),
                    "bitrate_mbps": arr(v.bitrate_mbps),
                    "fps": arr(v.fps) if v.is_video else None,
                    "loss": v.loss.astype(int).tolist(),
                    "jitter_ms": arr(v.jitter_ms),
                    "jitter_trace_s": v.jitter.tolist(),
                }
                for k, v in self.flows.items()
            ],
        }


@dataclass
class SynthSession:
    table: PacketTable
    truth: GroundTruth

    def records(self):
        return self.table.records()

    def write_log(self, path: str | Path) -> int:
        return write_packet_log(self.table.records(), path)


# generation ----------------------------------------------------------------------------

def _schedule(spec: FlowSpec, rng: np.random.Generator):
    """Send times, sizes, frame ids, media times and markers before any drop."""
    if spec.media == "audio":
        n = int(math.floor((spec.stop_s - spec.start_s) / AUDIO_PTIME))
        frame = np.arange(n)
        send = spec.start_s + frame * AUDIO_PTIME
        payload = spec.bitrate_mbps * 1e6 * AUDIO_PTIME / 8.0
        jitter = rng.normal(0.0, spec.size_noise, n) if spec.size_noise else np.zeros(n)
        size = np.maximum(1, np.round(payload * np.exp(jitter))).astype(np.int64) + RTP_HEADER
        ticks = frame * int(round(spec.clock_rate * AUDIO_PTIME))
        return send, size, frame, frame * AUDIO_PTIME, ticks, np.zeros(n, dtype=bool)

    interval = 1.0 / spec.fps
    n_frames = int(math.floor((spec.stop_s - spec.start_s) / interval))
    frame_ids = np.arange(n_frames)
    keep = rng.random(n_frames) >= spec.frame_skip if spec.frame_skip else np.ones(n_frames, bool)
    mean_bytes = spec.bitrate_mbps * 1e6 / spec.fps / 8.0
    is_key = np.zeros(n_frames, dtype=bool)
    if spec.keyframe_every_s > 0:
        t, nxt = 0.0, 0.0
        for k in range(n_frames):
            t = k * interval
            if t >= nxt:
                is_key[k] = True
                nxt = t + spec.keyframe_every_s * rng.uniform(0.85, 1.25)
    key_frac = is_key.mean() if n_frames else 0.0
    p_bytes = mean_bytes / (1.0 + (spec.keyframe_scale - 1.0) * key_frac)
    noise = np.exp(rng.normal(0.0, spec.size_noise, n_frames)) if spec.size_noise else np.ones(n_frames)
    frame_bytes = np.maximum(1, np.round(p_bytes * np.where(is_key, spec.keyframe_scale, 1.0) * noise))
    frame_bytes = frame_bytes.astype(np.int64)[keep]
    frame_ids = frame_ids[keep]
    npk = -(-frame_bytes // MTU_PAYLOAD)
    total = int(npk.sum())
    fidx = np.repeat(np.arange(len(frame_ids)), npk)
    first = np.concatenate(([0], np.cumsum(npk)[:-1]))
    within = np.arange(total) - first[fidx]
    pace = np.minimum(5e-4, interval / (2.0 * npk))
    frame_time = frame_ids * interval
    send = spec.start_s + frame_time[fidx] + within * pace[fidx]
    last = within == npk[fidx] - 1
    size = np.where(last, frame_bytes[fidx] - (npk[fidx] - 1) * MTU_PAYLOAD, MTU_PAYLOAD) + RTP_HEADER
    ticks = frame_ids[fidx] * int(round(spec.clock_rate * interval))
    return send, size.astype(np.int64), frame_ids[fidx], frame_time[fidx], ticks, last


def _drops(n: int, spec: FlowSpec, rng: np.random.Generator) -> np.ndarray:
    drop = np.zeros(n, dtype=bool)
    if not spec.drop_rate:
        return drop
    starts = np.nonzero(rng.random(n) < spec.drop_rate)[0]
    lengths = rng.integers(1, spec.burst_len + 1, size=len(starts))
    for s, b in zip(starts, lengths):
        drop[s:s + b] = True
    return drop


def _signature_delay(send: np.ndarray, drop: np.ndarray, spec: FlowSpec) -> np.ndarray:
    """Queueing-like delay ramp before each drop event, draining afterwards."""
    extra = np.zeros(len(send))
    if not spec.loss_signature or not drop.any():
        return extra
    onset = np.nonzero(drop & ~np.concatenate(([False], drop[:-1])))[0]
    lead, peak, drain = spec.signature_lead_s, spec.signature_peak_s, spec.signature_drain_s
    for t_d in send[onset]:
        lo = np.searchsorted(send, t_d - lead)
        hi = np.searchsorted(send, t_d + drain)
        t = send[lo:hi]
        ramp = np.where(t < t_d, peak * (t - (t_d - lead)) / lead, peak * (1.0 - (t - t_d) / drain))
        extra[lo:hi] = np.maximum(extra[lo:hi], np.clip(ramp, 0.0, peak))
    return extra


def _stalls(arrival: np.ndarray, spec: FlowSpec, rng: np.random.Generator) -> np.ndarray:
    """Hold every packet that arrives during a stall and release them back to back."""
    if not spec.stall_rate or not len(arrival):
        return arrival
    lo, hi = float(arrival.min()), float(arrival.max())
    count = rng.poisson(spec.stall_rate * (hi - lo))
    starts = np.sort(rng.uniform(lo, hi, count))
    lengths = rng.uniform(spec.stall_min_s, spec.stall_max_s, count)
    out = arrival.copy()
    for s, d in zip(starts, lengths):
        held = np.nonzero((out >= s) & (out < s + d))[0]
        held = held[np.argsort(out[held], kind="stable")]
        out[held] = s + d + np.arange(len(held)) * spec.stall_spacing_s
    return out


def _jitter_trace(arrival, media_time) -> np.ndarray:
    # plain recursion, kept deliberately separate from the vectorised labeler
    out = np.zeros(len(arrival))
    j = 0.0
    for i in range(1, len(arrival)):
        d = (arrival[i] - arrival[i - 1]) - (media_time[i] - media_time[i - 1])
        j += (abs(d) - j) / 16.0
        out[i] = j
    return out


def _generate_flow(spec: FlowSpec, rng: np.random.Generator):
    send, size, frame, media_time, ticks, marker = _schedule(spec, rng)
    n = len(send)
    counter = spec.seq0 + np.arange(n, dtype=np.int64)
    drop = _drops(n, spec, rng)
    delay = spec.base_delay_s + _signature_delay(send, drop, spec)
    if spec.delay_noise_s:
        delay = delay + rng.normal(0.0, spec.delay_noise_s, n)
    arrival = _stalls(send + np.maximum(delay, 0.0), spec, rng)
    keep = ~drop
    arrival = arrival[keep]
    if not spec.reorder:
        arrival = np.sort(arrival)  # FIFO delivery: arrival order follows send order
    cols = [counter[keep], size[keep], frame[keep], media_time[keep], ticks[keep], marker[keep]]
    order = np.argsort(arrival, kind="stable")
    arrival = arrival[order]
    cols = [c[order] for c in cols]
    return arrival, cols, counter[drop]


def generate(scenario: SynthScenario) -> SynthSession:
    """Packet table plus ground truth for one scenario; same seed, same bytes."""
    scenario.validate()
    root = np.random.SeedSequence(scenario.seed)
    parts = []
    for code, (spec, ss) in enumerate(zip(scenario.flows, root.spawn(len(scenario.flows)))):
        arrival, cols, dropped = _generate_flow(spec, np.random.default_rng(ss))
        if len(arrival):
            parts.append((code, spec, arrival, cols, dropped))
    if not parts:
        raise InvalidScenario("scenario produced no packets")
    t0 = min(p[2][0] for p in parts)

    flows = [s.key for s in scenario.flows]
    # microsecond resolution, as in the packet log
    arrival = np.round(np.concatenate([p[2] for p in parts]) - t0, 6)
    counter = np.concatenate([p[3][0] for p in parts])
    size = np.concatenate([p[3][1] for p in parts])
    ticks = np.concatenate([p[3][4] for p in parts])
    marker = np.concatenate([p[3][5] for p in parts])
    code = np.concatenate([np.full(len(p[2]), p[0]) for p in parts])
    order = np.lexsort((code, arrival))
    ts0 = np.array([s.ts0 for s in scenario.flows], dtype=np.int64)
    table = PacketTable(
        arrival=arrival[order],
        size=size[order],
        seq=(counter % 65536)[order],
        rtp_ts=((ts0[code] + ticks) % 2**32)[order],
        marker=marker[order].astype(np.int64),
        flow=code[order].astype(np.int64),
        flows=flows,
    )

    n_windows = int(math.floor(table.arrival[-1] / scenario.window_s)) + 1
    truth = {}
    for c, spec, arr, cols, dropped in parts:
        arr = np.round(arr - t0, 6)
        ft = FlowTruth(
            counter=cols[0], arrival=arr, size=cols[1], frame=cols[2], media_time=cols[3],
            dropped=dropped, jitter=_jitter_trace(arr, cols[3]),
            is_video=spec.media in ("video", "screen"),
        )
        _window_truth(ft, scenario.window_s, n_windows)
        truth[spec.key] = ft
    return SynthSession(table, GroundTruth(scenario.window_s, n_windows, truth))


def _window_truth(ft: FlowTruth, window_s: float, n_windows: int) -> None:
    win = np.floor(ft.arrival / window_s).astype(np.int64)
    ft.bitrate_mbps = np.zeros(n_windows)
    ft.fps = np.zeros(n_windows)
    ft.loss = np.zeros(n_windows, dtype=bool)
    ft.jitter_ms = np.full(n_windows, np.nan)
    bounds = np.searchsorted(win, np.arange(n_windows + 1))
    for w in range(n_windows):
        a, b = bounds[w], bounds[w + 1]
        if a == b:
            continue
        ft.bitrate_mbps[w] = int(ft.size[a:b].sum()) * 8.0 / window_s / 1e6
        if ft.is_video:
            ft.fps[w] = len(set(ft.frame[a:b].tolist())) / window_s
        got = set(ft.counter[a:b].tolist())
        ft.loss[w] = any(c not in got for c in range(min(got), max(got) + 1))
        if b - a >= 2:
            ft.jitter_ms[w] = float(np.mean(ft.jitter[a:b])) * 1000.0


# scenario presets ----------------------------------------------------------------------

# Share of windows per concurrent-flow count; targets mean 3.4, max 11, ~10% single.
FLOW_COUNT_MIX = {1: 0.105, 2: 0.235, 3: 0.26, 4: 0.19, 5: 0.1, 6: 0.045, 7: 0.025, 8: 0.015, 11: 0.025}
VIDEO_FPS = (15.0, 24.0, 25.0, 30.0)
SCREEN_FPS = (5.0, 8.0, 10.0)
FRAME_SKIP = 0.08
STALL_RATE = 0.5  # per flow and second
CORPUS_DROP_RATE = 1e-3
MAX_SHARE = 14  # every flow keeps >= 1/14 of the session packet rate so it stays active


def _segment_flows(rng: np.random.Generator, count: int, start: float, stop: float,
                   next_ssrc, drop_rate: float, signature: bool, stall_rate: float) -> list[FlowSpec]:
    kinds = ["audio"] if count == 1 and rng.random() < 0.3 else []
    while len(kinds) < count:
        u = rng.random()
        kinds.append("audio" if u < 0.3 else "screen" if u < 0.4 else "video")
    specs = []
    for i, media in enumerate(kinds):
        if media == "audio":
            rate, fps = rng.uniform(0.024, 0.064), 50.0
        elif media == "screen":
            rate, fps = rng.uniform(0.2, 0.6), float(rng.choice(SCREEN_FPS))
        else:
            rate, fps = rng.uniform(0.6, 2.5), float(rng.choice(VIDEO_FPS))
        specs.append(FlowSpec(
            media=media,
            bitrate_mbps=rate,
            fps=fps,
            start_s=start + rng.uniform(0.0, 0.4),
            stop_s=stop,
            ssrc=next_ssrc(),
            payload_type={"audio": 111, "screen": 100}.get(media, int(rng.choice((96, 97, 98)))),
            ip_src=f"10.0.{rng.integers(0, 4)}.{rng.integers(1, 250)}",
            ip_dst="10.1.0.1",
            port_src=int(rng.integers(10000, 60000)),
            port_dst=5004 + 2 * i,
            base_delay_s=rng.uniform(0.01, 0.06),
            delay_noise_s=rng.uniform(0.0005, 0.004),
            drop_rate=drop_rate * (3.0 if media == "audio" else 1.0),
            burst_len=3,
            keyframe_every_s=rng.uniform(1.0, 1.5) if media == "video" else 0.0,
            keyframe_scale=5.0,
            size_noise=0.25 if media != "audio" else 0.05,
            frame_skip=FRAME_SKIP if media != "audio" else 0.0,
            loss_signature=signature,
            stall_rate=stall_rate,
            seq0=int(rng.integers(0, 65536)),
            ts0=int(rng.integers(0, 2**32)),
        ))
    _balance(specs)
    return specs


def _pps(spec: FlowSpec) -> float:
    if spec.media == "audio":
        return 1.0 / AUDIO_PTIME
    per_frame = max(1.0, spec.bitrate_mbps * 1e6 / spec.fps / 8.0 / MTU_PAYLOAD + 0.5)
    return spec.fps * (1.0 - spec.frame_skip) * per_frame


def _balance(specs: list[FlowSpec]) -> None:
    """Scale video bitrates down until the slowest flow holds its history share."""
    for _ in range(50):
        rates = [_pps(s) for s in specs]
        if min(rates) * MAX_SHARE >= sum(rates):
            return
        for s in specs:
            if s.media != "audio" and _pps(s) > min(rates) * 1.5:
                s.bitrate_mbps *= 0.85


def benchmark_scenario(duration_s: float, seed: int = 0, drop_rate: float = 3e-4,
                       loss_signature: bool = True, segment_s: tuple[float, float] = (25.0, 70.0),
                       gap_s: float = 1.5, force_max: bool = True, stall_rate: float = STALL_RATE) -> SynthScenario:
    """Back-to-back call segments whose flow counts follow FLOW_COUNT_MIX.

    Each segment is one group of concurrent flows; a short silent gap between
    segments lets the previous flows go stale. Segment lengths are drawn so the
    realised share of windows per flow count tracks the mix. With
    ``force_max`` the first segment carries the largest flow count.

    Every flow stalls at ``stall_rate`` per second: arrivals are held for
    0.1-0.4 s and released as one burst, which moves frames and bytes across
    window boundaries. With ``loss_signature`` each drop burst is preceded by
    0.6 s of doubled inter-arrival gaps.
    """
    rng = np.random.default_rng(seed)
    counts = np.array(list(FLOW_COUNT_MIX))
    probs = np.array(list(FLOW_COUNT_MIX.values()))
    probs = probs / probs.sum()
    used: set[int] = set()

    def next_ssrc() -> int:
        while True:
            v = int(rng.integers(1, 2**32))
            if v not in used:
                used.add(v)
                return v

    flows, t, need_max = [], 0.0, force_max
    while t + segment_s[0] <= duration_s:
        length = min(rng.uniform(*segment_s), duration_s - t)
        count = int(counts.max()) if need_max else int(rng.choice(counts, p=probs))
        need_max = False
        flows += _segment_flows(rng, count, t, t + length, next_ssrc,
                                drop_rate, loss_signature, stall_rate)
        t += length + gap_s
    return SynthScenario(duration_s=duration_s, flows=flows, seed=seed)


def default_benchmark_scenario(seed: int = 0) -> SynthScenario:
    """Long session (>= 10^4 windows) with the reference flow-count statistics."""
    return benchmark_scenario(5400.0, seed=seed)


def training_corpus(n_sessions: int, duration_s: float, seed: int = 0, **kw) -> list[SynthScenario]:
    seeds = np.random.SeedSequence(seed).generate_state(n_sessions)
    kw.setdefault("force_max", False)
    kw.setdefault("drop_rate", CORPUS_DROP_RATE)
    return [benchmark_scenario(duration_s, seed=int(s), **kw) for s in seeds]


# scenario files ------------------------------------------------------------------------

_SPEC_TYPES = {f.name: f.type for f in fields(FlowSpec)}


def _coerce(name: str, raw: str):
    typ = str(_SPEC_TYPES[name])
    if "bool" in typ:
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise InvalidScenario(f"{name}: expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if "int" in typ and "float" not in typ:
        return int(raw)
    if "float" in typ:
        return float(raw)
    return raw


def load_scenario(path: str | Path) -> SynthScenario:
    """Read an INI scenario: a [session] section plus one [flow.<name>] per flow.

    ``[session] preset = benchmark`` builds the multi-segment benchmark
    scenario for ``duration_s`` instead of listing flows.
    """
    cp = configparser.ConfigParser(interpolation=None)
    try:
        if not cp.read(path, encoding="utf-8"):
            raise InvalidScenario(f"cannot read scenario {path}")
    except configparser.Error as exc:
        raise InvalidScenario(str(exc)) from exc
    if "session" not in cp:
        raise InvalidScenario("scenario needs a [session] section")
    sess = dict(cp["session"])
    try:
        duration = float(sess.pop("duration_s"))
        seed = int(sess.pop("seed", "0"))
        preset = sess.pop("preset", "")
        window_s = float(sess.pop("window_s", "0.5"))
    except (KeyError, ValueError) as exc:
        raise InvalidScenario(f"[session]: {exc}") from exc
    if sess:
        raise InvalidScenario(f"[session]: unknown keys {sorted(sess)}")
    if preset:
        if preset != "benchmark":
            raise InvalidScenario(f"unknown preset {preset!r}")
        sc = benchmark_scenario(duration, seed=seed)
        sc.window_s = window_s
        return sc
    flows = []
    for name in cp.sections():
        if not name.startswith("flow."):
            if name != "session":
                raise InvalidScenario(f"unknown section [{name}]")
            continue
        kv = dict(cp[name])
        unknown = set(kv) - set(_SPEC_TYPES)
        if unknown:
            raise InvalidScenario(f"[{name}]: unknown keys {sorted(unknown)}")
        try:
            flows.append(FlowSpec(**{k: _coerce(k, v) for k, v in kv.items()}))
        except (TypeError, ValueError) as exc:
            raise InvalidScenario(f"[{name}]: {exc}") from exc
    sc = SynthScenario(duration_s=duration, flows=flows, seed=seed, window_s=window_s)
    sc.validate()
    return sc


def write_truth(truth: GroundTruth, path: str | Path) -> None:
    Path(path).write_text(json.dumps(truth.to_json()), encoding="utf-8")


def scenario_to_json(sc: SynthScenario) -> dict:
    return {"duration_s": sc.duration_s, "seed": sc.seed, "window_s": sc.window_s,
            "flows": [asdict(f) for f in sc.flows]}
