"""Flow grouping, active-flow selection, packet features and QoS labels."""
from __future__ import annotations

import gzip
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np
from scipy.signal import lfilter

from .errors import ConfigError, DataError, NoActiveFlows, UnknownClockRate, WrongCount
from .ingest import PacketRecord

log = logging.getLogger(__name__)

FEATURE_NAMES = ("abs_iat", "rel_iat", "size", "ts_delta", "marker", "seq_diff")
N_FEATURES = len(FEATURE_NAMES)
UNKNOWN_CLOCK_SCALE = 1e-5
DATASET_FORMAT = "p2p-dataset"
DATASET_VERSION = 1

VIDEO_PAYLOAD_TYPES = frozenset({96, 97, 98, 99, 100, 101, 102})
DEFAULT_CLOCK_RATES = {
    **{pt: 90000 for pt in VIDEO_PAYLOAD_TYPES},
    0: 8000,  # PCMU
    8: 8000,  # PCMA
    9: 8000,  # G722 (RTP clock is 8 kHz by RFC 3551 convention)
    103: 48000,
    109: 48000,
    111: 48000,
}


class FlowKey(NamedTuple):
    ip_src: str
    ip_dst: str
    port_src: int
    port_dst: int
    ssrc: int
    payload_type: int

    @classmethod
    def of(cls, rec: PacketRecord) -> "FlowKey":
        return cls(rec.ip_src, rec.ip_dst, rec.port_src, rec.port_dst, rec.ssrc, rec.payload_type)


@dataclass
class WindowingConfig:
    window_ms: float = 500.0
    history_packets: int = 2048
    per_flow_packets: int = 128
    staleness_s: float = 1.0
    clock_rates: dict[int, float] = field(default_factory=lambda: dict(DEFAULT_CLOCK_RATES))
    video_payload_types: frozenset[int] = VIDEO_PAYLOAD_TYPES

    def __post_init__(self):
        self.video_payload_types = frozenset(self.video_payload_types)
        if self.per_flow_packets < 1 or self.per_flow_packets > self.history_packets:
            raise ConfigError("need 1 <= per_flow_packets <= history_packets")
        if self.window_ms <= 0 or self.staleness_s <= 0:
            raise ConfigError("durations must be positive")
        if any(r <= 0 for r in self.clock_rates.values()):
            raise ConfigError("clock rates must be positive")

    @property
    def window_s(self) -> float:
        return self.window_ms / 1000.0


@dataclass
class PacketTable:
    """Columnar, arrival-sorted view of one session's packets."""

    arrival: np.ndarray
    size: np.ndarray
    seq: np.ndarray
    rtp_ts: np.ndarray
    marker: np.ndarray
    flow: np.ndarray  # index into ``flows``
    flows: list[FlowKey]

    def __post_init__(self):
        order = np.argsort(self.arrival, kind="stable")
        if not np.array_equal(order, np.arange(len(order))):
            for name in ("arrival", "size", "seq", "rtp_ts", "marker", "flow"):
                setattr(self, name, getattr(self, name)[order])

    def __len__(self) -> int:
        return len(self.arrival)

    @classmethod
    def from_records(cls, records: Iterable[PacketRecord]) -> "PacketTable":
        codes: dict[FlowKey, int] = {}
        cols: dict[str, list] = {k: [] for k in ("arrival", "size", "seq", "rtp_ts", "marker", "flow")}
        for r in records:
            key = FlowKey.of(r)
            code = codes.setdefault(key, len(codes))
            cols["arrival"].append(r.arrival_time)
            cols["size"].append(r.size_bytes)
            cols["seq"].append(r.seq)
            cols["rtp_ts"].append(r.rtp_timestamp)
            cols["marker"].append(r.marker)
            cols["flow"].append(code)
        return cls(
            arrival=np.asarray(cols["arrival"], dtype=np.float64),
            size=np.asarray(cols["size"], dtype=np.int64),
            seq=np.asarray(cols["seq"], dtype=np.int64),
            rtp_ts=np.asarray(cols["rtp_ts"], dtype=np.int64),
            marker=np.asarray(cols["marker"], dtype=np.int64),
            flow=np.asarray(cols["flow"], dtype=np.int64),
            flows=list(codes),
        )

    def records(self) -> Iterator[PacketRecord]:
        for i in range(len(self)):
            k = self.flows[self.flow[i]]
            yield PacketRecord(
                arrival_time=float(self.arrival[i]),
                ip_src=k.ip_src,
                ip_dst=k.ip_dst,
                port_src=k.port_src,
                port_dst=k.port_dst,
                ssrc=k.ssrc,
                payload_type=k.payload_type,
                seq=int(self.seq[i]),
                rtp_timestamp=int(self.rtp_ts[i]),
                marker=bool(self.marker[i]),
                size_bytes=int(self.size[i]),
            )

    def slice(self, start: int, stop: int) -> "PacketTable":
        return PacketTable(
            self.arrival[start:stop], self.size[start:stop], self.seq[start:stop],
            self.rtp_ts[start:stop], self.marker[start:stop], self.flow[start:stop], self.flows,
        )


@dataclass
class WindowSample:
    flow: FlowKey
    features: np.ndarray
    label_bitrate_mbps: float
    label_jitter_ms: float
    label_fps: float
    label_loss: bool
    fps_mask: bool
    jitter_mask: bool
    window_start: float


@dataclass
class WindowBatch:
    window_start: float
    samples: list[WindowSample]

    def __len__(self) -> int:
        return len(self.samples)


def unwrap_seq(seqs: Sequence[int] | np.ndarray) -> np.ndarray:
    """Extend 16-bit sequence numbers so consecutive deltas lie in [-32768, 32767]."""
    raw = np.asarray(seqs, dtype=np.int64)
    if raw.size == 0:
        return raw.copy()
    delta = (np.diff(raw) + 32768) % 65536 - 32768
    return np.concatenate(([raw[0]], raw[0] + np.cumsum(delta)))


def signed_ts_delta(a: np.ndarray, b) -> np.ndarray:
    """(a - b) over the 32-bit RTP timestamp ring, as a signed value."""
    return (np.asarray(a, dtype=np.int64) - np.asarray(b, dtype=np.int64) + 2**31) % 2**32 - 2**31


def rfc3550_jitter(arrival: np.ndarray, rtp_ts: np.ndarray, clock_rate: float | None) -> np.ndarray:
    """Running interarrival jitter J (seconds) after each packet, J=0 at the first."""
    if clock_rate is None:
        raise UnknownClockRate("no clock rate for this payload type")
    arrival = np.asarray(arrival, dtype=np.float64)
    if arrival.size == 0:
        return arrival.copy()
    d = np.diff(arrival) - signed_ts_delta(rtp_ts[1:], rtp_ts[:-1]) / clock_rate
    # J_i = (15/16) J_{i-1} + |D_i| / 16
    j = lfilter([1.0 / 16.0], [1.0, -15.0 / 16.0], np.abs(d))
    return np.concatenate(([0.0], j))


def build_features(
    arrival: np.ndarray,
    size: np.ndarray,
    rtp_ts: np.ndarray,
    marker: np.ndarray,
    ext_seq: np.ndarray,
    clock_rate: float | None,
    n: int,
) -> np.ndarray:
    """Six per-packet features for exactly ``n`` arrival-ordered packets of one flow."""
    if len(arrival) != n:
        raise WrongCount(f"expected {n} packets, got {len(arrival)}")
    arrival = np.asarray(arrival, dtype=np.float64)
    out = np.empty((n, N_FEATURES), dtype=np.float64)
    out[0, 0] = 0.0
    out[1:, 0] = np.diff(arrival)
    out[:, 1] = arrival - arrival[0]
    out[:, 2] = size
    ticks = signed_ts_delta(rtp_ts, rtp_ts[0])
    out[:, 3] = ticks / clock_rate if clock_rate else ticks * UNKNOWN_CLOCK_SCALE
    out[:, 4] = np.asarray(marker, dtype=np.float64)
    out[0, 5] = 1.0
    out[1:, 5] = np.diff(np.asarray(ext_seq, dtype=np.int64))
    return out


def features_from_records(records: Sequence[PacketRecord], config: WindowingConfig) -> np.ndarray:
    t = PacketTable.from_records(records)
    if len(t.flows) > 1:
        raise DataError("features_from_records: packets span more than one flow")
    pt = t.flows[0].payload_type if t.flows else None
    return build_features(t.arrival, t.size, t.rtp_ts, t.marker, unwrap_seq(t.seq),
                          config.clock_rates.get(pt), config.per_flow_packets)


def label_bitrate(sizes: np.ndarray, window_s: float) -> float:
    return float(np.sum(sizes, dtype=np.int64)) * 8.0 / window_s / 1e6


def label_jitter(j_in_window: np.ndarray) -> float | None:
    """Mean running jitter (ms) over in-window packets; None below two packets."""
    if len(j_in_window) < 2:
        return None
    return float(np.mean(j_in_window)) * 1000.0


def label_fps(rtp_ts: np.ndarray, window_s: float) -> float:
    return len(np.unique(rtp_ts)) / window_s


def label_loss(ext_seq: np.ndarray) -> bool:
    if len(ext_seq) <= 1:
        return False
    uniq = np.unique(ext_seq)
    return bool(uniq[-1] - uniq[0] + 1 > len(uniq))


def _active_codes(hist_flow, counts_needed, last_before_t, t, staleness, first_seen, flows) -> list[int]:
    counts = np.bincount(hist_flow, minlength=len(flows))
    cand = np.nonzero(counts >= counts_needed)[0]
    keep = [int(c) for c in cand if last_before_t(int(c)) >= t - staleness]
    keep.sort(key=lambda c: (first_seen[c], flows[c]))
    return keep


def active_flows(history: PacketTable, t: float, config: WindowingConfig,
                 first_seen: dict[FlowKey, float] | None = None) -> list[FlowKey]:
    """Flows with >= n packets in ``history`` whose newest packet is within staleness of t.

    ``history`` is the session's most recent <= N packets before t. Ordering
    uses each flow's first-ever arrival (``first_seen``, defaulting to the
    first arrival inside ``history``), ties broken by flow key.
    """
    seen = np.full(len(history.flows), np.inf)
    last = np.full(len(history.flows), -np.inf)
    np.minimum.at(seen, history.flow, history.arrival)
    np.maximum.at(last, history.flow, history.arrival)
    if first_seen is not None:
        for c, k in enumerate(history.flows):
            if k in first_seen:
                seen[c] = first_seen[k]
    codes = _active_codes(history.flow, config.per_flow_packets, lambda c: last[c], t,
                          config.staleness_s, seen, history.flows)
    return [history.flows[c] for c in codes]


@dataclass
class _FlowState:
    idx: np.ndarray
    arrival: np.ndarray
    ext_seq: np.ndarray
    jitter: np.ndarray | None
    clock_rate: float | None
    is_video: bool


def _flow_states(table: PacketTable, config: WindowingConfig) -> list[_FlowState]:
    states = []
    for code, key in enumerate(table.flows):
        idx = np.nonzero(table.flow == code)[0]
        clock = config.clock_rates.get(key.payload_type)
        arr = table.arrival[idx]
        jit = rfc3550_jitter(arr, table.rtp_ts[idx], clock) if clock else None
        states.append(_FlowState(idx, arr, unwrap_seq(table.seq[idx]), jit, clock,
                                 key.payload_type in config.video_payload_types))
    return states


def window_starts(table: PacketTable, config: WindowingConfig) -> np.ndarray:
    if len(table) == 0:
        return np.empty(0)
    t0, t_end = table.arrival[0], table.arrival[-1]
    count = int(np.floor((t_end - t0) / config.window_s)) + 1
    return t0 + np.arange(count) * config.window_s


def build_dataset(table: PacketTable | Iterable[PacketRecord], config: WindowingConfig | None = None) -> list[WindowBatch]:
    """Tumbling windows over one session; one WindowBatch per window with >= 1 active flow."""
    config = config or WindowingConfig()
    if not isinstance(table, PacketTable):
        table = PacketTable.from_records(table)
    if len(table) == 0:
        return []
    states = _flow_states(table, config)
    batches = []
    for t in window_starts(table, config):
        batch = _batch_at(table, states, float(t), config)
        if batch is not None:
            batches.append(batch)
    return batches


def window_at(table: PacketTable | Iterable[PacketRecord], t: float,
              config: WindowingConfig | None = None) -> WindowBatch:
    """The WindowBatch for the window [t, t + window) of one session.

    Raises NoActiveFlows when no flow qualifies at t.
    """
    config = config or WindowingConfig()
    if not isinstance(table, PacketTable):
        table = PacketTable.from_records(table)
    batch = _batch_at(table, _flow_states(table, config), float(t), config) if len(table) else None
    if batch is None:
        raise NoActiveFlows(f"no active flow at t={t:.6f}")
    return batch


def _batch_at(table: PacketTable, states: list[_FlowState], t: float,
              config: WindowingConfig) -> WindowBatch | None:
    n, N = config.per_flow_packets, config.history_packets
    end = int(np.searchsorted(table.arrival, t, side="left"))
    start = max(0, end - N)
    if end - start < n:
        return None
    first_seen = [s.arrival[0] for s in states]
    pos = {}

    def last_before(c):
        p = int(np.searchsorted(states[c].arrival, t, side="left"))
        pos[c] = p
        return states[c].arrival[p - 1] if p > 0 else -np.inf

    codes = _active_codes(table.flow[start:end], n, last_before, t, config.staleness_s,
                          first_seen, table.flows)
    if not codes:
        return None
    return WindowBatch(t, [_make_sample(table, states[c], table.flows[c], pos[c], t, config) for c in codes])


def _make_sample(table: PacketTable, st: _FlowState, key: FlowKey, p: int, t: float,
                 config: WindowingConfig) -> WindowSample:
    n, ws = config.per_flow_packets, config.window_s
    q = int(np.searchsorted(st.arrival, t + ws, side="left"))
    hist = st.idx[p - n:p]
    feats = build_features(table.arrival[hist], table.size[hist], table.rtp_ts[hist],
                           table.marker[hist], st.ext_seq[p - n:p], st.clock_rate, n)
    win = st.idx[p:q]
    jitter = label_jitter(st.jitter[p:q]) if st.jitter is not None else None
    return WindowSample(
        flow=key,
        features=feats,
        label_bitrate_mbps=label_bitrate(table.size[win], ws),
        label_jitter_ms=0.0 if jitter is None else jitter,
        label_fps=label_fps(table.rtp_ts[win], ws) if st.is_video else 0.0,
        label_loss=label_loss(st.ext_seq[p:q]),
        fps_mask=st.is_video,
        jitter_mask=jitter is not None,
        window_start=float(t),
    )


# dataset file ------------------------------------------------------------------------

def _open_text(path: Path, mode: str):
    if path.suffix == ".gz":
        return gzip.open(path, mode + "t", encoding="utf-8", newline="\n")
    return open(path, mode, encoding="utf-8", newline="\n")


def write_dataset(batches: Sequence[WindowBatch], path: str | Path, config: WindowingConfig,
                  session: str = "") -> None:
    path = Path(path)
    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "session": session,
        "window_ms": config.window_ms,
        "per_flow_packets": config.per_flow_packets,
        "history_packets": config.history_packets,
        "staleness_s": config.staleness_s,
        "features": list(FEATURE_NAMES),
    }
    with _open_text(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for b in batches:
            rec = {
                "window_start": b.window_start,
                "samples": [
                    {
                        "flow": list(s.flow),
                        "features": s.features.ravel().tolist(),
                        "bitrate_mbps": s.label_bitrate_mbps,
                        "jitter_ms": s.label_jitter_ms,
                        "fps": s.label_fps,
                        "loss": int(s.label_loss),
                        "fps_mask": int(s.fps_mask),
                        "jitter_mask": int(s.jitter_mask),
                    }
                    for s in b.samples
                ],
            }
            fh.write(json.dumps(rec) + "\n")


def read_dataset(path: str | Path) -> tuple[dict, list[WindowBatch]]:
    path = Path(path)
    with _open_text(path, "r") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != DATASET_FORMAT or header.get("version") != DATASET_VERSION:
            raise DataError(f"{path}: not a v{DATASET_VERSION} dataset file")
        n = header["per_flow_packets"]
        batches = []
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            t = rec["window_start"]
            samples = [
                WindowSample(
                    flow=FlowKey(*s["flow"]),
                    features=np.asarray(s["features"], dtype=np.float64).reshape(n, N_FEATURES),
                    label_bitrate_mbps=s["bitrate_mbps"],
                    label_jitter_ms=s["jitter_ms"],
                    label_fps=s["fps"],
                    label_loss=bool(s["loss"]),
                    fps_mask=bool(s["fps_mask"]),
                    jitter_mask=bool(s["jitter_mask"]),
                    window_start=t,
                )
                for s in rec["samples"]
            ]
            batches.append(WindowBatch(t, samples))
    return header, batches


def read_dataset_dir(path: str | Path) -> dict[str, list[WindowBatch]]:
    """Sessions keyed by name from a directory of dataset files (or one file)."""
    path = Path(path)
    files = [path] if path.is_file() else sorted(
        p for p in path.iterdir() if p.name.endswith((".jsonl", ".jsonl.gz"))
    )
    if not files:
        raise DataError(f"{path}: no dataset files")
    out = {}
    for f in files:
        header, batches = read_dataset(f)
        out[header.get("session") or f.name.split(".")[0]] = batches
    return out
