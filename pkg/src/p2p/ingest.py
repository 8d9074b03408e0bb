"""Packet ingestion: pcap/pcapng captures and the CSV packet-log format."""
from __future__ import annotations

import logging
import socket
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Iterator

import dpkt
import numpy as np

from .errors import BadVersion, MalformedLine, NonMonotonicTime, NoRtpFound, TooShort, UnreadableFile

log = logging.getLogger(__name__)

RTP_HEADER_LEN = 12
RTCP_PT_RANGE = range(64, 96)

LOG_COLUMNS = (
    "arrival_time",
    "ip_src",
    "ip_dst",
    "port_src",
    "port_dst",
    "ssrc",
    "payload_type",
    "seq",
    "rtp_timestamp",
    "marker",
    "size_bytes",
)


@dataclass(frozen=True, slots=True)
class RtpHeader:
    version: int
    padding: bool
    extension: bool
    marker: bool
    csrc_count: int
    payload_type: int
    seq: int
    timestamp: int
    ssrc: int

    @property
    def header_len(self) -> int:
        return RTP_HEADER_LEN + 4 * self.csrc_count


@dataclass(frozen=True, slots=True)
class PacketRecord:
    arrival_time: float
    ip_src: str
    ip_dst: str
    port_src: int
    port_dst: int
    ssrc: int
    payload_type: int
    seq: int
    rtp_timestamp: int
    marker: bool
    size_bytes: int

    def validate(self) -> None:
        """Raise ValueError when a field violates the record invariants."""
        if not (self.arrival_time >= 0 and np.isfinite(self.arrival_time)):
            raise ValueError(f"arrival_time {self.arrival_time} must be finite and >= 0")
        if self.size_bytes < RTP_HEADER_LEN:
            raise ValueError(f"size_bytes {self.size_bytes} below RTP header length")
        for name in ("port_src", "port_dst"):
            if not 0 <= getattr(self, name) <= 0xFFFF:
                raise ValueError(f"{name} out of range")
        if not 0 <= self.payload_type <= 127:
            raise ValueError(f"payload_type {self.payload_type} not in 0..127")
        if not 0 <= self.seq <= 0xFFFF:
            raise ValueError(f"seq {self.seq} not 16-bit")
        if not 0 <= self.ssrc <= 0xFFFFFFFF:
            raise ValueError(f"ssrc {self.ssrc} not 32-bit")
        if not 0 <= self.rtp_timestamp <= 0xFFFFFFFF:
            raise ValueError(f"rtp_timestamp {self.rtp_timestamp} not 32-bit")


def parse_rtp_header(payload: bytes) -> RtpHeader:
    if len(payload) < RTP_HEADER_LEN:
        raise TooShort(f"{len(payload)} bytes < {RTP_HEADER_LEN}")
    b0, b1, seq, ts, ssrc = struct.unpack("!BBHII", payload[:RTP_HEADER_LEN])
    version = b0 >> 6
    if version != 2:
        raise BadVersion(f"RTP version {version}")
    csrc_count = b0 & 0x0F
    if len(payload) < RTP_HEADER_LEN + 4 * csrc_count:
        raise TooShort(f"CSRC list truncated ({csrc_count} entries)")
    return RtpHeader(
        version=version,
        padding=bool(b0 & 0x20),
        extension=bool(b0 & 0x10),
        marker=bool(b1 & 0x80),
        csrc_count=csrc_count,
        payload_type=b1 & 0x7F,
        seq=seq,
        timestamp=ts,
        ssrc=ssrc,
    )


def _open_capture(fh):
    try:
        return dpkt.pcap.Reader(fh)
    except (ValueError, dpkt.UnpackError):
        fh.seek(0)
    try:
        return dpkt.pcapng.Reader(fh)
    except (ValueError, dpkt.UnpackError) as exc:
        raise UnreadableFile(f"not a pcap or pcapng file: {exc}") from exc


def _link_to_ip(datalink: int, buf: bytes):
    if datalink == dpkt.pcap.DLT_EN10MB:
        return dpkt.ethernet.Ethernet(buf).data
    if datalink in (dpkt.pcap.DLT_RAW, 101, 228, 229):
        return dpkt.ip.IP(buf) if buf and buf[0] >> 4 == 4 else dpkt.ip6.IP6(buf)
    if datalink == dpkt.pcap.DLT_LINUX_SLL:
        return dpkt.sll.SLL(buf).data
    if datalink == dpkt.pcap.DLT_NULL:
        return dpkt.loopback.Loopback(buf).data
    return dpkt.ethernet.Ethernet(buf).data


@dataclass
class IngestStats:
    frames: int = 0
    udp: int = 0
    accepted: int = 0
    not_rtp: int = 0
    rtcp: int = 0
    truncated: int = 0


def ingest_pcap(path: str | Path, udp_only: bool = True, stats: IngestStats | None = None) -> list[PacketRecord]:
    """Read every RTP-over-UDP packet of a capture, sorted and rebased to t=0.

    Only UDP is ever inspected for RTP; ``udp_only`` is kept for CLI
    symmetry. Truncated frames are counted and skipped.
    """
    stats = stats if stats is not None else IngestStats()
    raw: list[tuple[float, int, PacketRecord]] = []
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise UnreadableFile(str(exc)) from exc
    with fh:
        reader = _open_capture(fh)
        datalink = reader.datalink()
        try:
            for order, (ts, buf) in enumerate(reader):
                stats.frames += 1
                rec = _frame_to_record(datalink, float(ts), buf, stats)
                if rec is not None:
                    raw.append((float(ts), order, rec))
        except (dpkt.NeedData, struct.error) as exc:
            log.warning("capture ends mid-record: %s", exc)
    if not raw:
        raise NoRtpFound(f"{path}: no RTP packets found")
    raw.sort(key=lambda r: (r[0], r[1]))
    t0 = raw[0][0]
    out = []
    for ts, _, rec in raw:
        t = round((ts - t0) * 1e6) / 1e6
        out.append(_replace_time(rec, t))
    stats.accepted = len(out)
    log.info("ingested %d RTP packets (%d frames, %d truncated, %d rtcp)", len(out), stats.frames, stats.truncated, stats.rtcp)
    return out


def _replace_time(rec: PacketRecord, t: float) -> PacketRecord:
    vals = {f.name: getattr(rec, f.name) for f in fields(rec)}
    vals["arrival_time"] = t
    return PacketRecord(**vals)


def _ip_str(ip) -> tuple[str, str]:
    family = socket.AF_INET6 if isinstance(ip, dpkt.ip6.IP6) else socket.AF_INET
    return socket.inet_ntop(family, ip.src), socket.inet_ntop(family, ip.dst)


def _frame_to_record(datalink: int, ts: float, buf: bytes, stats: IngestStats) -> PacketRecord | None:
    try:
        ip = _link_to_ip(datalink, buf)
    except (dpkt.UnpackError, IndexError, struct.error):
        stats.truncated += 1
        return None
    if not isinstance(ip, (dpkt.ip.IP, dpkt.ip6.IP6)):
        return None
    udp = ip.data
    if not isinstance(udp, dpkt.udp.UDP):
        return None
    stats.udp += 1
    payload = bytes(udp.data)
    claimed = udp.ulen - 8
    if claimed > len(payload):
        stats.truncated += 1
        return None
    payload = payload[:claimed] if claimed >= 0 else payload
    try:
        hdr = parse_rtp_header(payload)
    except (TooShort, BadVersion):
        stats.not_rtp += 1
        return None
    if hdr.payload_type in RTCP_PT_RANGE:
        stats.rtcp += 1
        return None
    src, dst = _ip_str(ip)
    return PacketRecord(
        arrival_time=ts,
        ip_src=src,
        ip_dst=dst,
        port_src=udp.sport,
        port_dst=udp.dport,
        ssrc=hdr.ssrc,
        payload_type=hdr.payload_type,
        seq=hdr.seq,
        rtp_timestamp=hdr.timestamp,
        marker=hdr.marker,
        size_bytes=len(payload),
    )


def format_time(t: float) -> str:
    # shortest exact round-trip form, padded to at least 6 fractional digits
    return np.format_float_positional(t, unique=True, trim="k", min_digits=6)


def write_packet_log(records: Iterable[PacketRecord], path: str | Path) -> int:
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(LOG_COLUMNS) + "\n")
        for r in records:
            fh.write(
                f"{format_time(r.arrival_time)},{r.ip_src},{r.ip_dst},{r.port_src},{r.port_dst},"
                f"{r.ssrc},{r.payload_type},{r.seq},{r.rtp_timestamp},{int(r.marker)},{r.size_bytes}\n"
            )
            count += 1
    return count


def iter_packet_log(path: str | Path) -> Iterator[PacketRecord]:
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise UnreadableFile(str(exc)) from exc
    with fh:
        header = fh.readline().rstrip("\n")
        if tuple(header.split(",")) != LOG_COLUMNS:
            raise MalformedLine(1, f"bad header {header!r}")
        prev = -np.inf
        for line_no, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            rec = _parse_log_line(line, line_no)
            if rec.arrival_time < prev:
                raise NonMonotonicTime(line_no, f"arrival_time {rec.arrival_time} < previous {prev}")
            prev = rec.arrival_time
            yield rec


def _parse_log_line(line: str, line_no: int) -> PacketRecord:
    parts = line.split(",")
    if len(parts) != len(LOG_COLUMNS):
        raise MalformedLine(line_no, f"expected {len(LOG_COLUMNS)} fields, got {len(parts)}")
    try:
        marker = parts[9]
        if marker not in ("0", "1"):
            raise ValueError(f"marker must be 0 or 1, got {marker!r}")
        rec = PacketRecord(
            arrival_time=float(parts[0]),
            ip_src=parts[1],
            ip_dst=parts[2],
            port_src=int(parts[3]),
            port_dst=int(parts[4]),
            ssrc=int(parts[5]),
            payload_type=int(parts[6]),
            seq=int(parts[7]),
            rtp_timestamp=int(parts[8]),
            marker=marker == "1",
            size_bytes=int(parts[10]),
        )
        rec.validate()
    except ValueError as exc:
        raise MalformedLine(line_no, str(exc)) from exc
    return rec


def read_packet_log(path: str | Path) -> list[PacketRecord]:
    return list(iter_packet_log(path))
