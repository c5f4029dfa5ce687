"""Bidirectional flow assembly and feature finalization."""

from __future__ import annotations

import heapq
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field

from .features import FeatureVector
from .packets import PROTO_TCP, PacketError, PacketRecord, parse_packet
from .pcapio import TruncatedPcapError, read_pcap

log = logging.getLogger(__name__)


@dataclass
class MeterConfig:
    activity_threshold_us: int = 1_000_000
    idle_timeout_us: int = 600_000_000
    ooo_tolerance_us: int = 1_000
    # Finalize any flow open this long even if it is still active. Off for
    # offline extraction; the detector turns it on to bound alert latency.
    active_timeout_us: int | None = None

    def __post_init__(self):
        if self.activity_threshold_us < 0 or self.idle_timeout_us <= 0 or self.ooo_tolerance_us < 0:
            raise ValueError("meter thresholds must be non-negative (idle timeout positive)")
        if self.active_timeout_us is not None and self.active_timeout_us <= 0:
            raise ValueError("active_timeout_us must be positive")


@dataclass(frozen=True)
class FlowKey:
    src_ip: str
    src_port: int
    dst_ip: str
    dst_port: int
    protocol: int

    @classmethod
    def of(cls, pkt: PacketRecord) -> "FlowKey":
        return cls(pkt.src_ip, pkt.src_port, pkt.dst_ip, pkt.dst_port, pkt.protocol)

    def canonical(self) -> tuple:
        a = (self.src_ip, self.src_port)
        b = (self.dst_ip, self.dst_port)
        return (a, b, self.protocol) if a <= b else (b, a, self.protocol)

    def reversed(self) -> "FlowKey":
        return FlowKey(self.dst_ip, self.dst_port, self.src_ip, self.src_port, self.protocol)


def canonical_key(pkt: PacketRecord) -> tuple:
    a = (pkt.src_ip, pkt.src_port)
    b = (pkt.dst_ip, pkt.dst_port)
    return (a, b, pkt.protocol) if a <= b else (b, a, pkt.protocol)


class RunningStat:
    """Exact integer accumulators for count, sum, sum of squares, min and max."""

    __slots__ = ("n", "total", "sumsq", "lo", "hi")

    def __init__(self):
        self.n = 0
        self.total = 0
        self.sumsq = 0
        self.lo = 0
        self.hi = 0

    def add(self, v: int):
        if self.n == 0:
            self.lo = self.hi = v
        elif v < self.lo:
            self.lo = v
        elif v > self.hi:
            self.hi = v
        self.n += 1
        self.total += v
        self.sumsq += v * v

    def copy(self) -> "RunningStat":
        c = RunningStat()
        c.n, c.total, c.sumsq, c.lo, c.hi = self.n, self.total, self.sumsq, self.lo, self.hi
        return c

    def summary(self) -> tuple[float, float, float, float]:
        """(min, mean, max, sample std); all zero for an empty group."""
        n = self.n
        if n == 0:
            return 0, 0.0, 0, 0.0
        mean = self.total / n
        if n < 2:
            std = 0.0
        else:
            # integer numerator keeps the variance exact up to the final division
            std = math.sqrt((n * self.sumsq - self.total * self.total) / (n * (n - 1)))
        return self.lo, mean, self.hi, std


class DirectionStats:
    __slots__ = ("packets", "volume", "header_bytes", "length", "iat", "last_ts", "psh", "urg", "fin")

    def __init__(self):
        self.packets = 0
        self.volume = 0
        self.header_bytes = 0
        self.length = RunningStat()
        self.iat = RunningStat()
        self.last_ts = 0
        self.psh = 0
        self.urg = 0
        self.fin = False

    def add(self, pkt: PacketRecord, ts: int):
        if self.packets:
            self.iat.add(ts - self.last_ts)
        self.last_ts = ts
        self.packets += 1
        self.volume += pkt.ip_total_len
        self.header_bytes += pkt.ip_header_len + pkt.transport_header_len
        self.length.add(pkt.ip_total_len)
        flags = pkt.flags
        if flags:
            if "PSH" in flags:
                self.psh += 1
            if "URG" in flags:
                self.urg += 1
            if "FIN" in flags:
                self.fin = True


class FlowState:
    """Accumulators for one live flow; the creating packet defines forward."""

    def __init__(self, key: FlowKey, ts_us: int, serial: int = 0):
        self.key = key
        self.serial = serial
        self.first_ts = ts_us
        self.last_ts = ts_us
        self.fwd = DirectionStats()
        self.bwd = DirectionStats()
        self.active_start = ts_us
        self.active = RunningStat()
        self.idle = RunningStat()
        self.subflows = 1
        self.rst = False
        self.ooo_events = 0
        self.refs: list = []

    def is_forward(self, pkt: PacketRecord) -> bool:
        # the packet already matched the canonical key, so the source endpoint decides
        return pkt.src_ip == self.key.src_ip and pkt.src_port == self.key.src_port

    def update(self, pkt: PacketRecord, config: MeterConfig, ref=None) -> None:
        ts = pkt.timestamp_us
        gap = ts - self.last_ts
        if gap < 0:
            if -gap > config.ooo_tolerance_us:
                self.ooo_events += 1
            # clamp so every IAT and period stays non-negative
            ts, gap = self.last_ts, 0
        if gap > config.activity_threshold_us:
            self.active.add(self.last_ts - self.active_start)
            self.idle.add(gap)
            self.subflows += 1
            self.active_start = ts
        self.last_ts = ts
        (self.fwd if self.is_forward(pkt) else self.bwd).add(pkt, ts)
        if "RST" in pkt.flags:
            self.rst = True
        if ref is not None:
            self.refs.append(ref)

    @property
    def packets(self) -> int:
        return self.fwd.packets + self.bwd.packets

    def terminated(self) -> bool:
        return self.key.protocol == PROTO_TCP and (self.rst or (self.fwd.fin and self.bwd.fin))


def finalize(state: FlowState, label: int | None = None, end_reason: str = "") -> FeatureVector:
    """Compute the 44 features from a flow's accumulators (does not mutate it)."""
    if state.packets == 0:
        raise ValueError("cannot finalize a flow without packets")
    fwd, bwd = state.fwd, state.bwd
    active = state.active.copy()
    active.add(state.last_ts - state.active_start)
    min_fpctl, mean_fpctl, max_fpctl, std_fpctl = fwd.length.summary()
    min_bpctl, mean_bpctl, max_bpctl, std_bpctl = bwd.length.summary()
    min_fiat, mean_fiat, max_fiat, std_fiat = fwd.iat.summary()
    min_biat, mean_biat, max_biat, std_biat = bwd.iat.summary()
    min_active, mean_active, max_active, std_active = active.summary()
    min_idle, mean_idle, max_idle, std_idle = state.idle.summary()
    sub = state.subflows
    key = state.key
    return FeatureVector(
        srcip=key.src_ip,
        srcport=key.src_port,
        dstip=key.dst_ip,
        dstport=key.dst_port,
        proto=key.protocol,
        total_fpackets=fwd.packets,
        total_fvolume=fwd.volume,
        total_bpackets=bwd.packets,
        total_bvolume=bwd.volume,
        min_fpctl=min_fpctl,
        mean_fpctl=mean_fpctl,
        max_fpctl=max_fpctl,
        std_fpctl=std_fpctl,
        min_bpctl=min_bpctl,
        mean_bpctl=mean_bpctl,
        max_bpctl=max_bpctl,
        std_bpctl=std_bpctl,
        min_fiat=min_fiat,
        mean_fiat=mean_fiat,
        max_fiat=max_fiat,
        std_fiat=std_fiat,
        min_biat=min_biat,
        mean_biat=mean_biat,
        max_biat=max_biat,
        std_biat=std_biat,
        duration=state.last_ts - state.first_ts,
        min_active=min_active,
        mean_active=mean_active,
        max_active=max_active,
        std_active=std_active,
        min_idle=min_idle,
        mean_idle=mean_idle,
        max_idle=max_idle,
        std_idle=std_idle,
        sflow_fpackets=fwd.packets / sub,
        sflow_fbytes=fwd.volume / sub,
        sflow_bpackets=bwd.packets / sub,
        sflow_bbytes=bwd.volume / sub,
        fpsh_cnt=fwd.psh,
        bpsh_cnt=bwd.psh,
        fiurg_cnt=fwd.urg,
        burg_cnt=bwd.urg,
        total_fhlen=fwd.header_bytes,
        total_bhlen=bwd.header_bytes,
        first_ts_us=state.first_ts,
        last_ts_us=state.last_ts,
        label=label,
        end_reason=end_reason,
        packet_refs=tuple(state.refs),
    )


class FlowTable:
    """Single-writer table of live flows keyed by direction-insensitive 5-tuple."""

    def __init__(self, config: MeterConfig | None = None, label: int | None = None):
        self.config = config or MeterConfig()
        self.label = label
        # insertion order == order of last activity (move_to_end on update)
        self._flows: OrderedDict[tuple, FlowState] = OrderedDict()
        self._by_start: list[tuple[int, int, tuple]] = []
        self._serial = 0
        self.admitted = 0
        self.ooo_events = 0

    def __len__(self) -> int:
        return len(self._flows)

    def __contains__(self, pkt_or_key) -> bool:
        key = canonical_key(pkt_or_key) if isinstance(pkt_or_key, PacketRecord) else pkt_or_key
        return key in self._flows

    def flows(self) -> list[FlowState]:
        return list(self._flows.values())

    def get(self, ckey: tuple) -> FlowState | None:
        return self._flows.get(ckey)

    def _close(self, ckey: tuple, reason: str) -> FeatureVector:
        state = self._flows.pop(ckey)
        self.ooo_events += state.ooo_events
        return finalize(state, self.label, reason)

    def expire(self, now_us: int) -> list[FeatureVector]:
        """Finalize flows idle for longer than the idle timeout (and, when
        configured, flows open for at least the active timeout)."""
        out = []
        idle = self.config.idle_timeout_us
        while self._flows:
            ckey, state = next(iter(self._flows.items()))
            if now_us - state.last_ts <= idle:
                break
            out.append(self._close(ckey, "idle"))
        limit = self.config.active_timeout_us
        if limit is not None:
            heap = self._by_start
            while heap and now_us - heap[0][0] >= limit:
                _, serial, ckey = heapq.heappop(heap)
                state = self._flows.get(ckey)
                if state is not None and state.serial == serial:
                    out.append(self._close(ckey, "active"))
        return out

    def ingest(self, pkt: PacketRecord, ref=None) -> list[FeatureVector]:
        """Add one packet; returns flows finalized by its arrival."""
        out = self.expire(pkt.timestamp_us)
        ckey = canonical_key(pkt)
        state = self._flows.get(ckey)
        if state is None:
            self._serial += 1
            state = FlowState(FlowKey.of(pkt), pkt.timestamp_us, self._serial)
            self._flows[ckey] = state
            if self.config.active_timeout_us is not None:
                heapq.heappush(self._by_start, (state.first_ts, state.serial, ckey))
        else:
            self._flows.move_to_end(ckey)
        state.update(pkt, self.config, ref)
        self.admitted += 1
        if state.terminated():
            out.append(self._close(ckey, "rst" if state.rst else "fin"))
        return out

    def flush(self, now_us: int | None = None) -> list[FeatureVector]:
        """Finalize every remaining flow in creation order; the table empties."""
        ckeys = sorted(self._flows, key=lambda c: self._flows[c].serial)
        out = [self._close(c, "flush") for c in ckeys]
        self._by_start.clear()
        return out


@dataclass
class MeterSummary:
    files: int = 0
    frames: int = 0
    admitted: int = 0
    skipped: int = 0
    errors: int = 0
    flows: int = 0
    truncated: bool = False
    ooo_events: int = 0
    admitted_bytes: int = 0
    error_messages: list = field(default_factory=list)


def meter_frames(frames, config: MeterConfig | None = None, label: int | None = None,
                 summary: MeterSummary | None = None) -> list[FeatureVector]:
    """Run ``(frame, link_type, ts_us)`` triples through a fresh flow table."""
    table = FlowTable(config, label)
    summary = summary if summary is not None else MeterSummary()
    out: list[FeatureVector] = []
    last_ts = 0
    try:
        for raw, link_type, ts_us in frames:
            summary.frames += 1
            last_ts = max(last_ts, ts_us)
            try:
                pkt = parse_packet(raw, link_type, ts_us)
            except PacketError as exc:
                summary.errors += 1
                if len(summary.error_messages) < 20:
                    summary.error_messages.append(str(exc))
                continue
            if pkt is None:
                summary.skipped += 1
                continue
            summary.admitted += 1
            summary.admitted_bytes += pkt.ip_total_len
            out.extend(table.ingest(pkt))
    except TruncatedPcapError as exc:
        summary.truncated = True
        log.warning("%s; keeping the complete records", exc)
    out.extend(table.flush(last_ts))
    summary.flows += len(out)
    summary.ooo_events += table.ooo_events
    return out


def meter_pcap(path, config: MeterConfig | None = None, label: int | None = None,
               summary: MeterSummary | None = None) -> list[FeatureVector]:
    summary = summary if summary is not None else MeterSummary()
    summary.files += 1
    return meter_frames(read_pcap(path), config, label, summary)
