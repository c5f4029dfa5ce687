"""Concurrent capture and classification.

Stage 1 (a thread) reads packets from a source, writes them to rotating pcap
chunks and hands them to stage 2 through a bounded queue. Stage 2 owns the
flow table: it meters, classifies each flow as it is finalized, and writes
the alert log and the malicious-only pcap. Each output file has one writer.
"""

from __future__ import annotations

import heapq
import json
import logging
import queue
import threading
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path

from ..brann import NetworkModel, classify, feature_check, model_id
from ..flow_meter.meter import FlowKey, FlowTable, MeterConfig, canonical_key
from ..flow_meter.packets import PacketError, parse_packet
from ..flow_meter.pcapio import GLOBAL_HEADER_LEN, PcapWriter, TruncatedPcapError, record_size

log = logging.getLogger(__name__)

EARLY_TIMEOUT_US = 120_000_000
DEFAULT_CHUNK_BYTES = 200_000_000
_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)
_END = object()


def utc_time(ts_us: int) -> datetime:
    return _EPOCH + timedelta(microseconds=int(ts_us))


def iso_time(ts_us: int) -> str:
    return utc_time(ts_us).isoformat(timespec="microseconds")


@dataclass
class DetectConfig:
    threshold: float = 0.5
    chunk_bytes: int = DEFAULT_CHUNK_BYTES
    meter: MeterConfig = field(default_factory=lambda: MeterConfig(active_timeout_us=EARLY_TIMEOUT_US))
    queue_size: int = 4096  # 0 means unbounded


@dataclass(frozen=True)
class DetectionRecord:
    key: FlowKey
    first_ts_us: int
    last_ts_us: int
    score: float
    label: int
    model_id: str
    packet_refs: tuple  # (chunk number, index within chunk) per packet
    end_reason: str = ""

    def alert_line(self) -> str:
        k = self.key
        return "\t".join([
            iso_time(self.last_ts_us), k.src_ip, str(k.src_port), k.dst_ip, str(k.dst_port),
            str(k.protocol), f"{self.score:.6f}", "malicious" if self.label else "nonmalicious",
            self.model_id,
        ])

    def to_json(self) -> str:
        d = asdict(self)
        d["packet_refs"] = [list(r) for r in self.packet_refs]
        return json.dumps(d, sort_keys=True)


class ChunkWriter:
    """Rotating pcap chunks; a chunk only exceeds the limit when a single record does."""

    def __init__(self, out_dir, limit: int = DEFAULT_CHUNK_BYTES):
        if limit <= GLOBAL_HEADER_LEN:
            raise ValueError(f"chunk limit must exceed the {GLOBAL_HEADER_LEN}-byte pcap header")
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.limit = limit
        self.counter = 0
        self.paths: list[Path] = []
        self.packets = 0
        self._writer: PcapWriter | None = None

    @property
    def path(self) -> Path | None:
        return self._writer.path if self._writer else None

    @property
    def bytes(self) -> int:
        return self._writer.bytes_written if self._writer else 0

    def _rotate(self, ts_us: int, link_type: int):
        self.close()
        self.counter += 1
        name = f"packets_{self.counter:05d}_{utc_time(ts_us):%Y%m%d%H%M%S}.pcap"
        self._writer = PcapWriter(self.out_dir / name, link_type)
        self.paths.append(self._writer.path)

    def write(self, ts_us: int, frame: bytes, link_type: int = 1) -> tuple[int, int]:
        """Append one packet; returns its (chunk number, index within chunk)."""
        w = self._writer
        if (w is None or w.link_type != link_type
                or (w.packets and w.bytes_written + record_size(len(frame)) > self.limit)):
            self._rotate(ts_us, link_type)
            w = self._writer
        index = w.packets
        w.write(ts_us, frame)
        self.packets += 1
        return self.counter, index

    def close(self):
        if self._writer is not None:
            self._writer.close()
            self._writer = None


class MaliciousSink:
    """Malicious packets in capture order.

    A packet is held until no open flow holds an earlier packet, so the
    output order never depends on when each flow happened to finish.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._writer: PcapWriter | None = None
        self._pending: list[tuple[int, int, bytes]] = []
        self.link_type: int | None = None
        self.packets = 0

    def _open(self):
        if self._writer is None:
            self._writer = PcapWriter(self.path, self.link_type or 1)

    def add(self, gidx: int, ts_us: int, frame: bytes):
        heapq.heappush(self._pending, (gidx, ts_us, frame))

    def release(self, watermark: float):
        if self._pending:
            self._open()
        while self._pending and self._pending[0][0] < watermark:
            _, ts_us, frame = heapq.heappop(self._pending)
            self._writer.write(ts_us, frame)
            self.packets += 1

    def close(self, drain: bool = True):
        try:
            if drain:
                self.release(float("inf"))
            self._open()  # an empty run still leaves a valid, empty pcap
        finally:
            if self._writer is not None:
                self._writer.close()


@dataclass
class DetectSummary:
    packets_read: int = 0
    admitted: int = 0
    skipped: int = 0
    errors: int = 0
    dropped: int = 0
    flows: int = 0
    alerts: int = 0
    malicious_packets: int = 0
    ooo_events: int = 0
    truncated: bool = False
    interrupted: bool = False
    chunks: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["chunks"] = [str(p) for p in self.chunks]
        return d


class Detector:
    """Stage 2: meter, classify at finalization, write alerts and malicious packets."""

    def __init__(self, model: NetworkModel, out_dir, cfg: DetectConfig | None = None,
                 summary: DetectSummary | None = None):
        feature_check(model)
        self.model = model
        self.model_id = model_id(model)
        self.cfg = cfg or DetectConfig()
        self.summary = summary if summary is not None else DetectSummary()
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.table = FlowTable(self.cfg.meter)
        self._buffer: dict[int, tuple[int, bytes, tuple]] = {}
        self._starts: list[int] = []
        self._closed: set[int] = set()
        self.sink = MaliciousSink(out / "malicious.pcap")
        self._alerts = open(out / "alerts.tsv", "w", encoding="utf-8")
        self._records = open(out / "detections.jsonl", "w", encoding="utf-8")

    def handle(self, gidx: int, chunk_ref: tuple, frame: bytes, link_type: int, ts_us: int):
        try:
            pkt = parse_packet(frame, link_type, ts_us)
        except PacketError as exc:
            self.summary.errors += 1
            log.debug("packet %d: %s", gidx, exc)
            return
        if pkt is None:
            self.summary.skipped += 1
            return
        if self.sink.link_type is None:
            self.sink.link_type = link_type
        self.summary.admitted += 1
        self._buffer[gidx] = (ts_us, frame, chunk_ref)
        done = self.table.ingest(pkt, ref=gidx)
        state = self.table.get(canonical_key(pkt))
        if state is not None and state.refs[0] == gidx:
            heapq.heappush(self._starts, gidx)
        self._finish(done)

    def tick(self, now_us: int):
        """Expire flows against a wall clock when no packets arrive."""
        self._finish(self.table.expire(now_us))

    def finish(self):
        self._finish(self.table.flush())
        self.sink.release(float("inf"))

    def _watermark(self) -> float:
        starts = self._starts
        while starts and starts[0] in self._closed:
            self._closed.discard(heapq.heappop(starts))
        return starts[0] if starts else float("inf")

    def _finish(self, vectors):
        for fv in vectors:
            self.summary.flows += 1
            self._closed.add(fv.packet_refs[0])
            score, label = classify(self.model, fv, self.cfg.threshold)
            entries = [(g, self._buffer.pop(g)) for g in fv.packet_refs]
            if not label:
                continue
            rec = DetectionRecord(
                key=FlowKey(fv.srcip, fv.srcport, fv.dstip, fv.dstport, fv.proto),
                first_ts_us=fv.first_ts_us,
                last_ts_us=fv.last_ts_us,
                score=score,
                label=label,
                model_id=self.model_id,
                packet_refs=tuple(e[2] for _, e in entries),
                end_reason=fv.end_reason,
            )
            self._alerts.write(rec.alert_line() + "\n")
            self._records.write(rec.to_json() + "\n")
            self.summary.alerts += 1
            for g, (ts_us, frame, _) in entries:
                self.sink.add(g, ts_us, frame)
        if vectors:
            self._alerts.flush()
            self._records.flush()
            self.sink.release(self._watermark())

    def close(self, drain: bool = True):
        self.summary.ooo_events = self.table.ooo_events
        try:
            self.sink.close(drain)
        finally:
            self.summary.malicious_packets = self.sink.packets
            self._alerts.close()
            self._records.close()


def run_detect(source, model: NetworkModel, out_dir, cfg: DetectConfig | None = None,
               stop: threading.Event | None = None) -> DetectSummary:
    """Run both stages until the source is exhausted or ``stop`` is set."""
    cfg = cfg or DetectConfig()
    out = Path(out_dir)
    summary = DetectSummary()
    detector = Detector(model, out, cfg, summary)
    chunks = ChunkWriter(out / "chunks", cfg.chunk_bytes)
    q: queue.Queue = queue.Queue(cfg.queue_size)
    stop = stop or threading.Event()
    consumer_done = threading.Event()
    failures: list[BaseException] = []

    def offer(item) -> bool:
        while not consumer_done.is_set():
            try:
                q.put(item, timeout=0.2)
                return True
            except queue.Full:
                continue
        return False

    def reader():
        gidx = 0
        try:
            for frame, link_type, ts_us in source.frames(stop):
                ref = chunks.write(ts_us, frame, link_type)
                summary.packets_read += 1
                item = (gidx, ref, frame, link_type, ts_us)
                gidx += 1
                if source.live:
                    try:
                        q.put_nowait(item)
                    except queue.Full:
                        summary.dropped += 1
                elif not offer(item):
                    break
        except TruncatedPcapError as exc:
            summary.truncated = True
            log.warning("%s; keeping the complete records", exc)
        except BaseException as exc:  # handed to the main thread
            failures.append(exc)
        finally:
            try:
                chunks.close()
            except OSError as exc:
                failures.append(exc)
            offer(_END)

    thread = threading.Thread(target=reader, name="capture", daemon=True)
    thread.start()
    clean = False
    try:
        while True:
            try:
                item = q.get(timeout=0.5)
            except queue.Empty:
                if source.clock is not None:
                    detector.tick(source.clock())
                continue
            except KeyboardInterrupt:
                summary.interrupted = True
                stop.set()
                continue
            if item is _END:
                break
            detector.handle(*item)
        if not failures:
            detector.finish()
            clean = True
    finally:
        stop.set()
        consumer_done.set()
        thread.join()
        summary.chunks = list(chunks.paths)
        detector.close(drain=clean)
    if failures:
        raise failures[0]
    (out / "summary.json").write_text(json.dumps(summary.to_dict(), indent=1, sort_keys=True) + "\n")
    return summary
