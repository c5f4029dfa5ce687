"""Packet sources for the detector: pcap replay, in-memory replay and live AF_PACKET capture.

Every source yields ``(frame, link_type, ts_us)`` triples from ``frames(stop)``
and says whether it is ``live`` (a full buffer drops packets instead of
blocking the reader).
"""

from __future__ import annotations

import socket
import threading
import time
from pathlib import Path

from ..flow_meter.packets import LINKTYPE_ETHERNET
from ..flow_meter.pcapio import read_pcap


class CaptureOpenError(OSError):
    """The capture device or file could not be opened."""


class PcapFileSource:
    live = False
    clock = None

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.is_file():
            raise CaptureOpenError(f"cannot open capture {self.path}")

    def frames(self, stop: threading.Event):
        for item in read_pcap(self.path):
            if stop.is_set():
                return
            yield item


class IterableSource:
    """Replays pre-recorded triples as if they were arriving from a device."""

    clock = None

    def __init__(self, frames, live: bool = True):
        self._frames = frames
        self.live = live

    def frames(self, stop: threading.Event):
        for item in self._frames:
            if stop.is_set():
                return
            yield item


class AfPacketSource:
    """Raw Ethernet capture on a Linux interface (needs CAP_NET_RAW)."""

    live = True
    ETH_P_ALL = 0x0003

    def __init__(self, interface: str, snaplen: int = 65535, max_packets: int | None = None,
                 duration_s: float | None = None):
        self.interface = interface
        self.snaplen = snaplen
        self.max_packets = max_packets
        self.duration_s = duration_s
        try:
            self._sock = socket.socket(socket.AF_PACKET, socket.SOCK_RAW, socket.htons(self.ETH_P_ALL))
            self._sock.bind((interface, 0))
            self._sock.settimeout(0.25)
        except (OSError, AttributeError) as exc:
            raise CaptureOpenError(f"cannot open interface {interface}: {exc}") from exc

    @staticmethod
    def clock() -> int:
        return time.time_ns() // 1000

    def frames(self, stop: threading.Event):
        deadline = None if self.duration_s is None else time.monotonic() + self.duration_s
        count = 0
        try:
            while not stop.is_set():
                if deadline is not None and time.monotonic() >= deadline:
                    return
                if self.max_packets is not None and count >= self.max_packets:
                    return
                try:
                    frame = self._sock.recv(self.snaplen)
                except socket.timeout:
                    continue
                count += 1
                yield frame, LINKTYPE_ETHERNET, self.clock()
        finally:
            self._sock.close()
