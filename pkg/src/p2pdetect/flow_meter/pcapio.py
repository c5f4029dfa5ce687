"""Classic libpcap file reading and writing."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Iterator

MAGIC_US = 0xA1B2C3D4
MAGIC_NS = 0xA1B23C4D

GLOBAL_HEADER_LEN = 24
RECORD_HEADER_LEN = 16


class PcapError(Exception):
    pass


class BadMagicError(PcapError):
    pass


class TruncatedPcapError(PcapError):
    pass


def read_pcap(path) -> Iterator[tuple[bytes, int, int]]:
    """Yield ``(frame, link_type, ts_us)`` for every record in file order.

    Both byte orders are accepted, as are nanosecond-resolution files
    (timestamps are floored to microseconds). A record cut short by the end
    of the file raises :class:`TruncatedPcapError` after every complete record
    has been yielded.
    """
    with open(path, "rb") as fh:
        yield from read_pcap_stream(fh)


def read_pcap_stream(fh: BinaryIO) -> Iterator[tuple[bytes, int, int]]:
    header = fh.read(GLOBAL_HEADER_LEN)
    if len(header) < 4:
        raise BadMagicError("file too short for a pcap global header")
    for endian in ("<", ">"):
        (magic,) = struct.unpack(endian + "I", header[:4])
        if magic in (MAGIC_US, MAGIC_NS):
            break
    else:
        raise BadMagicError(f"unrecognised pcap magic {header[:4].hex()}")
    if len(header) < GLOBAL_HEADER_LEN:
        raise TruncatedPcapError("truncated pcap global header")
    nanos = magic == MAGIC_NS
    _, _, _, _, _, link_type = struct.unpack(endian + "HHiIII", header[4:])
    rec = struct.Struct(endian + "IIII")
    index = 0
    while True:
        hdr = fh.read(RECORD_HEADER_LEN)
        if not hdr:
            return
        if len(hdr) < RECORD_HEADER_LEN:
            raise TruncatedPcapError(f"record {index}: truncated record header")
        sec, frac, caplen, _origlen = rec.unpack(hdr)
        data = fh.read(caplen)
        if len(data) < caplen:
            raise TruncatedPcapError(
                f"record {index}: expected {caplen} bytes, got {len(data)}"
            )
        ts_us = sec * 1_000_000 + (frac // 1000 if nanos else frac)
        yield data, link_type, ts_us
        index += 1


def record_size(frame_len: int) -> int:
    return RECORD_HEADER_LEN + frame_len


class PcapWriter:
    """Little-endian, microsecond-resolution classic pcap writer."""

    def __init__(self, path, link_type: int = 1, snaplen: int = 262144):
        self.path = Path(path)
        self.link_type = link_type
        self._fh = open(self.path, "wb")
        self._fh.write(struct.pack("<IHHiIII", MAGIC_US, 2, 4, 0, 0, snaplen, link_type))
        self.bytes_written = GLOBAL_HEADER_LEN
        self.packets = 0

    def write(self, ts_us: int, frame: bytes) -> int:
        sec, usec = divmod(ts_us, 1_000_000)
        self._fh.write(struct.pack("<IIII", sec, usec, len(frame), len(frame)))
        self._fh.write(frame)
        n = record_size(len(frame))
        self.bytes_written += n
        self.packets += 1
        return n

    def flush(self):
        self._fh.flush()

    def close(self):
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_pcap(path, packets, link_type: int = 1) -> int:
    """Write an iterable of ``(ts_us, frame)`` pairs; returns the packet count."""
    with PcapWriter(path, link_type) as w:
        for ts_us, frame in packets:
            w.write(ts_us, frame)
        return w.packets
