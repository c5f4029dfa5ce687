"""Frame decoding: Ethernet / raw-IP framing down to IPv4 TCP and UDP headers."""

from __future__ import annotations

import ipaddress
import struct
from dataclasses import dataclass

LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
# Some writers emit the BSD DLT value for raw IP instead of the LINKTYPE one.
DLT_RAW = 12

ETHERTYPE_IPV4 = 0x0800
VLAN_ETHERTYPES = (0x8100, 0x88A8, 0x9100)

PROTO_TCP = 6
PROTO_UDP = 17

TCP_FIN = 0x01
TCP_SYN = 0x02
TCP_RST = 0x04
TCP_PSH = 0x08
TCP_URG = 0x20

_FLAG_NAMES = {
    TCP_FIN: "FIN",
    TCP_SYN: "SYN",
    TCP_RST: "RST",
    TCP_PSH: "PSH",
    TCP_URG: "URG",
}


class PacketError(ValueError):
    """Base class for frames that cannot be decoded."""


class TruncatedCaptureError(PacketError):
    """The captured bytes are shorter than the fixed minimum header size."""


class MalformedFrameError(PacketError):
    """A header declares a length that the captured bytes cannot hold."""


@dataclass(frozen=True, slots=True)
class PacketRecord:
    timestamp_us: int
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    protocol: int
    ip_total_len: int
    ip_header_len: int
    transport_header_len: int
    flags: frozenset = frozenset()

    @property
    def header_len(self) -> int:
        return self.ip_header_len + self.transport_header_len

    def has_flag(self, name: str) -> bool:
        return name in self.flags


def tcp_flag_names(bits: int) -> frozenset:
    return frozenset(name for bit, name in _FLAG_NAMES.items() if bits & bit)


def parse_packet(raw: bytes, link_type: int, ts_us: int) -> PacketRecord | None:
    """Decode one captured frame.

    Returns ``None`` (the skip signal) for anything that is not an IPv4 TCP or
    UDP packet: ARP, IPv6, ICMP, non-initial IP fragments, unknown link types.
    Raises :class:`TruncatedCaptureError` when fewer bytes were captured than
    the fixed header sizes require and :class:`MalformedFrameError` when a
    declared header length runs past the captured bytes or is inconsistent.
    """
    mv = memoryview(raw)
    if link_type == LINKTYPE_ETHERNET:
        if len(mv) < 14:
            raise TruncatedCaptureError(f"ethernet frame of {len(mv)} bytes")
        (ethertype,) = struct.unpack_from("!H", mv, 12)
        offset = 14
        while ethertype in VLAN_ETHERTYPES:
            if len(mv) < offset + 4:
                raise TruncatedCaptureError("truncated 802.1Q tag")
            (ethertype,) = struct.unpack_from("!H", mv, offset + 2)
            offset += 4
        if ethertype != ETHERTYPE_IPV4:
            return None
    elif link_type in (LINKTYPE_RAW, DLT_RAW):
        offset = 0
        if len(mv) >= 1 and mv[0] >> 4 != 4:
            return None
    else:
        return None

    ip = mv[offset:]
    if len(ip) < 20:
        raise TruncatedCaptureError(f"IPv4 header needs 20 bytes, have {len(ip)}")
    version_ihl = ip[0]
    if version_ihl >> 4 != 4:
        return None
    ihl = (version_ihl & 0x0F) * 4
    if ihl < 20:
        raise MalformedFrameError(f"IPv4 IHL of {ihl} bytes")
    if ihl > len(ip):
        raise MalformedFrameError(f"IPv4 IHL {ihl} exceeds {len(ip)} captured bytes")
    total_len, frag = struct.unpack_from("!H2xH", ip, 2)
    protocol = ip[9]
    if protocol not in (PROTO_TCP, PROTO_UDP):
        return None
    if frag & 0x1FFF:
        # later fragments carry no transport header
        return None
    src_ip = str(ipaddress.IPv4Address(bytes(ip[12:16])))
    dst_ip = str(ipaddress.IPv4Address(bytes(ip[16:20])))

    l4 = ip[ihl:]
    if protocol == PROTO_UDP:
        if len(l4) < 8:
            raise TruncatedCaptureError(f"UDP header needs 8 bytes, have {len(l4)}")
        src_port, dst_port = struct.unpack_from("!HH", l4, 0)
        thl = 8
        flags = frozenset()
    else:
        if len(l4) < 20:
            raise TruncatedCaptureError(f"TCP header needs 20 bytes, have {len(l4)}")
        src_port, dst_port = struct.unpack_from("!HH", l4, 0)
        thl = (l4[12] >> 4) * 4
        if thl < 20:
            raise MalformedFrameError(f"TCP data offset of {thl} bytes")
        if thl > len(l4):
            raise MalformedFrameError(f"TCP data offset {thl} exceeds {len(l4)} captured bytes")
        flags = tcp_flag_names(l4[13])

    if total_len < ihl + thl:
        raise MalformedFrameError(
            f"IPv4 total length {total_len} smaller than headers ({ihl}+{thl})"
        )
    return PacketRecord(
        timestamp_us=ts_us,
        src_ip=src_ip,
        dst_ip=dst_ip,
        src_port=src_port,
        dst_port=dst_port,
        protocol=protocol,
        ip_total_len=total_len,
        ip_header_len=ihl,
        transport_header_len=thl,
        flags=flags,
    )


def _checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\0"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def build_frame(
    src_ip: str,
    dst_ip: str,
    src_port: int,
    dst_port: int,
    protocol: int,
    payload_len: int = 0,
    *,
    tcp_flags: int = 0,
    ip_options_len: int = 0,
    tcp_options_len: int = 0,
    link_type: int = LINKTYPE_ETHERNET,
    vlan: int | None = None,
    pad_to: int = 60,
) -> bytes:
    """Encode an IPv4 TCP/UDP packet with a zero-filled payload.

    Used by the synthetic traffic generator and the tests; ``ip_options_len``
    and ``tcp_options_len`` must be multiples of four.
    """
    payload = bytes(payload_len)
    if protocol == PROTO_UDP:
        l4 = struct.pack("!HHHH", src_port, dst_port, 8 + payload_len, 0)
    elif protocol == PROTO_TCP:
        data_offset = (20 + tcp_options_len) // 4
        l4 = struct.pack(
            "!HHIIBBHHH",
            src_port,
            dst_port,
            0,
            0,
            data_offset << 4,
            tcp_flags & 0xFF,
            65535,
            0,
            0,
        ) + bytes(tcp_options_len)
    else:
        l4 = b""
    ihl = 20 + ip_options_len
    total_len = ihl + len(l4) + payload_len
    header = struct.pack(
        "!BBHHHBBH4s4s",
        0x40 | (ihl // 4),
        0,
        total_len,
        0,
        0x4000,
        64,
        protocol,
        0,
        ipaddress.IPv4Address(src_ip).packed,
        ipaddress.IPv4Address(dst_ip).packed,
    ) + bytes(ip_options_len)
    header = header[:10] + struct.pack("!H", _checksum(header)) + header[12:]
    ip_packet = header + l4 + payload
    if link_type != LINKTYPE_ETHERNET:
        return ip_packet
    eth = bytes.fromhex("020000000002") + bytes.fromhex("020000000001")
    if vlan is not None:
        eth += struct.pack("!HH", 0x8100, vlan & 0x0FFF)
    frame = eth + struct.pack("!H", ETHERTYPE_IPV4) + ip_packet
    if len(frame) < pad_to:
        frame += bytes(pad_to - len(frame))
    return frame
