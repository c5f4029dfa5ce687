"""Synthetic two-population traffic for exercising the pipeline without malware captures.

Benign flows are chatty bulk transfers (large packets, millisecond gaps, PSH
set on data segments); malicious flows look like P2P C&C keep-alives (small
packets, second-scale beaconing gaps). ``shifted`` builds a family member
with every distribution parameter scaled, standing in for an unseen bot.
"""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass, replace

import numpy as np

from .flow_meter.packets import (
    LINKTYPE_ETHERNET,
    PROTO_TCP,
    PROTO_UDP,
    TCP_FIN,
    TCP_PSH,
    TCP_SYN,
    build_frame,
)


@dataclass(frozen=True)
class FlowProfile:
    name: str
    label: int
    tcp_fraction: float
    packets: tuple[int, int]          # inclusive range of packets per flow
    fwd_payload: tuple[float, float]  # mean, sd (bytes)
    bwd_payload: tuple[float, float]
    iat_us: float                     # mean gap between packets (exponential)
    backward_prob: float
    psh_prob: float

    def shifted(self, factor: float, name: str | None = None) -> "FlowProfile":
        lo, hi = self.packets
        return replace(
            self,
            name=name or f"{self.name}x{factor:g}",
            packets=(max(2, int(round(lo * factor))), max(2, int(round(hi * factor)))),
            fwd_payload=(self.fwd_payload[0] * factor, self.fwd_payload[1] * factor),
            bwd_payload=(self.bwd_payload[0] * factor, self.bwd_payload[1] * factor),
            iat_us=self.iat_us * factor,
        )


BENIGN = FlowProfile(
    name="benign",
    label=0,
    tcp_fraction=0.8,
    packets=(12, 40),
    fwd_payload=(420.0, 120.0),
    bwd_payload=(1100.0, 200.0),
    iat_us=20_000.0,
    backward_prob=0.55,
    psh_prob=0.6,
)

MALICIOUS_A = FlowProfile(
    name="malicious_a",
    label=1,
    tcp_fraction=0.5,
    packets=(6, 16),
    fwd_payload=(60.0, 12.0),
    bwd_payload=(90.0, 15.0),
    iat_us=1_500_000.0,
    backward_prob=0.4,
    psh_prob=0.05,
)

MALICIOUS_B = MALICIOUS_A.shifted(1.2, "malicious_b")


@dataclass
class SyntheticFlow:
    profile: str
    label: int
    key: tuple          # (src_ip, src_port, dst_ip, dst_port, proto) of the first packet
    packets: list       # [(ts_us, frame)]


class TrafficGenerator:
    """Seeded generator; every flow gets a distinct 5-tuple."""

    def __init__(self, seed: int = 0, start_us: int = 1_700_000_000_000_000,
                 link_type: int = LINKTYPE_ETHERNET):
        self.rng = np.random.default_rng(seed)
        self.start_us = start_us
        self.link_type = link_type
        self._counter = 0

    def _endpoints(self):
        self._counter += 1
        n = self._counter
        client = str(ipaddress.IPv4Address(0x0A000000 + (n // 40000) * 256 + 1 + int(self.rng.integers(0, 200))))
        server = str(ipaddress.IPv4Address(0xAC100000 + int(self.rng.integers(1, 60000))))
        sport = 1024 + n % 40000
        dport = int(self.rng.choice([80, 443, 6881, 8080, 16464, 25000, 53]))
        return client, sport, server, dport

    def _size(self, mean_sd) -> int:
        mean, sd = mean_sd
        return int(max(0, round(self.rng.normal(mean, sd))))

    def flow(self, profile: FlowProfile, start_us: int) -> SyntheticFlow:
        rng = self.rng
        proto = PROTO_TCP if rng.random() < profile.tcp_fraction else PROTO_UDP
        client, sport, server, dport = self._endpoints()
        n = int(rng.integers(profile.packets[0], profile.packets[1] + 1))
        ts = start_us
        packets = []

        def emit(forward: bool, payload: int, flags: int = 0):
            if forward:
                f = build_frame(client, server, sport, dport, proto, payload,
                                tcp_flags=flags, link_type=self.link_type)
            else:
                f = build_frame(server, client, dport, sport, proto, payload,
                                tcp_flags=flags, link_type=self.link_type)
            packets.append((ts, f))

        if proto == PROTO_TCP:
            emit(True, 0, TCP_SYN)
            ts += 1 + int(rng.exponential(profile.iat_us / 10))
            emit(False, 0, TCP_SYN | 0x10)
            body = max(n - 4, 1)
        else:
            body = n
        for _ in range(body):
            if packets:
                ts += 1 + int(rng.exponential(profile.iat_us))
                forward = rng.random() >= profile.backward_prob
            else:
                forward = True  # the opening packet fixes the flow's orientation
            payload = self._size(profile.fwd_payload if forward else profile.bwd_payload)
            flags = 0
            if proto == PROTO_TCP:
                flags = 0x10 | (TCP_PSH if payload and rng.random() < profile.psh_prob else 0)
            emit(forward, payload, flags)
        if proto == PROTO_TCP:
            ts += 1 + int(rng.exponential(profile.iat_us / 10))
            emit(True, 0, TCP_FIN | 0x10)
            ts += 1 + int(rng.exponential(profile.iat_us / 10))
            emit(False, 0, TCP_FIN | 0x10)
        return SyntheticFlow(profile.name, profile.label, (client, sport, server, dport, proto), packets)

    def flows(self, profile: FlowProfile, count: int, span_us: int = 60_000_000) -> list[SyntheticFlow]:
        starts = np.sort(self.rng.integers(0, span_us, count))
        return [self.flow(profile, self.start_us + int(s)) for s in starts]


def merge_packets(flows) -> list[tuple[int, bytes]]:
    """Interleave the flows' packets into one capture ordered by timestamp."""
    tagged = [(ts, i, j, frame) for i, fl in enumerate(flows) for j, (ts, frame) in enumerate(fl.packets)]
    tagged.sort(key=lambda t: (t[0], t[1], t[2]))
    return [(ts, frame) for ts, _, _, frame in tagged]


def mixed_capture(counts: dict[FlowProfile, int], seed: int = 0, span_us: int = 60_000_000):
    """Generate flows for each profile and merge them; returns (packets, flows)."""
    gen = TrafficGenerator(seed)
    flows = []
    for profile, n in counts.items():
        flows.extend(gen.flows(profile, n, span_us))
    return merge_packets(flows), flows
