"""Shared builders and independent brute-force oracles for the test suite."""

from __future__ import annotations

import math
import statistics
import struct
from fractions import Fraction

import numpy as np

from p2pdetect.flow_meter import FEATURE_NAMES, PROTO_TCP, PROTO_UDP, build_frame, parse_packet

TCP_FLAG_BITS = {"FIN": 0x01, "SYN": 0x02, "RST": 0x04, "PSH": 0x08, "URG": 0x20}


def pkt(ts, src="10.0.0.1", dst="10.0.0.2", sport=1000, dport=2000, proto=PROTO_UDP,
        payload=0, flags=(), ip_options=0, tcp_options=0):
    bits = 0
    for f in flags:
        bits |= TCP_FLAG_BITS[f]
    frame = build_frame(src, dst, sport, dport, proto, payload, tcp_flags=bits,
                        ip_options_len=ip_options, tcp_options_len=tcp_options)
    return parse_packet(frame, 1, ts)


def random_flow(rng: np.random.Generator, n_packets: int, start_us: int = 1_000_000_000,
                proto: int | None = None, client: str = "10.1.0.1", server: str = "10.2.0.1",
                sport: int = 40000, dport: int = 443):
    """A list of PacketRecords for one flow with random sizes, directions and gaps.

    Gaps mix sub-threshold and supra-threshold values so activity splitting
    is exercised; TCP flows never carry FIN or RST so the flow stays open.
    """
    proto = proto if proto is not None else int(rng.choice([PROTO_TCP, PROTO_UDP]))
    ts = start_us
    out = []
    for i in range(n_packets):
        if i:
            kind = rng.random()
            if kind < 0.15:
                gap = int(rng.integers(1_000_001, 5_000_000))
            elif kind < 0.2:
                gap = 1_000_000  # exactly at the threshold: not a split
            elif kind < 0.25:
                gap = 0
            else:
                gap = int(rng.integers(1, 400_000))
            ts += gap
        forward = i == 0 or rng.random() < 0.55
        flags = []
        if proto == PROTO_TCP:
            if rng.random() < 0.3:
                flags.append("PSH")
            if rng.random() < 0.1:
                flags.append("URG")
        a, b = (client, server) if forward else (server, client)
        pa, pb = (sport, dport) if forward else (dport, sport)
        out.append(pkt(ts, a, b, pa, pb, proto, int(rng.integers(0, 1400)), flags,
                       ip_options=4 * int(rng.integers(0, 3)),
                       tcp_options=4 * int(rng.integers(0, 4)) if proto == PROTO_TCP else 0))
    return out


# --- oracle: recompute every feature from the stored packet list -------------------


def _summary(values):
    if not values:
        return 0, 0.0, 0, 0.0
    mean = statistics.mean(Fraction(v) for v in values)
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return min(values), float(mean), max(values), float(std)


def oracle_features(packets, activity_threshold_us: int = 1_000_000) -> dict:
    """Straight-line recomputation of the 44 features for timestamp-ordered packets."""
    first = packets[0]
    fwd_end = (first.src_ip, first.src_port)
    fwd = [p for p in packets if (p.src_ip, p.src_port) == fwd_end]
    bwd = [p for p in packets if (p.src_ip, p.src_port) != fwd_end]

    def iats(ps):
        return [b.timestamp_us - a.timestamp_us for a, b in zip(ps, ps[1:])]

    periods = [[packets[0].timestamp_us]]
    idle = []
    for a, b in zip(packets, packets[1:]):
        gap = b.timestamp_us - a.timestamp_us
        if gap > activity_threshold_us:
            idle.append(gap)
            periods.append([b.timestamp_us])
        else:
            periods[-1].append(b.timestamp_us)
    active = [p[-1] - p[0] for p in periods]
    n_sub = len(periods)

    f = {
        "srcip": first.src_ip, "srcport": first.src_port,
        "dstip": first.dst_ip, "dstport": first.dst_port, "proto": first.protocol,
        "total_fpackets": len(fwd), "total_fvolume": sum(p.ip_total_len for p in fwd),
        "total_bpackets": len(bwd), "total_bvolume": sum(p.ip_total_len for p in bwd),
    }
    groups = [
        ("fpctl", [p.ip_total_len for p in fwd]), ("bpctl", [p.ip_total_len for p in bwd]),
        ("fiat", iats(fwd)), ("biat", iats(bwd)),
    ]
    for name, vals in groups:
        f[f"min_{name}"], f[f"mean_{name}"], f[f"max_{name}"], f[f"std_{name}"] = _summary(vals)
    f["duration"] = packets[-1].timestamp_us - packets[0].timestamp_us
    for name, vals in (("active", active), ("idle", idle)):
        f[f"min_{name}"], f[f"mean_{name}"], f[f"max_{name}"], f[f"std_{name}"] = _summary(vals)
    f["sflow_fpackets"] = len(fwd) / n_sub
    f["sflow_fbytes"] = f["total_fvolume"] / n_sub
    f["sflow_bpackets"] = len(bwd) / n_sub
    f["sflow_bbytes"] = f["total_bvolume"] / n_sub
    f["fpsh_cnt"] = sum("PSH" in p.flags for p in fwd)
    f["bpsh_cnt"] = sum("PSH" in p.flags for p in bwd)
    f["fiurg_cnt"] = sum("URG" in p.flags for p in fwd)
    f["burg_cnt"] = sum("URG" in p.flags for p in bwd)
    f["total_fhlen"] = sum(p.ip_header_len + p.transport_header_len for p in fwd)
    f["total_bhlen"] = sum(p.ip_header_len + p.transport_header_len for p in bwd)
    assert list(f) == [n for n in FEATURE_NAMES if n in f] and len(f) == 44
    return f


def feature_mismatches(got: dict, want: dict, rel: float = 1e-9) -> list[str]:
    bad = []
    for name in FEATURE_NAMES:
        g, w = got[name], want[name]
        if isinstance(w, str) or (isinstance(w, int) and isinstance(g, int)):
            if g != w:
                bad.append(f"{name}: {g!r} != {w!r}")
        elif not math.isclose(g, w, rel_tol=rel, abs_tol=0.0 if w else 1e-300):
            bad.append(f"{name}: {g!r} vs {w!r}")
    return bad


def group_by_5tuple(packets) -> dict:
    """Direction-insensitive grouping, ignoring timeouts and termination."""
    groups: dict = {}
    for p in packets:
        key = (frozenset([(p.src_ip, p.src_port), (p.dst_ip, p.dst_port)]), p.protocol)
        groups.setdefault(key, []).append(p)
    return groups


# --- oracle: information gain from an explicit contingency table -------------------


def contingency_info_gain(column, labels, bins: int = 10) -> float:
    """Equal-frequency bins from average ranks, then H(C) - H(C|bin) from counts."""
    from scipy.stats import rankdata

    column = np.asarray(column, dtype=float)
    labels = np.asarray(labels)
    n = len(column)
    ranks = rankdata(column, method="average")   # 1-based, ties share the mean rank
    bin_of = []
    for r in ranks:
        pos = Fraction(int(round(2 * r)) - 1, 2 * n) * bins   # bins * mid-rank position
        if pos.denominator == 1 and 2 * pos == bins:
            bin_of.append("median")
        elif pos.denominator == 1 and 2 * pos > bins:
            bin_of.append(int(pos) - 1)
        else:
            bin_of.append(min(bins - 1, math.floor(pos)))
    table: dict = {}
    for b, c in zip(bin_of, labels):
        table.setdefault(b, {}).setdefault(int(c), 0)
        table[b][int(c)] += 1

    def h(counts):
        tot = sum(counts)
        return -sum(k / tot * math.log2(k / tot) for k in counts if k)

    class_counts: dict = {}
    for c in labels:
        class_counts[int(c)] = class_counts.get(int(c), 0) + 1
    cond = sum(sum(row.values()) / n * h(list(row.values())) for row in table.values())
    return h(list(class_counts.values())) - cond


def hand_pcap(records, magic=0xA1B2C3D4, endian="<", link_type=1, ns=False) -> bytes:
    """Independent classic-pcap encoder for fixtures: records are (ts_us, frame)."""
    out = [struct.pack(endian + "IHHiIII", magic, 2, 4, 0, 0, 65535, link_type)]
    for ts, frame in records:
        sec, frac = divmod(ts, 1_000_000)
        if ns:
            frac *= 1000
        out.append(struct.pack(endian + "IIII", sec, frac, len(frame), len(frame)) + frame)
    return b"".join(out)


# --- synthetic training material for pipeline-level tests ---------------------------


def synthetic_vectors(counts, seed=0):
    """Meter a generated capture; each profile's flows carry its label."""
    from p2pdetect.flow_meter import meter_frames
    from p2pdetect.synthetic import TrafficGenerator

    gen = TrafficGenerator(seed)
    out = []
    for profile, n in counts.items():
        frames = [(f, 1, ts) for fl in gen.flows(profile, n) for ts, f in fl.packets]
        frames.sort(key=lambda t: t[2])
        out.extend(meter_frames(frames, label=profile.label))
    return out


_MODEL_CACHE: dict = {}


def detector_model(seed=0, n_hidden=3):
    """A small network trained on benign vs generator-A flows (cached per process)."""
    from p2pdetect.brann import TrainingConfig, train
    from p2pdetect.dataset import Dataset, rank_features
    from p2pdetect.flow_meter import IDENTIFIER_FEATURES
    from p2pdetect.synthetic import BENIGN, MALICIOUS_A

    key = (seed, n_hidden)
    if key not in _MODEL_CACHE:
        ds = Dataset.from_vectors(synthetic_vectors({BENIGN: 150, MALICIOUS_A: 150}, seed))
        ranked = rank_features(ds.without_identifiers(), 8)
        assert not set(ranked.names) & set(IDENTIFIER_FEATURES)
        cfg = TrainingConfig(seed=seed, max_epochs=100)
        _MODEL_CACHE[key] = train(ds, ranked.names, cfg, n_hidden=n_hidden)[0]
    return _MODEL_CACHE[key]
