"""Packet decoding and bidirectional flow metering."""

from .features import DIRECTION_PAIRS, FEATURE_NAMES, IDENTIFIER_FEATURES, FeatureVector
from .meter import (
    FlowKey,
    FlowState,
    FlowTable,
    MeterConfig,
    MeterSummary,
    RunningStat,
    canonical_key,
    finalize,
    meter_frames,
    meter_pcap,
)
from .packets import (
    LINKTYPE_ETHERNET,
    LINKTYPE_RAW,
    PROTO_TCP,
    PROTO_UDP,
    MalformedFrameError,
    PacketError,
    PacketRecord,
    TruncatedCaptureError,
    build_frame,
    parse_packet,
)
from .pcapio import BadMagicError, PcapWriter, TruncatedPcapError, read_pcap, write_pcap

__all__ = [
    "DIRECTION_PAIRS", "FEATURE_NAMES", "IDENTIFIER_FEATURES", "FeatureVector",
    "FlowKey", "FlowState", "FlowTable", "MeterConfig", "MeterSummary", "RunningStat",
    "canonical_key", "finalize", "meter_frames", "meter_pcap",
    "LINKTYPE_ETHERNET", "LINKTYPE_RAW", "PROTO_TCP", "PROTO_UDP",
    "MalformedFrameError", "PacketError", "PacketRecord", "TruncatedCaptureError",
    "build_frame", "parse_packet",
    "BadMagicError", "PcapWriter", "TruncatedPcapError", "read_pcap", "write_pcap",
]
