"""The 44 per-flow features, in export order.

Spellings (``*_fpctl``, ``fiurg_cnt``) follow the published feature list so
the CSV headers line up with it.
"""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass, field, fields

FEATURE_NAMES: tuple[str, ...] = (
    "srcip", "srcport", "dstip", "dstport", "proto",
    "total_fpackets", "total_fvolume", "total_bpackets", "total_bvolume",
    "min_fpctl", "mean_fpctl", "max_fpctl", "std_fpctl",
    "min_bpctl", "mean_bpctl", "max_bpctl", "std_bpctl",
    "min_fiat", "mean_fiat", "max_fiat", "std_fiat",
    "min_biat", "mean_biat", "max_biat", "std_biat",
    "duration",
    "min_active", "mean_active", "max_active", "std_active",
    "min_idle", "mean_idle", "max_idle", "std_idle",
    "sflow_fpackets", "sflow_fbytes", "sflow_bpackets", "sflow_bbytes",
    "fpsh_cnt", "bpsh_cnt", "fiurg_cnt", "burg_cnt",
    "total_fhlen", "total_bhlen",
)

# Network-configuration dependent; never used as model inputs.
IDENTIFIER_FEATURES: tuple[str, ...] = ("srcip", "srcport", "dstip", "dstport")

# forward name -> backward name, for every direction-specific feature
DIRECTION_PAIRS: dict[str, str] = {
    "total_fpackets": "total_bpackets",
    "total_fvolume": "total_bvolume",
    "min_fpctl": "min_bpctl",
    "mean_fpctl": "mean_bpctl",
    "max_fpctl": "max_bpctl",
    "std_fpctl": "std_bpctl",
    "min_fiat": "min_biat",
    "mean_fiat": "mean_biat",
    "max_fiat": "max_biat",
    "std_fiat": "std_biat",
    "sflow_fpackets": "sflow_bpackets",
    "sflow_fbytes": "sflow_bbytes",
    "fpsh_cnt": "bpsh_cnt",
    "fiurg_cnt": "burg_cnt",
    "total_fhlen": "total_bhlen",
}


@dataclass(frozen=True)
class FeatureVector:
    srcip: str
    srcport: int
    dstip: str
    dstport: int
    proto: int
    total_fpackets: int
    total_fvolume: int
    total_bpackets: int
    total_bvolume: int
    min_fpctl: float
    mean_fpctl: float
    max_fpctl: float
    std_fpctl: float
    min_bpctl: float
    mean_bpctl: float
    max_bpctl: float
    std_bpctl: float
    min_fiat: float
    mean_fiat: float
    max_fiat: float
    std_fiat: float
    min_biat: float
    mean_biat: float
    max_biat: float
    std_biat: float
    duration: int
    min_active: float
    mean_active: float
    max_active: float
    std_active: float
    min_idle: float
    mean_idle: float
    max_idle: float
    std_idle: float
    sflow_fpackets: float
    sflow_fbytes: float
    sflow_bpackets: float
    sflow_bbytes: float
    fpsh_cnt: int
    bpsh_cnt: int
    fiurg_cnt: int
    burg_cnt: int
    total_fhlen: int
    total_bhlen: int
    first_ts_us: int = 0
    last_ts_us: int = 0
    label: int | None = None
    end_reason: str = ""
    packet_refs: tuple = field(default=(), repr=False, compare=False)

    def features(self) -> tuple:
        return tuple(getattr(self, name) for name in FEATURE_NAMES)

    def as_dict(self) -> dict:
        return dict(zip(FEATURE_NAMES, self.features()))

    def numeric_row(self) -> list[float]:
        """All 44 values as numbers; IPv4 addresses become their 32-bit integer."""
        row = []
        for name, value in zip(FEATURE_NAMES, self.features()):
            if name in ("srcip", "dstip"):
                value = int(ipaddress.IPv4Address(value))
            row.append(float(value))
        return row

    def get(self, name: str):
        if name not in _FIELD_SET:
            raise KeyError(name)
        return getattr(self, name)


_FIELD_SET = frozenset(f.name for f in fields(FeatureVector)[: len(FEATURE_NAMES)])
assert tuple(f.name for f in fields(FeatureVector)[: len(FEATURE_NAMES)]) == FEATURE_NAMES
