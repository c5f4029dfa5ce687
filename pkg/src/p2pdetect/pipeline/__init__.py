"""Offline dataset building and training, and real-time detection."""

from .capture import AfPacketSource, CaptureOpenError, IterableSource, PcapFileSource
from .detect import (
    ChunkWriter,
    DetectConfig,
    DetectionRecord,
    DetectSummary,
    Detector,
    MaliciousSink,
    run_detect,
)

__all__ = [
    "AfPacketSource", "CaptureOpenError", "IterableSource", "PcapFileSource",
    "ChunkWriter", "DetectConfig", "DetectionRecord", "DetectSummary", "Detector",
    "MaliciousSink", "run_detect",
]
