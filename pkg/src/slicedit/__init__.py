"""Zero-shot text-guided video editing with spatiotemporal slices."""

from .pipeline import EditConfig, InversionRecord, edit, invert, invert_ddim, sample, sampling_plan
from .stvolume import Axis, BlendMode, SegmentPlan, Space, VideoVolume, segment_plan

__version__ = "0.1.0"

__all__ = [
    "Axis",
    "BlendMode",
    "EditConfig",
    "InversionRecord",
    "SegmentPlan",
    "Space",
    "VideoVolume",
    "edit",
    "invert",
    "invert_ddim",
    "sample",
    "sampling_plan",
    "segment_plan",
]
