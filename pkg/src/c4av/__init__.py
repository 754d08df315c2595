"""Region-proposal ranking baseline for command-driven object referral."""

from c4av.geometry import Box, ScoredBox, area, assign_labels, iou, nms

__all__ = ["Box", "ScoredBox", "area", "assign_labels", "iou", "nms"]
__version__ = "0.1.0"
