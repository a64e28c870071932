"""orsd: open-prompt rotated-box detection at desk scale.

Subpackages and modules:

- ``orsd.geom``: oriented-box geometry, rotated IoU, class-agnostic NMS
- ``orsd.numkit``: dense float64 kernels with reverse-mode differentiation
- ``orsd.promptdict``: prompt-embedding dictionaries, sampling, clustering
- ``orsd.heads``: alignment and fusion detection heads with their losses
- ``orsd.pseudolabel``: the self-training pseudo-label engine
- ``orsd.harness``: synthetic scenes, toy detector, training, evaluation,
  file formats, and the command-line interface
"""

from .geom import (
    Detection,
    HorizontalBox,
    OrientedBox,
    class_agnostic_nms,
    hbb_iou,
    obb_corners,
    obb_to_hbb,
    prompt_crop_window,
    rotated_iou,
)

__all__ = [
    "Detection",
    "HorizontalBox",
    "OrientedBox",
    "class_agnostic_nms",
    "hbb_iou",
    "obb_corners",
    "obb_to_hbb",
    "prompt_crop_window",
    "rotated_iou",
]

__version__ = "0.1.0"
