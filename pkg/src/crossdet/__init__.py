"""Cross-domain (day-to-night) car detection at desk scale.

Library layout, one module per subsystem:

- ``boxgeom``: box geometry, IoU/GIoU and the GIoU regression loss
- ``detmetrics``: matching, precision/recall/F1, AP and mAP
- ``attention``: channel/spatial attention blocks and auxiliary-classifier attention
- ``detector``: the attention-augmented two-stage detector, training and fine-tuning
- ``translator``: unpaired day/night translation and its four-term objective
- ``augment``: photometric augmentation and 4x dataset expansion
- ``pyramid``: Laplacian pyramid and the high-resolution translation path
- ``datakit``: manifests, image I/O, synthetic benchmark, report rendering
- ``cli`` / ``config``: the ``crossdet`` command and run configuration
"""

from .boxgeom import (
    Box,
    Detection,
    LabeledBox,
    area,
    enclosing_box,
    giou,
    giou_loss,
    iou,
)
from .detmetrics import (
    MatchResult,
    MetricsReport,
    average_precision,
    evaluate_detections,
    match_detections,
    mean_ap,
    precision_recall_f1,
)

__version__ = "0.1.0"

__all__ = [
    "Box",
    "LabeledBox",
    "Detection",
    "area",
    "iou",
    "enclosing_box",
    "giou",
    "giou_loss",
    "MatchResult",
    "MetricsReport",
    "match_detections",
    "precision_recall_f1",
    "average_precision",
    "mean_ap",
    "evaluate_detections",
    "__version__",
]
