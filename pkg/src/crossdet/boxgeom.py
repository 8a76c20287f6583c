"""Axis-aligned box geometry: areas, IoU, enclosing closure, GIoU, and the
GIoU regression loss.

Two surfaces are provided: scalar functions over :class:`Box` values (the
reference geometry API) and batched ``torch`` versions used inside
differentiable training paths. Both compute the same formulas; the tensor
versions clamp denominators by ``EPS`` so gradients stay finite, which only
affects degenerate inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

EPS = 1e-9


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in continuous pixel coordinates, corner form."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min <= self.x_max and self.y_min <= self.y_max):
            raise ValueError(f"invalid box extents: {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class LabeledBox:
    """Ground-truth annotation: a box plus its class index."""

    box: Box
    class_id: int

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"class_id must be non-negative, got {self.class_id}")


@dataclass(frozen=True)
class Detection:
    """Detector output: box, class index and confidence score in [0, 1]."""

    box: Box
    class_id: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score outside [0, 1]: {self.score}")


def area(b: Box) -> float:
    """Box area; degenerate (zero width or height) boxes return 0."""
    return (b.x_max - b.x_min) * (b.y_max - b.y_min)


def intersection_area(a: Box, b: Box) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0.0 or h <= 0.0:
        return 0.0
    return w * h


def iou(a: Box, b: Box) -> float:
    """Intersection over union in [0, 1].

    Two degenerate boxes have an empty union; that case returns 0 by
    convention rather than raising.
    """
    inter = intersection_area(a, b)
    union = area(a) + area(b) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def enclosing_box(a: Box, b: Box) -> Box:
    """Smallest axis-aligned rectangle containing both boxes."""
    return Box(
        min(a.x_min, b.x_min),
        min(a.y_min, b.y_min),
        max(a.x_max, b.x_max),
        max(a.y_max, b.y_max),
    )


def giou(a: Box, b: Box) -> float:
    """Generalized IoU in (-1, 1]: IoU minus the enclosure-normalized empty area.

    Raises ValueError when both boxes are degenerate (the enclosure ratio is
    0/0 and the quantity is undefined).
    """
    inter = intersection_area(a, b)
    union = area(a) + area(b) - inter
    if union <= 0.0:
        raise ValueError("giou undefined: both boxes are degenerate")
    enclosure = area(enclosing_box(a, b))
    return inter / union - (enclosure - union) / enclosure


def giou_loss(pred: Box, gt: Box) -> float:
    """Regression loss 1 - GIoU, in [0, 2); 0 iff the boxes are identical."""
    return 1.0 - giou(pred, gt)


# ---------------------------------------------------------------------------
# Batched tensor versions (corner form (..., 4) = x_min, y_min, x_max, y_max).
# ---------------------------------------------------------------------------


def area_tensor(boxes: Tensor) -> Tensor:
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def iou_tensor(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise IoU of two (..., 4) corner-form box tensors."""
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_tensor(a) + area_tensor(b) - inter
    return inter / union.clamp(min=EPS)

def giou_tensor(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise GIoU of two (..., 4) corner-form box tensors."""
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_tensor(a) + area_tensor(b) - inter
    enc_lt = torch.minimum(a[..., :2], b[..., :2])
    enc_rb = torch.maximum(a[..., 2:], b[..., 2:])
    enc_wh = (enc_rb - enc_lt).clamp(min=0)
    enclosure = enc_wh[..., 0] * enc_wh[..., 1]
    return inter / union.clamp(min=EPS) - (enclosure - union) / enclosure.clamp(min=EPS)


def giou_loss_tensor(pred: Tensor, gt: Tensor) -> Tensor:
    """Elementwise 1 - GIoU for corner-form box tensors."""
    return 1.0 - giou_tensor(pred, gt)


def pairwise_iou(a: Tensor, b: Tensor) -> Tensor:
    """IoU matrix of shape (N, M) for box tensors a (N, 4) and b (M, 4)."""
    return iou_tensor(a[:, None, :], b[None, :, :])
