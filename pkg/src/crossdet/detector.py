"""Attention R-CNN: a small two-stage detector with optional channel/spatial
attention at the head and tail of the backbone and an optional GIoU
regression loss, plus source-domain training and target-domain fine-tuning.

The backbone is a 4-block stride-8 convolution stack sized for desk-scale
images (default 64x64); region proposals, RoI max pooling and the
classification/regression head follow the standard two-stage layout. All
backbone convolutions are bias-free so a zero-initialized attention block
scales the feature map by exactly 0.25 per enabled site.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn
import torch.nn.functional as F

from . import datakit, detmetrics
from .attention import Cbam
from .boxgeom import EPS, Box, Detection, LabeledBox, giou_loss_tensor, pairwise_iou

STRIDE = 8
BCE_EPS = 1e-7


@dataclass(frozen=True)
class Anchor:
    center_x: float
    center_y: float
    width: float
    height: float


@dataclass(frozen=True)
class Proposal:
    box: Box
    objectness: float


@dataclass
class DetectorConfig:
    batch_size: int = 8
    epochs: int = 30
    learning_rate: float = 0.001
    momentum: float = 0.9  # Adam beta1
    anchor_sizes: tuple[int, ...] = (8, 16, 32)
    aspect_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    image_size: int = 64
    base_width: int = 16
    num_classes: int = 1  # foreground classes ("car")
    cbam_head: bool = True
    cbam_tail: bool = True
    use_giou: bool = True
    cbam_reduction: int = 4
    cbam_kernel: int = 7
    rpn_positive_iou: float = 0.7
    rpn_negative_iou: float = 0.3
    rpn_sample_size: int = 64
    proposal_pre_nms: int = 200
    proposal_nms_iou: float = 0.7
    proposal_post_nms: int = 50
    head_positive_iou: float = 0.5
    head_sample_size: int = 48
    head_fg_fraction: float = 0.25
    roi_size: int = 7
    finetune_lr_scale: float = 0.1

    def __post_init__(self):
        if min(self.batch_size, self.epochs, self.base_width, self.num_classes) < 1:
            raise ValueError("batch_size, epochs, base_width, num_classes must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if list(self.anchor_sizes) != sorted(self.anchor_sizes):
            raise ValueError("anchor_sizes must be sorted ascending")
        if self.image_size % STRIDE != 0:
            raise ValueError(f"image_size must be a multiple of {STRIDE}")


def _conv_block(c_in: int, c_out: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False),
        nn.ReLU(inplace=True),
    )


class DetectorModel(nn.Module):
    """Backbone + RPN + detection head, with ablation flags in the config."""

    def __init__(self, config: DetectorConfig):
        super().__init__()
        self.config = config
        w = config.base_width
        self.block1 = _conv_block(3, w, 2)
        self.block2 = _conv_block(w, 2 * w, 2)
        self.block3 = _conv_block(2 * w, 2 * w, 2)
        self.block4 = _conv_block(2 * w, 2 * w, 1)
        self.cbam_head = (
            Cbam(w, config.cbam_reduction, config.cbam_kernel) if config.cbam_head else None
        )
        self.cbam_tail = (
            Cbam(2 * w, config.cbam_reduction, config.cbam_kernel) if config.cbam_tail else None
        )
        a = len(config.anchor_sizes) * len(config.aspect_ratios)
        self.rpn_conv = nn.Conv2d(2 * w, 2 * w, 3, padding=1)
        self.rpn_obj = nn.Conv2d(2 * w, a, 1)
        self.rpn_delta = nn.Conv2d(2 * w, 4 * a, 1)
        head_in = 2 * w * config.roi_size * config.roi_size
        self.head_fc = nn.Linear(head_in, 128)
        self.head_cls = nn.Linear(128, config.num_classes + 1)
        self.head_reg = nn.Linear(128, 4 * config.num_classes)
        self._anchor_cache: dict[tuple[int, int], Tensor] = {}

    # -- stages -------------------------------------------------------------

    def backbone(self, images: Tensor) -> Tensor:
        x = self.block1(images)
        if self.cbam_head is not None:
            x = self.cbam_head(x)
        x = self.block4(self.block3(self.block2(x)))
        if self.cbam_tail is not None:
            x = self.cbam_tail(x)
        return x

    def rpn(self, features: Tensor) -> tuple[Tensor, Tensor]:
        """Per-anchor objectness (A,) and deltas (A, 4) for a single image."""
        x = F.relu(self.rpn_conv(features))
        obj = torch.sigmoid(self.rpn_obj(x))
        deltas = self.rpn_delta(x)
        n, a, hf, wf = obj.shape
        if n != 1:
            raise ValueError("rpn operates on one image at a time")
        obj = obj.permute(0, 2, 3, 1).reshape(-1)
        deltas = deltas.reshape(1, a, 4, hf, wf).permute(0, 3, 4, 1, 2).reshape(-1, 4)
        return obj, deltas

    def head(self, pooled: Tensor) -> tuple[Tensor, Tensor]:
        """Class logits (P, K+1) and per-class deltas (P, K, 4)."""
        x = F.relu(self.head_fc(pooled.flatten(1)))
        logits = self.head_cls(x)
        deltas = self.head_reg(x).reshape(-1, self.config.num_classes, 4)
        return logits, deltas

    def anchors_for(self, feature_hw: tuple[int, int]) -> Tensor:
        key = (int(feature_hw[0]), int(feature_hw[1]))
        if key not in self._anchor_cache:
            anchors = generate_anchors(key, self.config)
            self._anchor_cache[key] = anchors_as_tensor(anchors)
        return self._anchor_cache[key]


# ---------------------------------------------------------------------------
# geometry plumbing
# ---------------------------------------------------------------------------


def generate_anchors(feature_shape: tuple[int, int], config: DetectorConfig) -> list[Anchor]:
    """Nine anchors per feature cell (sizes x ratios {0.5, 1, 2}), centered at
    the cell's input-pixel center; ordering is cell row-major, then size,
    then ratio. Sizes are absolute pixels; ratio is height/width at equal area.
    """
    hf, wf = feature_shape
    anchors = []
    for i in range(hf):
        for j in range(wf):
            cx = (j + 0.5) * STRIDE
            cy = (i + 0.5) * STRIDE
            for size in config.anchor_sizes:
                for ratio in config.aspect_ratios:
                    w = size / math.sqrt(ratio)
                    h = size * math.sqrt(ratio)
                    anchors.append(Anchor(cx, cy, w, h))
    return anchors


def anchors_as_tensor(anchors: list[Anchor]) -> Tensor:
    """Corner-form (A, 4) float32 tensor from a list of anchors."""
    out = torch.empty((len(anchors), 4), dtype=torch.float32)
    for i, a in enumerate(anchors):
        out[i, 0] = a.center_x - a.width / 2
        out[i, 1] = a.center_y - a.height / 2
        out[i, 2] = a.center_x + a.width / 2
        out[i, 3] = a.center_y + a.height / 2
    return out


def encode_boxes(boxes: Tensor, anchors: Tensor) -> Tensor:
    """Center/size offsets of boxes w.r.t. anchors, log-space for sizes."""
    bw = (boxes[:, 2] - boxes[:, 0]).clamp(min=1e-6)
    bh = (boxes[:, 3] - boxes[:, 1]).clamp(min=1e-6)
    aw = (anchors[:, 2] - anchors[:, 0]).clamp(min=1e-6)
    ah = (anchors[:, 3] - anchors[:, 1]).clamp(min=1e-6)
    bx = boxes[:, 0] + bw / 2
    by = boxes[:, 1] + bh / 2
    ax = anchors[:, 0] + aw / 2
    ay = anchors[:, 1] + ah / 2
    return torch.stack(
        [(bx - ax) / aw, (by - ay) / ah, torch.log(bw / aw), torch.log(bh / ah)], dim=1
    )


def decode_boxes(deltas: Tensor, anchors: Tensor) -> Tensor:
    """Inverse of encode_boxes; widths/heights stay positive via exp."""
    aw = (anchors[:, 2] - anchors[:, 0]).clamp(min=1e-6)
    ah = (anchors[:, 3] - anchors[:, 1]).clamp(min=1e-6)
    ax = anchors[:, 0] + aw / 2
    ay = anchors[:, 1] + ah / 2
    cx = deltas[:, 0] * aw + ax
    cy = deltas[:, 1] * ah + ay
    # cap the log-size deltas so early training cannot overflow exp
    w = torch.exp(deltas[:, 2].clamp(max=8.0)) * aw
    h = torch.exp(deltas[:, 3].clamp(max=8.0)) * ah
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=1)


def assign_rpn_targets(
    anchors: Tensor,
    gt_boxes: Tensor,
    positive_iou: float = 0.7,
    negative_iou: float = 0.3,
) -> tuple[Tensor, Tensor]:
    """Per-anchor labels (1 positive, 0 negative, -1 ignored) and encoded
    regression targets for positives.

    An anchor is positive when its best IoU reaches positive_iou or when it is
    the (lowest-index) argmax anchor of some ground truth; negative when its
    best IoU is at most negative_iou. With no ground truth everything is
    negative. Each positive regresses toward its own best-IoU ground truth.
    """
    n = anchors.shape[0]
    targets = torch.zeros((n, 4), dtype=anchors.dtype)
    if gt_boxes.numel() == 0:
        return torch.zeros(n, dtype=torch.long), targets
    ious = pairwise_iou(anchors, gt_boxes)
    best_iou, best_gt = ious.max(dim=1)
    labels = torch.full((n,), -1, dtype=torch.long)
    labels[best_iou <= negative_iou] = 0
    labels[best_iou >= positive_iou] = 1
    labels[ious.argmax(dim=0)] = 1  # force one positive per ground truth
    pos = labels == 1
    targets[pos] = encode_boxes(gt_boxes[best_gt[pos]], anchors[pos])
    return labels, targets


def nms(boxes: Tensor, scores: Tensor, iou_threshold: float) -> list[int]:
    """Greedy non-maximum suppression; returns kept indices in score order
    (ties broken by index)."""
    n = len(scores)
    if n == 0:
        return []
    b = np.asarray(boxes.detach().numpy(), dtype=np.float64)
    s = np.asarray(scores.detach().numpy(), dtype=np.float64)
    order = np.lexsort((np.arange(n), -s))
    lt = np.maximum(b[:, None, :2], b[None, :, :2])
    rb = np.minimum(b[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    areas = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = areas[:, None] + areas[None, :] - inter
    iou = inter / np.maximum(union, EPS)
    suppressed = np.zeros(n, dtype=bool)
    keep: list[int] = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= iou[i] > iou_threshold
        suppressed[i] = True
    return keep


def select_proposals(
    objectness: Tensor,
    deltas: Tensor,
    anchors: Tensor,
    image_size: int,
    config: DetectorConfig,
) -> list[Proposal]:
    """Decode, clip to the image, drop sub-pixel boxes, keep the top
    pre-NMS candidates by objectness, suppress at the proposal NMS threshold,
    and return at most proposal_post_nms proposals sorted by objectness."""
    boxes = decode_boxes(deltas, anchors)
    boxes[:, 0::2] = boxes[:, 0::2].clamp(0, image_size)
    boxes[:, 1::2] = boxes[:, 1::2].clamp(0, image_size)
    wide = (boxes[:, 2] - boxes[:, 0]) >= 1.0
    tall = (boxes[:, 3] - boxes[:, 1]) >= 1.0
    keep_mask = wide & tall
    idx = torch.nonzero(keep_mask).squeeze(1)
    if idx.numel() == 0:
        return []
    scores = objectness[idx]
    order = np.lexsort((np.arange(len(idx)), -scores.detach().numpy()))
    order = torch.from_numpy(np.ascontiguousarray(order[: config.proposal_pre_nms]))
    cand_boxes = boxes[idx[order]]
    cand_scores = scores[order]
    kept = nms(cand_boxes, cand_scores, config.proposal_nms_iou)[: config.proposal_post_nms]
    out = []
    for k in kept:
        b = cand_boxes[k]
        out.append(
            Proposal(
                Box(float(b[0]), float(b[1]), float(b[2]), float(b[3])),
                float(cand_scores[k]),
            )
        )
    return out


def roi_pool(features: Tensor, boxes: Tensor, stride: int = STRIDE, output_size: int = 7) -> Tensor:
    """Max-pool each box into an output_size grid of feature cells.

    Boxes are image-pixel corner form; the covered cell range per box is
    [floor(lo/stride), ceil(hi/stride)) clamped to the map, at least one cell,
    so degenerate sub-bins fall back to the nearest single cell. Returns
    (P, C, output_size, output_size); empty input gives an empty tensor.
    """
    c, hf, wf = features.shape
    if boxes.numel() == 0:
        return torch.empty((0, c, output_size, output_size), dtype=features.dtype)
    outs = []
    for b in boxes:
        x0 = min(max(int(math.floor(float(b[0]) / stride)), 0), wf - 1)
        y0 = min(max(int(math.floor(float(b[1]) / stride)), 0), hf - 1)
        x1 = min(max(int(math.ceil(float(b[2]) / stride)), x0 + 1), wf)
        y1 = min(max(int(math.ceil(float(b[3]) / stride)), y0 + 1), hf)
        crop = features[:, y0:y1, x0:x1]
        outs.append(F.adaptive_max_pool2d(crop, output_size))
    return torch.stack(outs)


# ---------------------------------------------------------------------------
# the spec ops as thin functions over the model
# ---------------------------------------------------------------------------


def backbone_forward(image: Tensor, model: DetectorModel) -> Tensor:
    """Single-image backbone features (C_f, H/8, W/8); validates the input
    contract (3 channels, [0, 1] range, dims divisible by the stride)."""
    if image.dim() != 3 or image.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got {tuple(image.shape)}")
    if image.shape[1] % STRIDE or image.shape[2] % STRIDE:
        raise ValueError(f"image dims must be multiples of {STRIDE}")
    if float(image.min()) < 0.0 or float(image.max()) > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return model.backbone(image[None])[0]


def rpn_forward(features: Tensor, model: DetectorModel) -> tuple[Tensor, Tensor]:
    if features.dim() == 3:
        features = features[None]
    return model.rpn(features)


def detection_head(pooled: Tensor, model: DetectorModel) -> tuple[Tensor, Tensor]:
    """Softmax class distribution (P, K+1) and per-class refinements (P, K, 4)."""
    logits, deltas = model.head(pooled)
    return F.softmax(logits, dim=1), deltas


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _binary_ce(probs: Tensor, targets: Tensor) -> Tensor:
    p = probs.clamp(BCE_EPS, 1.0 - BCE_EPS)
    return -(targets * torch.log(p) + (1.0 - targets) * torch.log(1.0 - p)).mean()


def _regression_loss(pred_deltas, target_deltas, ref_boxes, use_giou):
    if use_giou:
        pred = decode_boxes(pred_deltas, ref_boxes)
        gt = decode_boxes(target_deltas, ref_boxes)
        return giou_loss_tensor(pred, gt).mean()
    return F.smooth_l1_loss(pred_deltas, target_deltas)


def rpn_loss(
    objectness: Tensor,
    deltas: Tensor,
    labels: Tensor,
    reg_targets: Tensor,
    anchors: Tensor,
    use_giou: bool,
) -> tuple[Tensor, Tensor]:
    """Objectness BCE over labeled anchors plus regression over positives.

    Regression is GIoU loss on decoded boxes when use_giou, else smooth-L1 on
    the raw offsets; no positives means a zero regression term.
    """
    sampled = labels >= 0
    if sampled.any():
        cls = _binary_ce(objectness[sampled], labels[sampled].to(objectness.dtype))
    else:
        cls = objectness.sum() * 0.0
    pos = labels == 1
    if pos.any():
        reg = _regression_loss(deltas[pos], reg_targets[pos], anchors[pos], use_giou)
    else:
        reg = deltas.sum() * 0.0
    return cls, reg


def head_loss(
    cls_logits: Tensor,
    reg_deltas: Tensor,
    labels: Tensor,
    reg_targets: Tensor,
    rois: Tensor,
    use_giou: bool,
) -> tuple[Tensor, Tensor]:
    """Cross-entropy over all rois plus regression over foreground rois,
    using each roi's own-class delta row."""
    cls = F.cross_entropy(cls_logits, labels)
    pos = labels > 0
    if pos.any():
        rows = torch.nonzero(pos).squeeze(1)
        per_class = reg_deltas[rows, labels[rows] - 1]
        reg = _regression_loss(per_class, reg_targets[rows], rois[rows], use_giou)
    else:
        reg = reg_deltas.sum() * 0.0
    return cls, reg


@dataclass
class DetectorLossComponents:
    rpn_cls: Tensor
    rpn_reg: Tensor
    head_cls: Tensor
    head_reg: Tensor

    @property
    def total(self) -> Tensor:
        return self.rpn_cls + self.rpn_reg + self.head_cls + self.head_reg

    def detach_floats(self) -> dict[str, float]:
        return {
            "rpn_cls": float(self.rpn_cls.detach()),
            "rpn_reg": float(self.rpn_reg.detach()),
            "head_cls": float(self.head_cls.detach()),
            "head_reg": float(self.head_reg.detach()),
            "total": float(self.total.detach()),
        }


def detector_loss(
    rpn_objectness: Tensor,
    rpn_deltas: Tensor,
    rpn_labels: Tensor,
    rpn_targets: Tensor,
    anchors: Tensor,
    head_logits: Tensor,
    head_deltas: Tensor,
    head_labels: Tensor,
    head_targets: Tensor,
    rois: Tensor,
    use_giou: bool,
) -> DetectorLossComponents:
    """Four-component training objective; the total is exactly their sum."""
    rc, rr = rpn_loss(rpn_objectness, rpn_deltas, rpn_labels, rpn_targets, anchors, use_giou)
    hc, hr = head_loss(head_logits, head_deltas, head_labels, head_targets, rois, use_giou)
    return DetectorLossComponents(rc, rr, hc, hr)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def detect(
    image: Tensor,
    model: DetectorModel,
    score_threshold: float = 0.5,
    nms_iou: float = 0.5,
) -> list[Detection]:
    """Full forward pass with per-class NMS; detections sorted by score."""
    for p in model.parameters():
        if not torch.isfinite(p).all():
            raise RuntimeError("model parameters contain NaN/Inf; refusing to run inference")
    model.eval()
    with torch.no_grad():
        feats = backbone_forward(image, model)
        obj, deltas = model.rpn(feats[None])
        anchors = model.anchors_for(feats.shape[1:])
        proposals = select_proposals(obj, deltas, anchors, image.shape[-1], model.config)
        if not proposals:
            return []
        rois = torch.tensor([p.box.as_tuple() for p in proposals], dtype=torch.float32)
        pooled = roi_pool(feats, rois)
        probs, reg = detection_head(pooled, model)
        detections: list[Detection] = []
        size = image.shape[-1]
        for k in range(model.config.num_classes):
            scores = probs[:, k + 1]
            keep = torch.nonzero(scores >= score_threshold).squeeze(1)
            if keep.numel() == 0:
                continue
            boxes = decode_boxes(reg[keep, k], rois[keep])
            boxes[:, 0::2] = boxes[:, 0::2].clamp(0, size)
            boxes[:, 1::2] = boxes[:, 1::2].clamp(0, size)
            kept = nms(boxes, scores[keep], nms_iou)
            for i in kept:
                b = boxes[i]
                if float(b[2] - b[0]) <= 0 or float(b[3] - b[1]) <= 0:
                    continue
                detections.append(
                    Detection(
                        Box(float(b[0]), float(b[1]), float(b[2]), float(b[3])),
                        class_id=k,
                        score=float(scores[keep[i]]),
                    )
                )
    detections.sort(key=lambda d: -d.score)
    return detections


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _load_training_set(manifest: datakit.DatasetManifest):
    data = []
    for entry in manifest.entries:
        img = torch.from_numpy(datakit.load_image(manifest.image_path(entry)))
        boxes = torch.tensor(
            [b.box.as_tuple() for b in entry.boxes], dtype=torch.float32
        ).reshape(-1, 4)
        labels = torch.tensor([b.class_id + 1 for b in entry.boxes], dtype=torch.long)
        data.append((img, boxes, labels))
    return data


def _sample_rpn_labels(labels: Tensor, sample_size: int) -> Tensor:
    """Subsample anchors for the objectness loss: up to half positives, the
    rest negatives; unsampled anchors are marked ignored."""
    out = torch.full_like(labels, -1)
    pos = torch.nonzero(labels == 1).squeeze(1)
    neg = torch.nonzero(labels == 0).squeeze(1)
    n_pos = min(len(pos), sample_size // 2)
    if len(pos) > n_pos:
        pos = pos[torch.randperm(len(pos))[:n_pos]]
    n_neg = min(len(neg), sample_size - n_pos)
    if len(neg) > n_neg:
        neg = neg[torch.randperm(len(neg))[:n_neg]]
    out[pos] = 1
    out[neg] = 0
    return out


def _assign_head_targets(rois: Tensor, gt_boxes: Tensor, gt_labels: Tensor, fg_iou: float):
    n = rois.shape[0]
    labels = torch.zeros(n, dtype=torch.long)
    targets = torch.zeros((n, 4), dtype=rois.dtype)
    if gt_boxes.numel() == 0:
        return labels, targets
    ious = pairwise_iou(rois, gt_boxes)
    best_iou, best_gt = ious.max(dim=1)
    fg = best_iou >= fg_iou
    labels[fg] = gt_labels[best_gt[fg]]
    targets[fg] = encode_boxes(gt_boxes[best_gt[fg]], rois[fg])
    return labels, targets


def _sample_rois(labels: Tensor, sample_size: int, fg_fraction: float) -> Tensor:
    """Indices of a class-balanced roi subset (at most fg_fraction foreground)."""
    fg = torch.nonzero(labels > 0).squeeze(1)
    bg = torch.nonzero(labels == 0).squeeze(1)
    n_fg = min(len(fg), int(round(sample_size * fg_fraction)))
    if len(fg) > n_fg:
        fg = fg[torch.randperm(len(fg))[:n_fg]]
    n_bg = min(len(bg), sample_size - n_fg)
    if len(bg) > n_bg:
        bg = bg[torch.randperm(len(bg))[:n_bg]]
    return torch.cat([fg, bg])


def _image_loss(model: DetectorModel, img: Tensor, gt_boxes: Tensor, gt_labels: Tensor):
    config = model.config
    feats = model.backbone(img[None])[0]
    obj, deltas = model.rpn(feats[None])
    anchors = model.anchors_for(feats.shape[1:])
    labels, targets = assign_rpn_targets(
        anchors, gt_boxes, config.rpn_positive_iou, config.rpn_negative_iou
    )
    labels = _sample_rpn_labels(labels, config.rpn_sample_size)
    with torch.no_grad():
        proposals = select_proposals(obj, deltas, anchors, img.shape[-1], config)
    rois = torch.tensor(
        [p.box.as_tuple() for p in proposals], dtype=torch.float32
    ).reshape(-1, 4)
    # ground-truth boxes join the roi set so the head always sees positives
    rois = torch.cat([rois, gt_boxes.reshape(-1, 4)], dim=0)
    head_labels, head_targets = _assign_head_targets(
        rois, gt_boxes, gt_labels, config.head_positive_iou
    )
    pick = _sample_rois(head_labels, config.head_sample_size, config.head_fg_fraction)
    rois, head_labels, head_targets = rois[pick], head_labels[pick], head_targets[pick]
    pooled = roi_pool(feats, rois)
    logits, head_deltas = model.head(pooled)
    return detector_loss(
        obj, deltas, labels, targets, anchors,
        logits, head_deltas, head_labels, head_targets, rois,
        config.use_giou,
    )


def _run_epochs(model, data, config, lr, epochs, out_dir, seed, history):
    opt = torch.optim.Adam(model.parameters(), lr=lr, betas=(config.momentum, 0.999))
    n = len(data)
    for epoch in range(epochs):
        model.train()
        order = torch.randperm(n).tolist()
        sums = {"rpn_cls": 0.0, "rpn_reg": 0.0, "head_cls": 0.0, "head_reg": 0.0, "total": 0.0}
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            opt.zero_grad()
            batch_loss = None
            for i in batch:
                img, boxes, labels = data[i]
                comps = _image_loss(model, img, boxes, labels)
                total = comps.total
                if not torch.isfinite(total):
                    raise RuntimeError(
                        f"non-finite loss at epoch {epoch} image {i}: {comps.detach_floats()}"
                    )
                piece = total / len(batch)
                batch_loss = piece if batch_loss is None else batch_loss + piece
                for k, v in comps.detach_floats().items():
                    sums[k] += v
            batch_loss.backward()
            opt.step()
        record = {"epoch": len(history), **{k: v / n for k, v in sums.items()}}
        history.append(record)
        if out_dir is not None:
            save_checkpoint(model, seed, Path(out_dir) / f"checkpoint_epoch_{record['epoch']:03d}.pt")
    return history


def train_detector(
    manifest: datakit.DatasetManifest,
    config: DetectorConfig,
    seed: int = 0,
    out_dir: str | Path | None = None,
) -> tuple[DetectorModel, list[dict]]:
    """Train from scratch on a labeled manifest; deterministic given the seed.

    Returns the model and a per-epoch loss history (component means per
    image). When out_dir is given, per-epoch checkpoints, a final
    checkpoint.pt and loss_history.csv are written there.
    """
    if not manifest.entries:
        raise ValueError("cannot train on an empty manifest")
    torch.manual_seed(seed)
    model = DetectorModel(config)
    data = _load_training_set(manifest)
    history: list[dict] = []
    _run_epochs(model, data, config, config.learning_rate, config.epochs, out_dir, seed, history)
    if out_dir is not None:
        save_checkpoint(model, seed, Path(out_dir) / "checkpoint.pt")
        save_loss_history(history, Path(out_dir) / "loss_history.csv")
    return model, history


def finetune(
    model: DetectorModel,
    generated_manifest: datakit.DatasetManifest,
    config: DetectorConfig | None = None,
    seed: int = 0,
    epochs: int | None = None,
    out_dir: str | Path | None = None,
) -> tuple[DetectorModel, list[dict]]:
    """Continue optimizing an already-trained model on generated images at a
    reduced learning rate (finetune_lr_scale x base); optimizer state is
    fresh. Zero epochs returns the model unchanged."""
    config = config or model.config
    if epochs is None:
        epochs = config.epochs
    history: list[dict] = []
    if epochs == 0:
        return model, history
    if not generated_manifest.entries:
        raise ValueError("cannot fine-tune on an empty manifest")
    torch.manual_seed(seed)
    data = _load_training_set(generated_manifest)
    lr = config.learning_rate * config.finetune_lr_scale
    _run_epochs(model, data, config, lr, epochs, out_dir, seed, history)
    if out_dir is not None:
        save_checkpoint(model, seed, Path(out_dir) / "checkpoint.pt")
        save_loss_history(history, Path(out_dir) / "loss_history.csv")
    return model, history


def evaluate_model(
    model: DetectorModel,
    manifest: datakit.DatasetManifest,
    iou_threshold: float = 0.5,
    score_threshold: float = 0.5,
    detection_floor: float = 0.05,
) -> detmetrics.MetricsReport:
    """Run the detector over a manifest and score it against the annotations.

    Detections are collected down to detection_floor so the PR curve is
    complete; precision/recall/F1 in the report apply score_threshold.
    """
    results = []
    for entry in manifest.entries:
        img = torch.from_numpy(datakit.load_image(manifest.image_path(entry)))
        dets = detect(img, model, score_threshold=detection_floor)
        results.append((dets, entry.boxes))
    return detmetrics.evaluate_detections(results, iou_threshold, score_threshold)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_checkpoint(model: DetectorModel, seed: int, path: str | Path) -> None:
    """Self-describing archive: parameters plus the config and seed."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {"kind": "detector", "config": asdict(model.config), "seed": seed,
         "state_dict": model.state_dict()},
        path,
    )


def load_checkpoint(path: str | Path) -> tuple[DetectorModel, int]:
    blob = torch.load(path, weights_only=False)
    if blob.get("kind") != "detector":
        raise ValueError(f"{path} is not a detector checkpoint")
    cfg = blob["config"]
    for k in ("anchor_sizes", "aspect_ratios"):
        if isinstance(cfg.get(k), list):
            cfg[k] = tuple(cfg[k])
    config = DetectorConfig(**cfg)
    model = DetectorModel(config)
    model.load_state_dict(blob["state_dict"])
    return model, blob["seed"]


def checkpoint_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_loss_history(history: list[dict], path: str | Path) -> None:
    if not history:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(history[0].keys()))
        writer.writeheader()
        writer.writerows(history)


def save_detections(records: list[tuple[str, Detection]], path: str | Path) -> None:
    """Dump detections as one line per box: image id, class, score, 4 coords."""
    lines = ["detections_version 1"]
    for image_id, d in records:
        b = d.box
        lines.append(
            f"{image_id} {d.class_id} {d.score!r} {b.x_min!r} {b.y_min!r} {b.x_max!r} {b.y_max!r}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def load_detections(path: str | Path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "detections_version 1":
        raise ValueError(f"{path}: not a detection dump (missing version line)")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
        image_id, cls, score, x0, y0, x1, y1 = parts
        det = Detection(
            Box(float(x0), float(y0), float(x1), float(y1)), int(cls), float(score)
        )
        out.setdefault(image_id, []).append(det)
    return out
