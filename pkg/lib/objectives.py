"""
Prediction head, box decoding and the tracking/unmixing loss stack
"""

import math
from typing import List, NamedTuple, Optional, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator

from lib.backbone import upsample_mask
from lib.nn import BatchNorm2d, Conv2d, Module
from lib.tensor import (
    Tensor, absolute, as_tensor, log, masked_mul, maximum, minimum, relu, sigmoid,
    stack, tensor_sum
)
from lib.unmixing import reconstruction_loss

PROB_CLAMP = 1e-6


class ObjectiveError(ValueError):
    """Invalid box, target or loss input"""
    pass


class HeadOutputs(NamedTuple):
    """Score, offset and size maps over the search grid, each (B, k, g, g) in (0, 1)"""
    cls: Tensor
    offset: Tensor
    size: Tensor


class BBox(NamedTuple):
    """Box in pixels: top-left corner plus extent"""
    x: float
    y: float
    w: float
    h: float

    @property
    def center(self):
        return self.x + self.w / 2.0, self.y + self.h / 2.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BBox":
        return cls(cx - w / 2.0, cy - h / 2.0, w, h)


class LossWeights(BaseModel):
    iou: float = Field(default=2.0, ge=0.0, description="GIoU loss weight")
    l1: float = Field(default=5.0, ge=0.0, description="L1 box loss weight")
    unmix: float = Field(default=0.5, ge=0.0, le=1.0, description="Balance of unmixing vs tracking (lambda_u)")
    ce: float = Field(default=0.2, gt=0.0, lt=1.0, description="Background weight inside the search region (lambda_ce)")

    @field_validator("iou", "l1", "unmix", "ce")
    @classmethod
    def validate_finite(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("Loss weights must be finite")
        return v


class TrackingTerms(NamedTuple):
    cls: Tensor
    iou: Tensor
    l1: Tensor


BoxLike = Union[BBox, np.ndarray, List[float]]


def _box_rows(boxes: BoxLike) -> np.ndarray:
    rows = np.atleast_2d(np.asarray(boxes, dtype=np.float64))
    if rows.shape[-1] != 4:
        raise ObjectiveError(f"Boxes need 4 values (x, y, w, h), got shape {rows.shape}")
    if np.any(rows[:, 2:] <= 0):
        raise ObjectiveError(f"Boxes need positive extents, got {rows[:, 2:].tolist()}")
    return rows


class HeadBranch(Module):
    """Stacked 3x3 conv-BN-ReLU layers, then a 1x1 projection and sigmoid"""

    def __init__(self, dim: int, out_channels: int, rng: np.random.Generator,
                 channels: int = 64, depth: int = 5):
        self.convs = [Conv2d(dim if i == 0 else channels, channels, 3, rng, padding=1) for i in range(depth)]
        self.norms = [BatchNorm2d(channels) for _ in range(depth)]
        self.projection = Conv2d(channels, out_channels, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        for conv, bn in zip(self.convs, self.norms):
            x = relu(bn(conv(x)))
        return sigmoid(self.projection(x))


class CenterHead(Module):
    """Classification, offset and size branches over the search grid"""

    def __init__(self, dim: int, rng: np.random.Generator, channels: int = 64, depth: int = 5):
        self.dim = dim
        self.cls = HeadBranch(dim, 1, rng, channels, depth)
        self.offset = HeadBranch(dim, 2, rng, channels, depth)
        self.size = HeadBranch(dim, 2, rng, channels, depth)


def head_forward(search_grid: Tensor, head: CenterHead) -> HeadOutputs:
    """Search tokens as a (B, D, g, g) grid -> score/offset/size maps"""
    search_grid = as_tensor(search_grid)
    if search_grid.ndim != 4 or search_grid.shape[1] != head.dim:
        raise ObjectiveError(f"Head expects (B, {head.dim}, g, g) features, got {search_grid.shape}")
    return HeadOutputs(
        cls=head.cls(search_grid),
        offset=head.offset(search_grid),
        size=head.size(search_grid),
    )


def decode_boxes(out: HeadOutputs, stride: int = 8, search_size: int = 64) -> np.ndarray:
    """Boxes (B, 4) from the argmax cell of each score map (row-major tie-break)"""
    scores = out.cls.data[:, 0]
    batch, grid, _ = scores.shape
    flat = np.argmax(scores.reshape(batch, -1), axis=1)
    rows, cols = np.divmod(flat, grid)
    picks = np.arange(batch)
    dx, dy = out.offset.data[picks, 0, rows, cols], out.offset.data[picks, 1, rows, cols]
    w = out.size.data[picks, 0, rows, cols] * search_size
    h = out.size.data[picks, 1, rows, cols] * search_size
    cx = (cols + dx) * stride
    cy = (rows + dy) * stride
    return np.stack([cx - w / 2.0, cy - h / 2.0, w, h], axis=1)


def decode_box(out: HeadOutputs, index: int = 0, stride: int = 8, search_size: int = 64) -> BBox:
    return BBox(*decode_boxes(out, stride, search_size)[index].tolist())


def center_cells(boxes: BoxLike, grid: int = 8, stride: int = 8) -> np.ndarray:
    """(row, col) of the cell holding each box center, (B, 2)"""
    rows = _box_rows(boxes)
    cx = rows[:, 0] + rows[:, 2] / 2.0
    cy = rows[:, 1] + rows[:, 3] / 2.0
    cells = np.stack([np.floor(cy / stride), np.floor(cx / stride)], axis=1)
    return np.clip(cells, 0, grid - 1).astype(int)


def gaussian_target(gt: BoxLike, grid: int = 8, stride: int = 8) -> np.ndarray:
    """Gaussian heat map (B, 1, g, g) peaking at 1 on the gt-center cell"""
    rows = _box_rows(gt)
    cells = center_cells(rows, grid, stride)
    sigma = np.maximum(1.0, (rows[:, 2] / stride + rows[:, 3] / stride) / 6.0)
    index = np.arange(grid, dtype=np.float64)
    dy = index[None, :, None] - cells[:, 0, None, None]
    dx = index[None, None, :] - cells[:, 1, None, None]
    maps = np.exp(-(dx ** 2 + dy ** 2) / (2.0 * sigma[:, None, None] ** 2))
    return maps[:, None]


def focal_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Penalty-reduced focal loss, normalized by the count of peak cells"""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ObjectiveError(f"focal_loss: prediction {pred.shape} and target {target.shape} differ")
    positive = (target == 1.0).astype(np.float64)
    count = positive.sum()
    if count == 0:
        raise ObjectiveError("focal_loss: target has no peak cell")

    p = minimum(maximum(pred, PROB_CLAMP), 1.0 - PROB_CLAMP)
    q = 1.0 - p
    pos_term = masked_mul(q * q * log(p), positive)
    neg_term = masked_mul(p * p * log(q), (1.0 - target) ** 4 * (1.0 - positive))
    return -(tensor_sum(pos_term) + tensor_sum(neg_term)) * (1.0 / count)


def _as_box_tensor(boxes) -> Tensor:
    if isinstance(boxes, Tensor):
        if boxes.ndim == 1:
            boxes = boxes.reshape(1, 4)
        if np.any(boxes.data[:, 2:] <= 0):
            raise ObjectiveError(f"Boxes need positive extents, got {boxes.data[:, 2:].tolist()}")
        return boxes
    return as_tensor(_box_rows(boxes))


def giou_loss(pred, gt) -> Tensor:
    """Mean 1 - GIoU over the batch; boxes are (x, y, w, h)"""
    a, b = _as_box_tensor(pred), _as_box_tensor(gt)
    if a.shape != b.shape:
        raise ObjectiveError(f"giou_loss: box batches {a.shape} and {b.shape} differ")
    ax1, ay1, aw, ah = (a[:, i] for i in range(4))
    bx1, by1, bw, bh = (b[:, i] for i in range(4))
    ax2, ay2 = ax1 + aw, ay1 + ah
    bx2, by2 = bx1 + bw, by1 + bh

    inter_w = relu(minimum(ax2, bx2) - maximum(ax1, bx1))
    inter_h = relu(minimum(ay2, by2) - maximum(ay1, by1))
    inter = inter_w * inter_h
    union = aw * ah + bw * bh - inter
    enclose = (maximum(ax2, bx2) - minimum(ax1, bx1)) * (maximum(ay2, by2) - minimum(ay1, by1))
    giou = inter / union - (enclose - union) / enclose
    return (1.0 - giou).mean()


def l1_loss(pred, gt, search_size: int = 64) -> Tensor:
    """Mean |(cx, cy, w, h) difference| normalized by the search size"""
    a, b = _as_box_tensor(pred), _as_box_tensor(gt)
    if a.shape != b.shape:
        raise ObjectiveError(f"l1_loss: box batches {a.shape} and {b.shape} differ")

    def center_form(t: Tensor) -> Tensor:
        return stack([t[:, 0] + t[:, 2] * 0.5, t[:, 1] + t[:, 3] * 0.5, t[:, 2], t[:, 3]], axis=1)

    return absolute(center_form(a) - center_form(b)).mean() * (1.0 / search_size)


def boxes_at_cells(out: HeadOutputs, cells: np.ndarray, stride: int = 8, search_size: int = 64) -> Tensor:
    """Differentiable boxes (B, 4) decoded at the given (row, col) cells"""
    batch, _, grid, _ = out.offset.shape
    onehot = np.zeros((batch, grid, grid))
    onehot[np.arange(batch), cells[:, 0], cells[:, 1]] = 1.0

    def gather(maps: Tensor, channel: int) -> Tensor:
        return tensor_sum(masked_mul(maps[:, channel], onehot), axis=(1, 2))

    cx = (gather(out.offset, 0) + cells[:, 1].astype(np.float64)) * float(stride)
    cy = (gather(out.offset, 1) + cells[:, 0].astype(np.float64)) * float(stride)
    w = gather(out.size, 0) * float(search_size)
    h = gather(out.size, 1) * float(search_size)
    return stack([cx - w * 0.5, cy - h * 0.5, w, h], axis=1)


def tracking_terms(out: HeadOutputs, gt: BoxLike, stride: int = 8, search_size: int = 64) -> TrackingTerms:
    """Unweighted focal, GIoU and L1 terms; regression read at the gt-center cell"""
    rows = _box_rows(gt)
    grid = out.cls.shape[-1]
    if rows.shape[0] != out.cls.shape[0]:
        raise ObjectiveError(f"{rows.shape[0]} boxes for a batch of {out.cls.shape[0]}")
    cells = center_cells(rows, grid, stride)
    pred = boxes_at_cells(out, cells, stride, search_size)
    if np.any(pred.data[:, 2:] <= 0):
        raise ObjectiveError("Decoded box has a non-positive extent")
    return TrackingTerms(
        cls=focal_loss(out.cls, gaussian_target(rows, grid, stride)),
        iou=giou_loss(pred, rows),
        l1=l1_loss(pred, rows, search_size),
    )


def combine_tracking(terms: TrackingTerms, weights: LossWeights) -> Tensor:
    return terms.cls + terms.iou * weights.iou + terms.l1 * weights.l1


def tracking_loss(out: HeadOutputs, gt: BoxLike, weights: Optional[LossWeights] = None,
                  stride: int = 8, search_size: int = 64) -> Tensor:
    """L_cls + lambda_iou * L_giou + lambda_l1 * L_1"""
    return combine_tracking(tracking_terms(out, gt, stride, search_size), weights or LossWeights())


def target_unmixing_loss(xhat_t: Tensor, x_t: Tensor, xhat_s: Tensor, x_s: Tensor,
                         mask: np.ndarray, lambda_ce: float) -> Tensor:
    """Template reconstruction plus mask-split search reconstruction

    mask is V over the search grid (B, g, g) or already at pixel resolution;
    V = 0 marks target-relevant pixels, weighted 1 - lambda_ce.
    """
    if not 0.0 < lambda_ce < 1.0:
        raise ObjectiveError(f"lambda_ce must be in (0, 1), got {lambda_ce}")
    x_s = as_tensor(x_s)
    mask = np.asarray(mask, dtype=np.float64)
    height, width = x_s.shape[-2:]
    if mask.shape[-1] != width:
        if width % mask.shape[-1]:
            raise ObjectiveError(f"Mask grid {mask.shape} does not tile a {height}x{width} search crop")
        mask = upsample_mask(mask, width // mask.shape[-1])

    template_term = reconstruction_loss(xhat_t, x_t)
    target_term = reconstruction_loss(xhat_s, x_s, mask=1.0 - mask)
    background_term = reconstruction_loss(xhat_s, x_s, mask=mask)
    return template_term + target_term * (1.0 - lambda_ce) + background_term * lambda_ce


def total_loss(l_track: Tensor, l_unmix: Tensor, lambda_u: float) -> Tensor:
    """(1 - lambda_u) * L_track + lambda_u * L_unmix"""
    if not 0.0 <= lambda_u <= 1.0:
        raise ObjectiveError(f"lambda_u must be in [0, 1], got {lambda_u}")
    if lambda_u == 0.0:
        return l_track
    if lambda_u == 1.0:
        return l_unmix
    return l_track * (1.0 - lambda_u) + l_unmix * lambda_u
