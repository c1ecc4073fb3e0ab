"""Shared convolutional backbone and a single-stage axis-aligned box head.

The head predicts, per feature cell, an objectness logit plus four side
offsets (distances from the cell center to the box edges, in stride units).
Cells whose center falls inside a ground-truth box are positives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, conv2d, take_rows
from .errors import ContractError
from .geometry import AABox, FeatureMap, iou
from .nn import xavier_uniform
from .optim import ParamRegistry

_MIN_SIDE = 0.01  # stride units; keeps decoded boxes non-degenerate


@dataclass
class DetectionOutput:
    """Predicted boxes with confidence scores, sorted by descending score."""

    boxes: list[AABox] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)

    def __post_init__(self):
        if len(self.boxes) != len(self.scores):
            raise ContractError("boxes and scores must have equal length")


class Backbone:
    """Four 3x3 conv blocks; the first two downsample, overall stride 4."""

    STRIDES = (2, 2, 1, 1)

    def __init__(
        self,
        registry: ParamRegistry,
        rng: np.random.Generator,
        in_channels: int = 1,
        widths: tuple[int, ...] = (16, 32, 64, 64),
        lr_mult: float = 1.0,
        prefix: str = "backbone",
    ):
        self.widths = widths
        self.stride = int(np.prod(self.STRIDES))
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        c_prev = in_channels
        for i, c_out in enumerate(widths):
            w = registry.add(
                f"{prefix}.conv{i}.w",
                xavier_uniform(rng, (c_out, c_prev, 3, 3)),
                lr_mult=lr_mult,
            )
            b = registry.add(f"{prefix}.conv{i}.b", np.zeros(c_out), lr_mult=lr_mult)
            self.weights.append(w)
            self.biases.append(b)
            c_prev = c_out

    @property
    def out_channels(self) -> int:
        return self.widths[-1]

    def forward(self, image: Tensor) -> FeatureMap:
        if image.ndim != 3:
            raise ContractError(f"image must be [C,H,W], got {image.shape}")
        _, h, w = image.shape
        if h < self.stride or w < self.stride:
            raise ContractError(f"image {h}x{w} smaller than backbone stride")
        x = image
        for wt, b, s in zip(self.weights, self.biases, self.STRIDES):
            x = conv2d(x, wt, b, stride=s, padding=1).relu()
        return FeatureMap(x, self.stride)


class BoxHead:
    """3x3 conv + 1x1 conv to 5 channels: objectness logit and 4 offsets."""

    def __init__(
        self,
        registry: ParamRegistry,
        rng: np.random.Generator,
        in_channels: int,
        hidden: int = 32,
        lr_mult: float = 1.0,
        prefix: str = "det_head",
    ):
        self.w1 = registry.add(
            f"{prefix}.conv.w", xavier_uniform(rng, (hidden, in_channels, 3, 3)),
            lr_mult=lr_mult,
        )
        self.b1 = registry.add(f"{prefix}.conv.b", np.zeros(hidden), lr_mult=lr_mult)
        self.w2 = registry.add(
            f"{prefix}.out.w", xavier_uniform(rng, (5, hidden, 1, 1)), lr_mult=lr_mult
        )
        self.b2 = registry.add(f"{prefix}.out.b", np.zeros(5), lr_mult=lr_mult)

    def forward(self, fmap: FeatureMap) -> Tensor:
        x = conv2d(fmap.tensor, self.w1, self.b1, stride=1, padding=1).relu()
        return conv2d(x, self.w2, self.b2, stride=1, padding=0)


def _cell_centers(h: int, w: int, stride: float) -> tuple[np.ndarray, np.ndarray]:
    cy = (np.arange(h) + 0.5) * stride
    cx = (np.arange(w) + 0.5) * stride
    return cy, cx


def decode_boxes(head_out: np.ndarray, stride: float) -> tuple[np.ndarray, np.ndarray]:
    """All cells decoded to (N,4) pixel boxes plus (N,) objectness scores."""
    _, h, w = head_out.shape
    cy, cx = _cell_centers(h, w, stride)
    cyg, cxg = np.meshgrid(cy, cx, indexing="ij")
    off = np.maximum(head_out[1:5], _MIN_SIDE) * stride
    boxes = np.stack(
        [cxg - off[0], cyg - off[1], cxg + off[2], cyg + off[3]], axis=-1
    ).reshape(-1, 4)
    scores = 1.0 / (1.0 + np.exp(-head_out[0])).reshape(-1)
    return boxes, scores.reshape(-1)


def nms(boxes: list[AABox], scores: list[float], overlap: float) -> list[int]:
    """Greedy suppression: keep by descending score, drop IoU > overlap."""
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    keep: list[int] = []
    for i in order:
        if all(iou(boxes[i], boxes[j]) <= overlap for j in keep):
            keep.append(i)
    return keep


def detect(
    head_out: Tensor,
    stride: float,
    score_threshold: float = 0.5,
    nms_overlap: float = 0.3,
) -> DetectionOutput:
    """Decode head outputs into scored boxes with overlap suppression."""
    raw_boxes, scores = decode_boxes(head_out.data, stride)
    picked = np.nonzero(scores > score_threshold)[0]
    boxes = [AABox(*raw_boxes[i]) for i in picked]
    confs = [float(scores[i]) for i in picked]
    keep = nms(boxes, confs, nms_overlap)
    keep.sort(key=lambda i: (-confs[i], i))
    return DetectionOutput([boxes[i] for i in keep], [confs[i] for i in keep])


def assign_cells(
    shape: tuple[int, int], stride: float, gt_boxes: list[AABox]
) -> tuple[np.ndarray, np.ndarray]:
    """Positive mask (cell center inside a GT box) and offset targets.

    When centers fall in several boxes the smallest-area box wins.
    Returns (labels [H',W'] of gt index or -1, offsets [4,H',W']).
    """
    h, w = shape
    labels = np.full((h, w), -1, dtype=np.intp)
    offsets = np.zeros((4, h, w))
    cy, cx = _cell_centers(h, w, stride)
    order = sorted(
        range(len(gt_boxes)), key=lambda i: -gt_boxes[i].area
    )  # smaller boxes assigned last, so they win contested cells
    for gi in order:
        box = gt_boxes[gi]
        rows = np.nonzero((cy > box.y_min) & (cy < box.y_max))[0]
        cols = np.nonzero((cx > box.x_min) & (cx < box.x_max))[0]
        if rows.size == 0 or cols.size == 0:
            continue
        rr, cc = np.meshgrid(rows, cols, indexing="ij")
        labels[rr, cc] = gi
        offsets[0, rr, cc] = (cx[cc] - box.x_min) / stride
        offsets[1, rr, cc] = (cy[rr] - box.y_min) / stride
        offsets[2, rr, cc] = (box.x_max - cx[cc]) / stride
        offsets[3, rr, cc] = (box.y_max - cy[rr]) / stride
    return labels, offsets


def detection_loss(head_out: Tensor, gt_boxes: list[AABox], stride: float) -> Tensor:
    """Balanced objectness BCE plus smooth-L1 box regression on positive cells."""
    _, h, w = head_out.shape
    labels, offsets = assign_cells((h, w), stride, gt_boxes)
    n_cells = h * w
    pos = (labels >= 0).reshape(-1)
    y = Tensor(pos.astype(np.float64))

    logits = head_out[0].reshape(n_cells)
    bce = logits.softplus() - logits * y
    n_pos = int(pos.sum())
    n_neg = n_cells - n_pos
    pos_mask = Tensor(pos.astype(np.float64))
    neg_mask = Tensor((~pos).astype(np.float64))
    if n_pos and n_neg:
        cls = ((bce * pos_mask).sum() / n_pos + (bce * neg_mask).sum() / n_neg) * 0.5
    elif n_pos:
        cls = (bce * pos_mask).sum() / n_pos
    else:
        cls = (bce * neg_mask).sum() / n_neg

    if n_pos:
        pred = head_out[1:5].reshape(4, n_cells).T
        idx = np.nonzero(pos)[0]
        diff = take_rows(pred, idx) - Tensor(offsets.reshape(4, n_cells).T[idx])
        reg = diff.huber().mean()
    else:
        reg = Tensor(0.0)
    return cls + reg


def match_to_gt(
    pred: DetectionOutput, gt_boxes: list[AABox], iou_threshold: float = 0.5
) -> list[tuple[int, int]]:
    """Greedy one-to-one (pred, gt) matching by descending IoU."""
    if not (0.0 < iou_threshold < 1.0):
        raise ContractError(f"iou_threshold must be in (0,1), got {iou_threshold}")
    pairs = []
    for pi, pb in enumerate(pred.boxes):
        for gi, gb in enumerate(gt_boxes):
            v = iou(pb, gb)
            if v >= iou_threshold:
                pairs.append((v, pi, gi))
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_p: set[int] = set()
    used_g: set[int] = set()
    matches: list[tuple[int, int]] = []
    for _, pi, gi in pairs:
        if pi in used_p or gi in used_g:
            continue
        used_p.add(pi)
        used_g.add(gi)
        matches.append((pi, gi))
    matches.sort()
    return matches
