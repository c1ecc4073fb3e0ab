"""Boxes, IoU, token-box division, and differentiable region pooling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor
from .errors import ContractError


@dataclass(frozen=True)
class AABox:
    """Axis-aligned box in image pixels."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ContractError(f"degenerate box: {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def clamped(self, w_img: float, h_img: float) -> "AABox":
        return AABox(
            max(0.0, min(self.x_min, w_img - 1e-6)),
            max(0.0, min(self.y_min, h_img - 1e-6)),
            min(w_img, max(self.x_max, 1e-6)),
            min(h_img, max(self.y_max, 1e-6)),
        )

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


def _segments_properly_cross(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(p3, p4, p1)
    d2 = orient(p3, p4, p2)
    d3 = orient(p1, p2, p3)
    d4 = orient(p1, p2, p4)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


class Quad:
    """Four (x, y) vertices in pixels, clockwise from top-left."""

    __slots__ = ("points",)

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64).reshape(4, 2)
        # shoelace sign: with image y pointing down, clockwise traversal
        # yields a positive value
        x, y = pts[:, 0], pts[:, 1]
        area2 = float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))
        if area2 <= 0:
            raise ContractError("quad must be clockwise with positive area")
        if _segments_properly_cross(pts[0], pts[1], pts[2], pts[3]) or (
            _segments_properly_cross(pts[1], pts[2], pts[3], pts[0])
        ):
            raise ContractError("self-intersecting quad")
        self.points = pts

    def as_list(self) -> list[float]:
        return [float(v) for v in self.points.reshape(-1)]


def enclose(q: Quad) -> AABox:
    """Minimal axis-aligned bounding box of a quad."""
    xs, ys = q.points[:, 0], q.points[:, 1]
    return AABox(float(xs.min()), float(ys.min()), float(xs.max()), float(ys.max()))


def iou(a: AABox, b: AABox) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def split_tokens(box: AABox, n: int) -> list[AABox]:
    """Divide a box into n equal parts along its longer side.

    Boundary coordinates are shared exactly between neighbours, so the
    pieces tile the parent with zero-area overlaps.
    """
    if n < 1:
        raise ContractError(f"split_tokens needs n >= 1, got {n}")
    horizontal = box.width >= box.height
    lo, hi = (box.x_min, box.x_max) if horizontal else (box.y_min, box.y_max)
    edges = [lo + (hi - lo) * i / n for i in range(n)] + [hi]
    if horizontal:
        return [AABox(edges[i], box.y_min, edges[i + 1], box.y_max) for i in range(n)]
    return [AABox(box.x_min, edges[i], box.x_max, edges[i + 1]) for i in range(n)]


@dataclass
class FeatureMap:
    """A [C, H', W'] feature tensor plus its input-pixels-per-cell stride."""

    tensor: Tensor
    stride: float

    @property
    def height(self) -> int:
        return self.tensor.shape[1]

    @property
    def width(self) -> int:
        return self.tensor.shape[2]


def _sample_axis(lo: float, hi: float, bins: int, extent: int):
    """Per-bin 2-point sample positions with bilinear corner indices/weights."""
    step = (hi - lo) / bins
    offsets = np.arange(bins)[:, None] + np.array([0.25, 0.75])[None, :]
    coords = (lo + offsets * step).reshape(-1) - 0.5  # pixel-center convention
    coords = np.clip(coords, 0.0, extent - 1.0)
    i_lo = np.floor(coords).astype(np.intp)
    i_lo = np.minimum(i_lo, extent - 1)
    i_hi = np.minimum(i_lo + 1, extent - 1)
    w_hi = coords - i_lo
    return i_lo, i_hi, w_hi


def region_pool(fmap: FeatureMap, box: AABox, out_h: int, out_w: int) -> Tensor:
    """Bilinear align-style pooling of a pixel-space box onto an out_h x out_w grid.

    Each output cell averages a 2x2 grid of bilinear samples. Differentiable
    with respect to the feature tensor (boxes are plain coordinates).
    """
    x = fmap.tensor
    c, fh, fw = x.shape
    img_w, img_h = fw * fmap.stride, fh * fmap.stride
    if (
        box.x_max <= 0
        or box.y_max <= 0
        or box.x_min >= img_w
        or box.y_min >= img_h
    ):
        raise ContractError(f"box {box} does not intersect the feature map extent")
    x0, x1 = box.x_min / fmap.stride, box.x_max / fmap.stride
    y0, y1 = box.y_min / fmap.stride, box.y_max / fmap.stride

    ylo, yhi, wy = _sample_axis(y0, y1, out_h, fh)
    xlo, xhi, wx = _sample_axis(x0, x1, out_w, fw)

    corners = (
        (ylo, xlo, (1 - wy)[:, None] * (1 - wx)[None, :]),
        (ylo, xhi, (1 - wy)[:, None] * wx[None, :]),
        (yhi, xlo, wy[:, None] * (1 - wx)[None, :]),
        (yhi, xhi, wy[:, None] * wx[None, :]),
    )
    samples = np.zeros((c, 2 * out_h, 2 * out_w))
    for yi, xi, w in corners:
        samples += x.data[:, yi[:, None], xi[None, :]] * w[None, :, :]
    out = samples.reshape(c, out_h, 2, out_w, 2).mean(axis=(2, 4))

    def backward(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        gs = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
        c_idx = np.arange(c)[:, None, None]
        for yi, xi, w in corners:
            np.add.at(
                x.grad,
                (c_idx, yi[None, :, None], xi[None, None, :]),
                gs * w[None, :, :],
            )

    return Tensor._from_op(out, (x,), backward)
