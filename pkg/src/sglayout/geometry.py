"""Boxes, extreme points, octagons, shape descriptors and mask primitives.

Coordinates use an image frame with x to the right and y downward. Masks are
2-D numpy arrays indexed ``mask[y, x]``. Pixel-frame extreme points and the
boxes derived from them use inclusive pixel indices, so a 10x10 square at the
origin has the box (0, 0, 9, 9).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .errors import DegenerateGeometry, EmptyMask, ShapeMismatch

Frame = Literal["pixel", "normalized"]

# minimum box side after sanitizing inverted predictions, per frame
MIN_SIZE = {"pixel": 1.0, "normalized": 1.0 / 256}


@dataclass(frozen=True)
class BoundingBox:
    left: float
    top: float
    right: float
    bottom: float
    frame: Frame = "pixel"

    def __post_init__(self):
        vals = (self.left, self.top, self.right, self.bottom)
        if not all(math.isfinite(v) for v in vals):
            raise DegenerateGeometry(f"non-finite box {vals}")
        if not (self.left < self.right and self.top < self.bottom):
            raise DegenerateGeometry(f"invalid box {vals}: need left<right and top<bottom")

    @classmethod
    def from_xywh(cls, x, y, w, h, frame: Frame = "pixel") -> "BoundingBox":
        return cls(float(x), float(y), float(x + w), float(y + h), frame)

    @property
    def width(self) -> float:
        return self.right - self.left

    @property
    def height(self) -> float:
        return self.bottom - self.top

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.left + self.right) / 2, (self.top + self.bottom) / 2)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.left, self.top, self.right, self.bottom)

    def intersection_area(self, other: "BoundingBox") -> float:
        w = min(self.right, other.right) - max(self.left, other.left)
        h = min(self.bottom, other.bottom) - max(self.top, other.top)
        if w <= 0 or h <= 0:
            return 0.0
        return w * h

    def contains(self, other: "BoundingBox") -> bool:
        """True if ``other`` lies inside this box (borders may touch)."""
        return (self.left <= other.left and other.right <= self.right
                and self.top <= other.top and other.bottom <= self.bottom)

    def scaled(self, sx: float, sy: float, frame: Frame | None = None) -> "BoundingBox":
        return BoundingBox(self.left * sx, self.top * sy, self.right * sx, self.bottom * sy,
                           frame or self.frame)

    def normalized(self, width: float, height: float) -> "BoundingBox":
        return self.scaled(1.0 / width, 1.0 / height, "normalized")


@dataclass(frozen=True)
class ExtremePoints:
    """Leftmost, topmost, rightmost, bottommost points plus the center."""

    left: tuple[float, float]
    top: tuple[float, float]
    right: tuple[float, float]
    bottom: tuple[float, float]
    center: tuple[float, float]
    frame: Frame = "pixel"

    def as_array(self) -> np.ndarray:
        return np.array([*self.left, *self.top, *self.right, *self.bottom, *self.center],
                        dtype=np.float64)

    @classmethod
    def from_array(cls, values, frame: Frame = "normalized") -> "ExtremePoints":
        v = [float(x) for x in np.asarray(values, dtype=np.float64).reshape(10)]
        return cls((v[0], v[1]), (v[2], v[3]), (v[4], v[5]), (v[6], v[7]), (v[8], v[9]), frame)

    def is_consistent(self) -> bool:
        """Ordering invariants that hold for extreme points of a real shape."""
        return (self.left[0] <= self.center[0] <= self.right[0]
                and self.top[1] <= self.center[1] <= self.bottom[1]
                and self.left[0] <= self.right[0]
                and self.top[1] <= self.bottom[1])

    def scaled(self, sx: float, sy: float, frame: Frame | None = None) -> "ExtremePoints":
        pts = self.as_array().reshape(5, 2) * np.array([sx, sy])
        return ExtremePoints.from_array(pts.ravel(), frame or self.frame)


def _lower_median(values: np.ndarray) -> float:
    return float(values[(len(values) - 1) // 2])


def extract_extreme_points(mask: np.ndarray) -> ExtremePoints:
    """Extreme points of a binary mask in pixel coordinates.

    Each point is a set pixel reaching the extremum in its direction. When
    several pixels tie (e.g. a flat edge) the one at the lower median of the
    other coordinate is chosen. The center is the center of the tight box.
    """
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2:
        raise ShapeMismatch(f"mask must be 2-D, got shape {m.shape}")
    cols = np.flatnonzero(m.any(axis=0))
    rows = np.flatnonzero(m.any(axis=1))
    if cols.size == 0:
        raise EmptyMask("mask has no set pixels")
    x0, x1 = int(cols[0]), int(cols[-1])
    y0, y1 = int(rows[0]), int(rows[-1])
    left = (float(x0), _lower_median(np.flatnonzero(m[:, x0])))
    right = (float(x1), _lower_median(np.flatnonzero(m[:, x1])))
    top = (_lower_median(np.flatnonzero(m[y0, :])), float(y0))
    bottom = (_lower_median(np.flatnonzero(m[y1, :])), float(y1))
    center = ((x0 + x1) / 2, (y0 + y1) / 2)
    return ExtremePoints(left, top, right, bottom, center, "pixel")


def pixel_points_to_unit(ep: ExtremePoints, width: int, height: int) -> ExtremePoints:
    """Convert extracted pixel-index points to the normalized image frame.

    Extreme coordinates map to the outer edge of the extreme pixel and the
    other coordinate to the pixel center, so the derived box is the mask's
    pixel-edge box divided by the image size.
    """
    if ep.frame != "pixel":
        raise ValueError("expected pixel-frame extreme points")
    sx, sy = 1.0 / width, 1.0 / height
    (lx, ly), (tx, ty), (rx, ry), (bx, by), (cx, cy) = (ep.left, ep.top, ep.right, ep.bottom,
                                                          ep.center)
    return ExtremePoints(
        (lx * sx, (ly + 0.5) * sy),
        ((tx + 0.5) * sx, ty * sy),
        ((rx + 1) * sx, (ry + 0.5) * sy),
        ((bx + 0.5) * sx, (by + 1) * sy),
        ((cx + 0.5) * sx, (cy + 0.5) * sy),
        "normalized",
    )


def mask_edge_box(mask: np.ndarray) -> BoundingBox:
    """Pixel-edge box of the set pixels: (x0, y0, x1 + 1, y1 + 1)."""
    x0, y0, x1, y1 = tight_bbox(mask)
    return BoundingBox(float(x0), float(y0), float(x1 + 1), float(y1 + 1))


def trivial_extreme_points(bbox: BoundingBox) -> ExtremePoints:
    """Edge midpoints and center of a box, used when only the box is known."""
    cx, cy = bbox.center
    return ExtremePoints((bbox.left, cy), (cx, bbox.top), (bbox.right, cy), (cx, bbox.bottom),
                         (cx, cy), bbox.frame)


def bbox_from_extreme_points(ep: ExtremePoints) -> tuple[BoundingBox, bool]:
    """Box spanned by the four extreme points.

    Predicted points can be inverted or collapsed; those are swapped and padded
    to the frame's minimum size. Returns ``(box, sanitized)``.
    """
    pad = MIN_SIZE[ep.frame]
    l, r = ep.left[0], ep.right[0]
    t, b = ep.top[1], ep.bottom[1]
    sanitized = False
    if l >= r:
        l, r = min(l, r), max(l, r)
        if r - l < pad:
            r = l + pad
        sanitized = True
    if t >= b:
        t, b = min(t, b), max(t, b)
        if b - t < pad:
            b = t + pad
        sanitized = True
    return BoundingBox(l, t, r, b, ep.frame), sanitized


def tight_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Inclusive pixel bounds (x0, y0, x1, y1) of the set pixels."""
    m = np.asarray(mask).astype(bool)
    cols = np.flatnonzero(m.any(axis=0))
    rows = np.flatnonzero(m.any(axis=1))
    if cols.size == 0:
        raise EmptyMask("mask has no set pixels")
    return int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1])


def octagon_from_extreme_points(ep: ExtremePoints) -> np.ndarray:
    """Octagon through the extreme points, as an (8, 2) vertex array.

    Every extreme point contributes two vertices on its side of the box,
    offset by a quarter of that side's length in both directions and clipped
    to the box corners. Vertices run clockwise on screen, starting at the top
    edge.
    """
    box, _ = bbox_from_extreme_points(ep)
    l, t, r, b = box.as_tuple()
    qw, qh = box.width / 4, box.height / 4

    def cx(x):
        return min(max(x, l), r)

    def cy(y):
        return min(max(y, t), b)

    tx, ry, bx, ly = ep.top[0], ep.right[1], ep.bottom[0], ep.left[1]
    verts = [
        (cx(tx - qw), t), (cx(tx + qw), t),
        (r, cy(ry - qh)), (r, cy(ry + qh)),
        (cx(bx + qw), b), (cx(bx - qw), b),
        (l, cy(ly + qh)), (l, cy(ly - qh)),
    ]
    return np.array(verts, dtype=np.float64)


def polygon_signed_area(vertices) -> float:
    """Shoelace area. Positive for clockwise-on-screen order in the y-down frame."""
    v = np.asarray(vertices, dtype=np.float64)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def polygon_area(vertices) -> float:
    return abs(polygon_signed_area(vertices))


def normalize_descriptor(ep: ExtremePoints) -> np.ndarray:
    """Map the five points into the unit square of their own box (10 values).

    Points that fall outside the box (possible for predicted points) are
    clipped, so every component lies in [0, 1].
    """
    l, t, r, b = ep.left[0], ep.top[1], ep.right[0], ep.bottom[1]
    if not (r > l and b > t):
        raise DegenerateGeometry(f"extreme points span a degenerate box ({l}, {t}, {r}, {b})")
    pts = ep.as_array().reshape(5, 2)
    out = np.empty_like(pts)
    out[:, 0] = (pts[:, 0] - l) / (r - l)
    out[:, 1] = (pts[:, 1] - t) / (b - t)
    return np.clip(out.ravel(), 0.0, 1.0)


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    inter = a.intersection_area(b)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def rasterize_polygon(vertices: Sequence, width: int, height: int) -> np.ndarray:
    """Binary mask of pixels whose centers fall inside the polygon (even-odd rule)."""
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 2)
    if len(v) < 3:
        raise DegenerateGeometry(f"polygon needs at least 3 vertices, got {len(v)}")
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    inside = np.zeros((height, width), dtype=bool)
    for (x1, y1), (x2, y2) in zip(v, np.roll(v, -1, axis=0)):
        crosses = (y1 > ys) != (y2 > ys)
        if not crosses.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = x1 + (ys - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses[:, None] & (xs[None, :] < x_at[:, None])
    return inside


def resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize sampling source pixels at destination pixel centers."""
    m = np.asarray(mask)
    h, w = m.shape
    ri = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    ci = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return m[ri[:, None], ci[None, :]]


def canonical_mask(mask: np.ndarray, size: int) -> np.ndarray:
    """Crop a binary mask to its tight box and resize to ``size x size``."""
    x0, y0, x1, y1 = tight_bbox(mask)
    crop = np.asarray(mask).astype(np.float64)[y0:y1 + 1, x0:x1 + 1]
    return resize_nearest(crop, size, size) >= 0.5
