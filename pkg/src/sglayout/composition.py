"""Scene layout composition and layout rendering."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ParseError, ShapeMismatch
from .geometry import BoundingBox, octagon_from_extreme_points
from .metrics import LayoutPrediction

BACKGROUND = (0, 0, 0)
OUTLINE = (255, 255, 255)
_PPM_HEADER = re.compile(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s")

# 23 retrieval categories first, then extra colors for stuff and anything else
PALETTE = [
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
    (0, 128, 128), (220, 190, 255), (170, 110, 40), (255, 250, 200), (128, 0, 0),
    (170, 255, 195), (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128),
    (255, 99, 71), (46, 139, 87), (106, 90, 205),
    (135, 206, 235), (124, 252, 0), (34, 100, 34), (210, 180, 140), (188, 143, 143),
    (176, 196, 222), (95, 158, 160), (218, 112, 214), (189, 183, 107),
]


@dataclass
class SceneLayout:
    tensor: np.ndarray            # (D, H, W)
    boxes: list[BoundingBox]


def _bilinear_axis(coord: np.ndarray, k: int):
    c = np.clip(coord, 0.0, k - 1)
    lo = np.floor(c).astype(np.int64)
    hi = np.minimum(lo + 1, k - 1)
    return lo, hi, c - lo


def warp_mask(mask: np.ndarray, bbox: BoundingBox, height: int, width: int) -> np.ndarray:
    """Bilinearly resample a K x K mask into ``bbox`` on an H x W canvas.

    Canvas pixels are sampled at their centers; pixels whose center is
    outside the half-open box are zero. Samples beyond the mask's outermost
    pixel centers clamp to the edge.
    """
    m = np.asarray(mask, dtype=np.float64)
    kh, kw = m.shape
    out = np.zeros((height, width))
    px = (np.arange(width) + 0.5) / width
    py = (np.arange(height) + 0.5) / height
    cols = np.flatnonzero((px >= bbox.left) & (px < bbox.right))
    rows = np.flatnonzero((py >= bbox.top) & (py < bbox.bottom))
    if cols.size == 0 or rows.size == 0:
        return out
    u = (px[cols] - bbox.left) / bbox.width * kw - 0.5
    v = (py[rows] - bbox.top) / bbox.height * kh - 0.5
    x0, x1, fx = _bilinear_axis(u, kw)
    y0, y1, fy = _bilinear_axis(v, kh)
    top = m[y0][:, x0] * (1 - fx) + m[y0][:, x1] * fx
    bot = m[y1][:, x0] * (1 - fx) + m[y1][:, x1] * fx
    out[np.ix_(rows, cols)] = top * (1 - fy)[:, None] + bot * fy[:, None]
    return out


def warp_embedding(embedding: np.ndarray, mask: np.ndarray, bbox: BoundingBox,
                   height: int, width: int) -> np.ndarray:
    """Object layout (D, H, W): the embedding broadcast over the mask, placed in ``bbox``.

    Broadcasting a constant vector commutes with bilinear resampling, so the
    mask is warped once and scaled per channel.
    """
    e = np.asarray(embedding, dtype=np.float64).reshape(-1)
    return e[:, None, None] * warp_mask(mask, bbox, height, width)[None]


def compose_scene_layout(layouts: Sequence[np.ndarray]) -> np.ndarray:
    if not layouts:
        raise ShapeMismatch("no object layouts to compose")
    shape = layouts[0].shape
    total = np.zeros(shape)
    for i, lay in enumerate(layouts):
        if lay.shape != shape:
            raise ShapeMismatch(f"layout {i} has shape {lay.shape}, expected {shape}")
        total += lay
    return total


def scene_layout(embeddings: np.ndarray, pred: LayoutPrediction, height: int, width: int) -> SceneLayout:
    layouts = [warp_embedding(e, m, b, height, width)
               for e, m, b in zip(embeddings, pred.masks, pred.boxes)]
    return SceneLayout(compose_scene_layout(layouts), list(pred.boxes))


def _draw_polyline(img: np.ndarray, pts: np.ndarray, color):
    h, w = img.shape[:2]
    for (xa, ya), (xb, yb) in zip(pts, np.roll(pts, -1, axis=0)):
        n = int(max(abs(xb - xa), abs(yb - ya)) * 2) + 2
        xs = np.rint(np.linspace(xa, xb, n)).astype(np.int64)
        ys = np.rint(np.linspace(ya, yb, n)).astype(np.int64)
        keep = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
        img[ys[keep], xs[keep]] = color


def render_layout(pred: LayoutPrediction, colors: Sequence[tuple[int, int, int]], height: int,
                  width: int, octagons: bool = False, threshold: float = 0.5) -> np.ndarray:
    """RGB image (H, W, 3) coloring each pixel by the object with the largest warped mask value.

    Ties go to the lower object index; pixels where every value is below
    ``threshold`` get the background color.
    """
    img = np.empty((height, width, 3), dtype=np.uint8)
    img[...] = BACKGROUND
    if len(pred.boxes):
        stack = np.stack([warp_mask(m, b, height, width) for m, b in zip(pred.masks, pred.boxes)])
        owner = np.argmax(stack, axis=0)
        fg = stack.max(axis=0) >= threshold
        palette = np.array(colors, dtype=np.uint8)
        img[fg] = palette[owner[fg]]
    if octagons:
        for ep in pred.extreme_points:
            oct_ = octagon_from_extreme_points(ep) * np.array([width, height]) - 0.5
            _draw_polyline(img, oct_, OUTLINE)
    return img


def category_colors(categories: Sequence[str], vocab) -> list[tuple[int, int, int]]:
    return [PALETTE[vocab.row(c) % len(PALETTE)] for c in categories]


def write_ppm(path, rgb: np.ndarray):
    img = np.asarray(rgb, dtype=np.uint8)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    m = _PPM_HEADER.match(data)
    if m is None:
        raise ParseError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ParseError(f"{path}: only 8-bit PPM supported")
    raw = data[m.end():]
    if len(raw) != w * h * 3:
        raise ParseError(f"{path}: expected {w * h * 3} pixel bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)


def mask_to_ppm(path, mask: np.ndarray):
    write_ppm(path, np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))


def mask_from_ppm(path) -> np.ndarray:
    return read_ppm(path)[:, :, 0] >= 128
