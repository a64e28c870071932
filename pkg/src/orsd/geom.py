"""Exact rotated-box geometry.

Oriented boxes are parameterized as (cx, cy, w, h, theta) with theta in
radians, canonicalized to [-pi/2, pi/2) on construction (a rectangle is
invariant under rotation by pi, so angles are reduced modulo pi; no
width/height swap is performed). All coordinates are image pixels with
y growing downward; "counter-clockwise" below means positive shoelace
area on the raw (x, y) values.

Rotated IoU is computed exactly by Sutherland-Hodgman clipping of the two
corner quadrilaterals followed by the shoelace area formula. Everything in
this module is a pure function on immutable values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBoxError

_MIN_SIDE = 1e-9

# Detection provenance tags.
SOURCE_MODEL = "model-prediction"
SOURCE_GROUND_TRUTH = "ground-truth"
SOURCE_PSEUDO_LABEL = "pseudo-label"
_SOURCES = (SOURCE_MODEL, SOURCE_GROUND_TRUTH, SOURCE_PSEUDO_LABEL)


def normalize_angle(theta: float) -> float:
    """Reduce an angle modulo pi into [-pi/2, pi/2)."""
    t = math.fmod(theta + math.pi / 2.0, math.pi)
    if t < 0.0:
        t += math.pi
    return t - math.pi / 2.0


@dataclass(frozen=True)
class OrientedBox:
    """Rotated rectangle: center, side lengths, rotation angle.

    Raises DegenerateBoxError if either side is <= 1e-9; theta is
    normalized into [-pi/2, pi/2) by the constructor.
    """

    cx: float
    cy: float
    w: float
    h: float
    theta: float

    def __post_init__(self) -> None:
        if not (self.w > _MIN_SIDE and self.h > _MIN_SIDE):
            raise DegenerateBoxError(
                f"oriented box sides must exceed {_MIN_SIDE}, got w={self.w}, h={self.h}"
            )
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))
        for name in ("cx", "cy", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class HorizontalBox:
    """Axis-aligned box (xmin, ymin, xmax, ymax) with xmin <= xmax, ymin <= ymax."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self) -> None:
        if self.xmin > self.xmax or self.ymin > self.ymax:
            raise ValueError(
                f"horizontal box must satisfy xmin <= xmax and ymin <= ymax, got {self}"
            )
        for name in ("xmin", "ymin", "xmax", "ymax"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def area(self) -> float:
        return self.width * self.height


def obb_corners(b: OrientedBox) -> list[tuple[float, float]]:
    """Four corners of an oriented box, counter-clockwise, centroid at (cx, cy)."""
    c = math.cos(b.theta)
    s = math.sin(b.theta)
    hw = b.w / 2.0
    hh = b.h / 2.0
    # Local-frame order (+,+), (-,+), (-,-), (+,-) gives positive shoelace area.
    out = []
    for dx, dy in ((hw, hh), (-hw, hh), (-hw, -hh), (hw, -hh)):
        out.append((b.cx + c * dx - s * dy, b.cy + s * dx + c * dy))
    return out


def obb_to_hbb(b: OrientedBox) -> HorizontalBox:
    """Minimum enclosing axis-aligned box of an oriented box."""
    pts = obb_corners(b)
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    return HorizontalBox(min(xs), min(ys), max(xs), max(ys))


@dataclass(frozen=True)
class Detection:
    """A scored box with category and provenance.

    At least one of ``box`` (oriented) and ``hbox`` (horizontal) must be
    present. When ``box`` is given and ``hbox`` is not, ``hbox`` is derived
    as the minimum enclosing horizontal box; when both are given they must
    agree to 1e-6 px.
    """

    category: str
    score: float
    box: OrientedBox | None = None
    hbox: HorizontalBox | None = None
    source: str = SOURCE_MODEL

    def __post_init__(self) -> None:
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        if self.source not in _SOURCES:
            raise ValueError(f"unknown source tag {self.source!r}")
        if self.box is None and self.hbox is None:
            raise ValueError("detection needs an oriented box, a horizontal box, or both")
        if self.box is not None:
            derived = obb_to_hbb(self.box)
            if self.hbox is None:
                object.__setattr__(self, "hbox", derived)
            else:
                err = max(
                    abs(self.hbox.xmin - derived.xmin),
                    abs(self.hbox.ymin - derived.ymin),
                    abs(self.hbox.xmax - derived.xmax),
                    abs(self.hbox.ymax - derived.ymax),
                )
                if err > 1e-6:
                    raise ValueError(
                        "hbox disagrees with the minimum enclosing box of box "
                        f"by {err:.3g} px"
                    )
        object.__setattr__(self, "score", float(self.score))


def _shoelace(points: list[tuple[float, float]]) -> float:
    """Signed polygon area (positive for counter-clockwise order)."""
    n = len(points)
    if n < 3:
        return 0.0
    acc = 0.0
    x0, y0 = points[-1]
    for x1, y1 in points:
        acc += x0 * y1 - x1 * y0
        x0, y0 = x1, y1
    return acc / 2.0


def _clip_convex(subject: list[tuple[float, float]], clip: list[tuple[float, float]]) -> list[tuple[float, float]]:
    """Sutherland-Hodgman: clip a polygon by a convex CCW polygon."""
    output = subject
    n = len(clip)
    cx0, cy0 = clip[-1]
    for k in range(n):
        cx1, cy1 = clip[k]
        if not output:
            break
        ex = cx1 - cx0
        ey = cy1 - cy0
        inp = output
        output = []
        sx, sy = inp[-1]
        # CCW clip polygon: the interior lies where (edge) x (point - start) >= 0.
        s_in = ex * (sy - cy0) - ey * (sx - cx0) >= 0.0
        for px, py in inp:
            p_in = ex * (py - cy0) - ey * (px - cx0) >= 0.0
            if p_in:
                if not s_in:
                    output.append(_segment_line_intersection(sx, sy, px, py, cx0, cy0, cx1, cy1))
                output.append((px, py))
            elif s_in:
                output.append(_segment_line_intersection(sx, sy, px, py, cx0, cy0, cx1, cy1))
            sx, sy = px, py
            s_in = p_in
        cx0, cy0 = cx1, cy1
    return output


def _segment_line_intersection(
    sx: float, sy: float, px: float, py: float,
    ax: float, ay: float, bx: float, by: float,
) -> tuple[float, float]:
    """Intersection of segment s-p with the infinite line a-b."""
    dx = px - sx
    dy = py - sy
    ex = bx - ax
    ey = by - ay
    den = dx * ey - dy * ex
    if den == 0.0:  # parallel within fp; endpoints already handled by inside tests
        return (px, py)
    t = ((ax - sx) * ey - (ay - sy) * ex) / den
    return (sx + t * dx, sy + t * dy)


def intersection_area(a: OrientedBox, b: OrientedBox) -> float:
    """Exact overlap area of two oriented boxes via convex clipping."""
    inter = _clip_convex(obb_corners(a), obb_corners(b))
    return abs(_shoelace(inter))


def rotated_iou(a: OrientedBox, b: OrientedBox) -> float:
    """Intersection over union of two oriented boxes; symmetric, in [0, 1]."""
    area_a = a.area
    area_b = b.area
    if area_a <= 0.0 or area_b <= 0.0:
        raise DegenerateBoxError("rotated_iou requires boxes with positive area")
    inter = intersection_area(a, b)
    union = area_a + area_b - inter
    if inter >= union:  # identical boxes: avoid 1.0 +/- one ulp
        return 1.0
    return inter / union


def hbb_iou(a: HorizontalBox, b: HorizontalBox) -> float:
    """Axis-aligned IoU; raises on zero-area input."""
    if a.area <= 0.0 or b.area <= 0.0:
        raise DegenerateBoxError("hbb_iou requires boxes with positive area")
    iw = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    ih = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if inter >= union:
        return 1.0
    return inter / union


def contains_point(b: OrientedBox, x: float, y: float) -> bool:
    """Whether (x, y) lies inside the oriented box (boundary inclusive)."""
    c = math.cos(b.theta)
    s = math.sin(b.theta)
    dx = x - b.cx
    dy = y - b.cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return abs(u) <= b.w / 2.0 and abs(v) <= b.h / 2.0


def _nms_order(dets: list[Detection]) -> list[int]:
    # Documented total order: score desc, then category asc, then input index asc.
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].category, i))


def class_agnostic_nms(
    dets: list[Detection],
    iou_threshold: float,
    mode: str = "obb",
) -> list[Detection]:
    """Greedy score-descending suppression that ignores categories.

    A candidate is suppressed when its IoU with an already-kept detection
    exceeds ``iou_threshold``. Ties in score are broken by category id then
    input index, so the result is deterministic. ``mode`` selects oriented
    (``"obb"``) or horizontal (``"hbb"``) IoU.
    """
    if mode not in ("obb", "hbb"):
        raise ValueError(f"mode must be 'obb' or 'hbb', got {mode!r}")
    if not (0.0 <= iou_threshold <= 1.0):
        raise ValueError(f"iou_threshold must lie in [0, 1], got {iou_threshold}")
    n = len(dets)
    if n == 0:
        return []
    if mode == "obb" and any(d.box is None for d in dets):
        raise ValueError("obb-mode NMS requires every detection to carry an oriented box")

    order = _nms_order(dets)
    # Enclosing-box coordinates in `order` space; a pair whose enclosing
    # boxes do not overlap has exact IoU 0, so it can be skipped cheaply.
    hb = np.array(
        [
            (dets[i].hbox.xmin, dets[i].hbox.ymin, dets[i].hbox.xmax, dets[i].hbox.ymax)
            for i in order
        ],
        dtype=np.float64,
    )
    alive = np.ones(n, dtype=bool)
    kept: list[Detection] = []
    if mode == "obb":
        corners = [obb_corners(dets[i].box) for i in order]
        areas = [dets[i].box.area for i in order]
    for pos in range(n):
        if not alive[pos]:
            continue
        kept.append(dets[order[pos]])
        rest = np.nonzero(alive[pos + 1 :])[0] + pos + 1
        if rest.size == 0:
            continue
        cand = rest[
            (hb[rest, 0] < hb[pos, 2])
            & (hb[rest, 2] > hb[pos, 0])
            & (hb[rest, 1] < hb[pos, 3])
            & (hb[rest, 3] > hb[pos, 1])
        ]
        for j in cand:
            if mode == "obb":
                inter = abs(_shoelace(_clip_convex(corners[j], corners[pos])))
                union = areas[j] + areas[pos] - inter
                iou = 1.0 if inter >= union else inter / union
            else:
                iou = hbb_iou(dets[order[j]].hbox, dets[order[pos]].hbox)
            if iou > iou_threshold:
                alive[j] = False
    return kept


def prompt_crop_window(
    b: HorizontalBox, factor: float, img_w: int, img_h: int
) -> HorizontalBox:
    """Scale a box about its center then clamp it to the image bounds.

    Emits only the crop window; pixel resampling to the downstream target
    size is outside this library.
    """
    if factor <= 0.0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    cx = (b.xmin + b.xmax) / 2.0
    cy = (b.ymin + b.ymax) / 2.0
    hw = b.width * factor / 2.0
    hh = b.height * factor / 2.0
    return HorizontalBox(
        min(max(cx - hw, 0.0), float(img_w)),
        min(max(cy - hh, 0.0), float(img_h)),
        max(min(cx + hw, float(img_w)), 0.0),
        max(min(cy + hh, float(img_h)), 0.0),
    )
