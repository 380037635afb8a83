"""Oriented-box geometry: polygon clipping, shoelace areas, rotated IoU.

Angle convention: radians, normalized into [-pi/2, pi/2). ``w`` is the edge
aligned with the local x-axis before rotation. All functions are pure and
operate on immutable values.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Tuple

Point = Tuple[float, float]

# On-edge classification tolerance for clipping and vertex merging.
_EPS = 1e-9


def _normalize_angle(angle: float) -> float:
    """Map an angle to the canonical [-pi/2, pi/2) range (period pi)."""
    a = math.fmod(angle + math.pi / 2.0, math.pi)
    if a < 0.0:
        a += math.pi
    return a - math.pi / 2.0


@dataclass(frozen=True)
class OrientedBox:
    """Rotated rectangle: center (cx, cy), size (w, h), rotation angle."""

    cx: float
    cy: float
    w: float
    h: float
    angle: float

    def __post_init__(self):
        if not (self.w > 0.0 and self.h > 0.0):
            raise ValueError(f"box size must be positive, got w={self.w}, h={self.h}")
        object.__setattr__(self, "angle", _normalize_angle(self.angle))

    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> Tuple[Point, Point, Point, Point]:
        """Four corners in CCW order (y-up convention)."""
        c, s = math.cos(self.angle), math.sin(self.angle)
        hw, hh = self.w / 2.0, self.h / 2.0
        out = []
        for dx, dy in ((-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)):
            out.append((self.cx + dx * c - dy * s, self.cy + dx * s + dy * c))
        return tuple(out)


@dataclass(frozen=True)
class AxisAlignedBox:
    """Horizontal box given by opposite corners."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (self.xmin < self.xmax and self.ymin < self.ymax):
            raise ValueError(
                f"degenerate box [{self.xmin},{self.ymin},{self.xmax},{self.ymax}]"
            )

    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)


@dataclass(frozen=True)
class ConvexPolygon:
    """Convex polygon with CCW vertices; may be empty (no area)."""

    vertices: Tuple[Point, ...] = field(default=())

    @staticmethod
    def from_points(points: Sequence[Point]) -> "ConvexPolygon":
        """Build a polygon from points, merging degenerate vertices and
        orienting CCW. Collinear runs are collapsed."""
        pts = _merge_vertices(list(points))
        if len(pts) >= 3 and _signed_area(pts) < 0.0:
            pts.reverse()
            pts = _merge_vertices(pts)
        return ConvexPolygon(tuple(pts))

    def is_empty(self) -> bool:
        return len(self.vertices) < 3


def _signed_area(pts: Sequence[Point]) -> float:
    n = len(pts)
    acc = 0.0
    for i in range(n):
        x0, y0 = pts[i]
        x1, y1 = pts[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return acc / 2.0


def _merge_vertices(pts: list) -> list:
    """Drop consecutive duplicates and collinear midpoints."""
    if not pts:
        return []
    # consecutive duplicates (closed ring)
    out = []
    for p in pts:
        if not out or math.hypot(p[0] - out[-1][0], p[1] - out[-1][1]) > _EPS:
            out.append(p)
    if len(out) > 1 and math.hypot(out[0][0] - out[-1][0], out[0][1] - out[-1][1]) <= _EPS:
        out.pop()
    if len(out) < 3:
        return out
    # collinear midpoints
    kept = []
    n = len(out)
    for i in range(n):
        a, b, c = out[i - 1], out[i], out[(i + 1) % n]
        cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(cross) > _EPS:
            kept.append(b)
    return kept if len(kept) >= 3 else out


def obb_to_polygon(box: OrientedBox) -> ConvexPolygon:
    """Four CCW corners of the box as a polygon."""
    return ConvexPolygon(box.corners())


def polygon_area(p: ConvexPolygon) -> float:
    """Non-negative shoelace area; 0 for empty or degenerate polygons."""
    if len(p.vertices) < 3:
        return 0.0
    return abs(_signed_area(p.vertices))


def polygon_intersection(a: ConvexPolygon, b: ConvexPolygon) -> ConvexPolygon:
    """Intersection of two convex polygons (Sutherland-Hodgman clipping)."""
    if a.is_empty() or b.is_empty():
        return ConvexPolygon()
    clip = list(b.vertices)
    if _signed_area(clip) < 0.0:
        clip.reverse()
    output = list(a.vertices)
    if _signed_area(output) < 0.0:
        output.reverse()

    for i in range(len(clip)):
        if not output:
            break
        cp1 = clip[i - 1]
        cp2 = clip[i]
        ex, ey = cp2[0] - cp1[0], cp2[1] - cp1[1]

        def side(p):
            return ex * (p[1] - cp1[1]) - ey * (p[0] - cp1[0])

        input_list = output
        output = []
        s = input_list[-1]
        s_side = side(s)
        for e in input_list:
            e_side = side(e)
            if e_side >= -_EPS:
                if s_side < -_EPS:
                    output.append(_segment_line_intersection(s, e, cp1, cp2))
                output.append(e)
            elif s_side >= -_EPS:
                output.append(_segment_line_intersection(s, e, cp1, cp2))
            s, s_side = e, e_side
    return ConvexPolygon.from_points(output)


def _segment_line_intersection(s: Point, e: Point, cp1: Point, cp2: Point) -> Point:
    dcx, dcy = cp1[0] - cp2[0], cp1[1] - cp2[1]
    dpx, dpy = s[0] - e[0], s[1] - e[1]
    n1 = cp1[0] * cp2[1] - cp1[1] * cp2[0]
    n2 = s[0] * e[1] - s[1] * e[0]
    denom = dcx * dpy - dcy * dpx
    if abs(denom) < 1e-300:
        return e
    return ((n1 * dpx - n2 * dcx) / denom, (n1 * dpy - n2 * dcy) / denom)


def rotated_iou(a: OrientedBox, b: OrientedBox) -> float:
    """Exact IoU of two rotated rectangles via convex polygon clipping.

    Measure-zero contacts (shared edge or corner) report 0.
    """
    pa, pb = obb_to_polygon(a), obb_to_polygon(b)
    inter = polygon_area(polygon_intersection(pa, pb))
    if inter <= 0.0:
        return 0.0
    union = a.area() + b.area() - inter
    if union <= 0.0:
        return 1.0
    return min(max(inter / union, 0.0), 1.0)


def aabb_iou(a: AxisAlignedBox, b: AxisAlignedBox) -> float:
    """IoU of two axis-aligned boxes (closed form)."""
    iw = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    ih = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area() + b.area() - inter
    return min(max(inter / union, 0.0), 1.0)


def obb_to_hbb(box: OrientedBox) -> AxisAlignedBox:
    """Minimal axis-aligned envelope of the rotated box."""
    xs = [p[0] for p in box.corners()]
    ys = [p[1] for p in box.corners()]
    return AxisAlignedBox(min(xs), min(ys), max(xs), max(ys))


def quad_to_obb(corners: Sequence[Point]) -> OrientedBox:
    """Minimum-area enclosing rotated rectangle of a quadrilateral.

    Rotating calipers over the convex hull of the four corners. For an
    exact rectangle this reproduces it (up to angle normalization).
    """
    if len(corners) != 4:
        raise ValueError(f"expected 4 corner points, got {len(corners)}")
    hull = _convex_hull([(float(x), float(y)) for x, y in corners])
    if len(hull) < 3 or abs(_signed_area(hull)) < 1e-12:
        raise ValueError("degenerate quadrilateral: corners are collinear")

    best = None
    n = len(hull)
    for i in range(n):
        x0, y0 = hull[i]
        x1, y1 = hull[(i + 1) % n]
        theta = math.atan2(y1 - y0, x1 - x0)
        c, s = math.cos(theta), math.sin(theta)
        # project hull points onto the edge-aligned frame
        us = [px * c + py * s for px, py in hull]
        vs = [-px * s + py * c for px, py in hull]
        umin, umax = min(us), max(us)
        vmin, vmax = min(vs), max(vs)
        area = (umax - umin) * (vmax - vmin)
        if best is None or area < best[0]:
            best = (area, theta, umin, umax, vmin, vmax)

    _, theta, umin, umax, vmin, vmax = best
    c, s = math.cos(theta), math.sin(theta)
    uc, vc = (umin + umax) / 2.0, (vmin + vmax) / 2.0
    cx = uc * c - vc * s
    cy = uc * s + vc * c
    w, h = umax - umin, vmax - vmin
    # the constructor folds theta into [-pi/2, pi/2); the fold has period pi,
    # which maps the rectangle onto itself with w/h unchanged
    return OrientedBox(cx, cy, w, h, theta)


def _convex_hull(points: list) -> list:
    """Andrew's monotone chain; returns CCW hull without repeated endpoint."""
    pts = sorted(set(points))
    if len(pts) <= 2:
        return pts

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2:
                ox, oy = out[-2]
                ax, ay = out[-1]
                if (ax - ox) * (p[1] - oy) - (ay - oy) * (p[0] - ox) <= _EPS:
                    out.pop()
                else:
                    break
            out.append(p)
        return out

    lower = half(pts)
    upper = half(reversed(pts))
    return lower[:-1] + upper[:-1]


def boxes_equivalent(a: OrientedBox, b: OrientedBox, tol: float = 1e-6) -> bool:
    """True if two boxes have the same footprint up to angle normalization
    (i.e. allowing the w/h swap at +-pi/2)."""
    if math.hypot(a.cx - b.cx, a.cy - b.cy) > tol:
        return False
    same = abs(a.w - b.w) <= tol and abs(a.h - b.h) <= tol
    swapped = abs(a.w - b.h) <= tol and abs(a.h - b.w) <= tol
    if not (same or swapped):
        return False
    da = abs(_normalize_angle(a.angle - b.angle))
    if same and (da <= tol or abs(da - math.pi) <= tol):
        return True
    if swapped and abs(abs(_normalize_angle(a.angle - b.angle)) - math.pi / 2.0) <= tol:
        return True
    # squares are rotation-ambiguous at multiples of pi/2
    if abs(a.w - a.h) <= tol:
        return abs(da % (math.pi / 2.0)) <= tol or abs(da % (math.pi / 2.0) - math.pi / 2.0) <= tol
    return False
