"""Planar geometry primitives: poses, footprints, overlap tests, contacts.

All lengths are meters, all angles radians.  Shapes are solid: a rectangle
footprint is the filled box, a disk footprint the filled circle.  Overlap
queries treat shared boundaries (zero-area intersection) as non-colliding so
that resting contact between bodies is a legal configuration.

The low-level ``_k_*`` kernels work on plain floats (rectangles given by
center, cos/sin of heading and half-extents).  They exist so the physics
stepper can run them in tight loops without building Pose2 objects; the
public functions wrap the same kernels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

Vec2 = Tuple[float, float]

TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Normalize an angle to the half-open interval (-pi, pi]."""
    w = math.remainder(theta, TWO_PI)
    if w <= -math.pi:
        w += TWO_PI
    return w


def angle_diff(a: float, b: float) -> float:
    """Smallest signed difference a - b, wrapped to (-pi, pi]."""
    return wrap_angle(a - b)


@dataclass(frozen=True)
class Pose2:
    """Planar pose (x, y, theta); theta is stored wrapped to (-pi, pi]."""

    x: float
    y: float
    theta: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.theta)):
            raise ValueError(f"non-finite pose ({self.x}, {self.y}, {self.theta})")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def xy(self) -> Vec2:
        return (self.x, self.y)

    def to_world(self, p: Vec2) -> Vec2:
        """Map a point from this pose's body frame into the world frame."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return (self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1])

    def to_local(self, p: Vec2) -> Vec2:
        """Map a world point into this pose's body frame."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        dx, dy = p[0] - self.x, p[1] - self.y
        return (c * dx + s * dy, -s * dx + c * dy)


@dataclass(frozen=True)
class Footprint:
    """Convex footprint, either an axis-symmetric rectangle or a disk.

    For rectangles, ``width`` is the extent along the body x axis and
    ``height`` the extent along body y.  For disks only ``radius`` is set.
    """

    kind: str  # "rectangle" | "disk"
    width: float = 0.0
    height: float = 0.0
    radius: float = 0.0

    @staticmethod
    def rectangle(width: float, height: float) -> "Footprint":
        if width <= 0.0 or height <= 0.0:
            raise ValueError("rectangle sides must be positive")
        return Footprint("rectangle", width=width, height=height)

    @staticmethod
    def disk(radius: float) -> "Footprint":
        if radius <= 0.0:
            raise ValueError("disk radius must be positive")
        return Footprint("disk", radius=radius)

    @property
    def circumradius(self) -> float:
        """Radius of the smallest origin-centered disk containing the shape."""
        if self.kind == "disk":
            return self.radius
        return 0.5 * math.hypot(self.width, self.height)


# ---------------------------------------------------------------------------
# Scalar kernels.
# ---------------------------------------------------------------------------


def _k_rect_corners(x: float, y: float, c: float, s: float, hw: float, hh: float):
    return (
        (x + c * hw - s * hh, y + s * hw + c * hh),
        (x - c * hw - s * hh, y - s * hw + c * hh),
        (x - c * hw + s * hh, y - s * hw - c * hh),
        (x + c * hw + s * hh, y + s * hw - c * hh),
    )


def _k_closest_on_rect(
    qx: float, qy: float, x: float, y: float, c: float, s: float, hw: float, hh: float
):
    """Closest point of a solid rectangle to q, with signed distance.

    Returns (px, py, dist); dist < 0 when q is inside, in which case the
    point is the nearest boundary point.
    """
    dx, dy = qx - x, qy - y
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    bx = min(max(lx, -hw), hw)
    by = min(max(ly, -hh), hh)
    if bx != lx or by != ly:
        ox, oy = lx - bx, ly - by
        dist = math.hypot(ox, oy)
    else:
        dxs = hw - abs(lx)
        dys = hh - abs(ly)
        if dxs <= dys:
            bx = hw if lx >= 0.0 else -hw
            by = ly
            dist = -dxs
        else:
            by = hh if ly >= 0.0 else -hh
            bx = lx
            dist = -dys
    return (x + c * bx - s * by, y + s * bx + c * by, dist)


def _k_disk_rect(
    cx: float, cy: float, r: float,
    x: float, y: float, c: float, s: float, hw: float, hh: float,
):
    """Contact of a disk pushing into a rectangle, or None if separated.

    Returns (depth, px, py, nx, ny); the normal points from the disk into
    the rectangle.
    """
    px, py, dist = _k_closest_on_rect(cx, cy, x, y, c, s, hw, hh)
    depth = r - dist
    if depth <= 0.0:
        return None
    if dist > 1e-12:
        nx, ny = px - cx, py - cy
        inv = 1.0 / dist
        return (depth, px, py, nx * inv, ny * inv)
    # Center on or inside the rectangle: push inward through the nearest face.
    nx, ny = cx - px, cy - py
    nrm = math.hypot(nx, ny)
    if nrm < 1e-12:
        return (depth, px, py, c, s)
    inv = 1.0 / nrm
    return (depth, px, py, -nx * inv, -ny * inv)


def _k_rect_rect(
    ax: float, ay: float, ac: float, as_: float, ahw: float, ahh: float,
    bx: float, by: float, bc: float, bs: float, bhw: float, bhh: float,
):
    """Contact of rectangle A pushing into rectangle B, or None if separated.

    Minimum-penetration separating-axis test over the four edge normals.
    Returns (depth, px, py, nx, ny); the normal points from A into B.
    """
    ca = _k_rect_corners(ax, ay, ac, as_, ahw, ahh)
    cb = _k_rect_corners(bx, by, bc, bs, bhw, bhh)
    best_depth = math.inf
    best_ax = 1.0
    best_ay = 0.0
    for nx, ny in ((ac, as_), (-as_, ac), (bc, bs), (-bs, bc)):
        lo1 = hi1 = ca[0][0] * nx + ca[0][1] * ny
        for px, py in ca[1:]:
            v = px * nx + py * ny
            if v < lo1:
                lo1 = v
            elif v > hi1:
                hi1 = v
        lo2 = hi2 = cb[0][0] * nx + cb[0][1] * ny
        for px, py in cb[1:]:
            v = px * nx + py * ny
            if v < lo2:
                lo2 = v
            elif v > hi2:
                hi2 = v
        depth = min(hi1, hi2) - max(lo1, lo2)
        if depth <= 0.0:
            return None
        if depth < best_depth:
            best_depth = depth
            best_ax, best_ay = nx, ny
    if (bx - ax) * best_ax + (by - ay) * best_ay < 0.0:
        best_ax, best_ay = -best_ax, -best_ay
    # Contact point: mean of corners caught inside the other body.
    pts_x = 0.0
    pts_y = 0.0
    count = 0
    for px, py in ca:
        if _k_closest_on_rect(px, py, bx, by, bc, bs, bhw, bhh)[2] < 0.0:
            pts_x += px
            pts_y += py
            count += 1
    for px, py in cb:
        if _k_closest_on_rect(px, py, ax, ay, ac, as_, ahw, ahh)[2] < 0.0:
            pts_x += px
            pts_y += py
            count += 1
    if count:
        return (best_depth, pts_x / count, pts_y / count, best_ax, best_ay)
    return (best_depth, 0.5 * (ax + bx), 0.5 * (ay + by), best_ax, best_ay)


def _k_disk_disk(ax: float, ay: float, ar: float, bx: float, by: float, br: float):
    dx, dy = bx - ax, by - ay
    d = math.hypot(dx, dy)
    depth = ar + br - d
    if depth <= 0.0:
        return None
    if d < 1e-12:
        nx, ny = 1.0, 0.0
    else:
        nx, ny = dx / d, dy / d
    k = ar - 0.5 * depth
    return (depth, ax + nx * k, ay + ny * k, nx, ny)


# ---------------------------------------------------------------------------
# Public wrappers.
# ---------------------------------------------------------------------------


def rect_corners(fp: Footprint, pose: Pose2) -> list:
    """World-frame corners of a rectangle footprint, counter-clockwise."""
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    return list(_k_rect_corners(pose.x, pose.y, c, s, 0.5 * fp.width, 0.5 * fp.height))


@dataclass(frozen=True)
class Contact:
    """Penetrating contact between a pushing body (1) and a target body (2).

    ``normal`` points from body 1 into body 2, i.e. along the direction in
    which the target yields; ``depth`` is the positive penetration.
    """

    depth: float
    point: Vec2
    normal: Vec2


def _body_tuple(fp: Footprint, pose: Pose2):
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    if fp.kind == "disk":
        return ("disk", pose.x, pose.y, fp.radius)
    return ("rect", pose.x, pose.y, c, s, 0.5 * fp.width, 0.5 * fp.height)


def _k_contact(b1, b2):
    """Kernel dispatch on body tuples built by _body_tuple."""
    if b1[0] == "disk":
        if b2[0] == "disk":
            return _k_disk_disk(b1[1], b1[2], b1[3], b2[1], b2[2], b2[3])
        return _k_disk_rect(b1[1], b1[2], b1[3], b2[1], b2[2], b2[3], b2[4], b2[5], b2[6])
    if b2[0] == "disk":
        hit = _k_disk_rect(b2[1], b2[2], b2[3], b1[1], b1[2], b1[3], b1[4], b1[5], b1[6])
        if hit is None:
            return None
        depth, px, py, nx, ny = hit
        return (depth, px, py, -nx, -ny)
    return _k_rect_rect(
        b1[1], b1[2], b1[3], b1[4], b1[5], b1[6],
        b2[1], b2[2], b2[3], b2[4], b2[5], b2[6],
    )


def contact(f1: Footprint, p1: Pose2, f2: Footprint, p2: Pose2) -> Optional[Contact]:
    """Contact from pushing body 1 into target body 2, or None if separated."""
    hit = _k_contact(_body_tuple(f1, p1), _body_tuple(f2, p2))
    if hit is None:
        return None
    depth, px, py, nx, ny = hit
    return Contact(depth, (px, py), (nx, ny))


def collides(f1: Footprint, p1: Pose2, f2: Footprint, p2: Pose2) -> bool:
    """True when the two footprints overlap with positive area."""
    return _k_contact(_body_tuple(f1, p1), _body_tuple(f2, p2)) is not None


def centers_gap_lower_bound(f1: Footprint, p1: Pose2, f2: Footprint, p2: Pose2) -> float:
    """Cheap conservative lower bound on the separation distance."""
    d = math.hypot(p2.x - p1.x, p2.y - p1.y)
    return d - f1.circumradius - f2.circumradius


# ---------------------------------------------------------------------------
# Polylines.
# ---------------------------------------------------------------------------


def polyline_length(points: Sequence[Vec2]) -> float:
    """Total arc length of a polyline."""
    total = 0.0
    for a, b in zip(points, points[1:]):
        total += math.hypot(b[0] - a[0], b[1] - a[1])
    return total


def project_to_polyline(q: Vec2, points: Sequence[Vec2]) -> Tuple[float, Vec2]:
    """Project a point onto a polyline.

    Returns (t, p) where p is the closest point on the polyline and t is its
    arc-length parameter in [0, 1].  Ties resolve to the smallest t.  A
    single-point polyline yields t = 0.
    """
    if len(points) == 0:
        raise ValueError("empty polyline")
    if len(points) == 1:
        return 0.0, points[0]
    total = polyline_length(points)
    if total == 0.0:
        return 0.0, points[0]
    best_d2 = math.inf
    best_t = 0.0
    best_p = points[0]
    run = 0.0
    for a, b in zip(points, points[1:]):
        seg = math.hypot(b[0] - a[0], b[1] - a[1])
        if seg == 0.0:
            continue
        ux, uy = (b[0] - a[0]) / seg, (b[1] - a[1]) / seg
        s = (q[0] - a[0]) * ux + (q[1] - a[1]) * uy
        s = min(max(s, 0.0), seg)
        px, py = a[0] + ux * s, a[1] + uy * s
        d2 = (q[0] - px) ** 2 + (q[1] - py) ** 2
        if d2 < best_d2 - 1e-18:
            best_d2 = d2
            best_t = (run + s) / total
            best_p = (px, py)
        run += seg
    return best_t, best_p


def tangent_at(points: Sequence[Vec2], t: float) -> Vec2:
    """Unit tangent of a polyline at arc-length parameter t in [0, 1].

    At vertices the tangent of the following segment is used, so the tangent
    always looks forward along the direction of travel.
    """
    if len(points) < 2:
        raise ValueError("tangent needs at least two points")
    total = polyline_length(points)
    if total == 0.0:
        raise ValueError("degenerate polyline")
    target = min(max(t, 0.0), 1.0) * total
    run = 0.0
    last: Vec2 = (1.0, 0.0)
    for a, b in zip(points, points[1:]):
        seg = math.hypot(b[0] - a[0], b[1] - a[1])
        if seg == 0.0:
            continue
        last = ((b[0] - a[0]) / seg, (b[1] - a[1]) / seg)
        if run + seg > target:
            return last
        run += seg
    return last
