"""Path planning: RRT* for pushed-object routes, grid A* for pusher transits.

Object routes live in SE(2).  Intermediate waypoint headings equal the local
travel direction because the pushing policy carries objects aligned with the
push; the final waypoint is the exact goal pose, approached along the goal
heading via a straight landing segment.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import (
    Footprint,
    Pose2,
    angle_diff,
    collides,
    polyline_length,
    wrap_angle,
)
from .world import Scene, WorldState


@dataclass(frozen=True)
class RrtConfig:
    """Sampling planner knobs for object routes."""

    steer: float = 0.05
    goal_bias: float = 0.1
    max_iters: int = 20000
    goal_tol_pos: float = 0.005
    goal_tol_ang: float = math.radians(5.0)
    angle_weight: float = 0.1       # metres of cost per radian of turning
    collision_step: float = 0.01
    rewire_gamma: float = 1.0
    rewire_radius_max: float = 0.12  # keeps the neighbour ball local
    landing_len: float = 0.12       # straight approach into the goal pose
    waypoint_spacing: float = 0.05
    # Stop once the solution is within this factor of the metric lower
    # bound; None keeps improving until max_iters.
    early_exit_ratio: Optional[float] = None


@dataclass(frozen=True)
class TransitConfig:
    """Grid search knobs for contact-free pusher motion."""

    cell: float = 0.01
    safety_margin: float = 0.002
    smooth_step: float = 0.003


@dataclass(frozen=True)
class ObjectPath:
    """Planned route for one pushed object.

    ``waypoints`` carry the travel heading at intermediate points and the
    exact goal pose at the end.  ``cost`` is positional arc length.
    """

    obj_id: int
    waypoints: Tuple[Pose2, ...]
    cost: float

    @property
    def points(self) -> List[Tuple[float, float]]:
        return [w.xy for w in self.waypoints]


# ---------------------------------------------------------------------------
# Shared obstacle helpers
# ---------------------------------------------------------------------------


def _obstacles_for_object(
    scene: Scene, s: WorldState, obj_id: int
) -> List[Tuple[Footprint, Pose2]]:
    obs: List[Tuple[Footprint, Pose2]] = list(scene.statics)
    for spec in scene.objects:
        if spec.id == obj_id:
            continue
        pose = s.object_poses.get(spec.id)
        if pose is not None:
            obs.append((spec.footprint, pose))
    return obs


def _pose_free(fp: Footprint, pose: Pose2, obstacles) -> bool:
    for ofp, opose in obstacles:
        lb = math.hypot(opose.x - pose.x, opose.y - pose.y) - fp.circumradius - ofp.circumradius
        if lb > 0.0:
            continue
        if collides(fp, pose, ofp, opose):
            return False
    return True


def _interp_se2(a: Pose2, b: Pose2, t: float) -> Pose2:
    return Pose2(
        a.x + t * (b.x - a.x),
        a.y + t * (b.y - a.y),
        wrap_angle(a.theta + t * angle_diff(b.theta, a.theta)),
    )


def _edge_free(fp: Footprint, a: Pose2, b: Pose2, obstacles, step: float) -> bool:
    d = math.hypot(b.x - a.x, b.y - a.y) + 0.2 * abs(angle_diff(b.theta, a.theta))
    n = max(1, math.ceil(d / step))
    for i in range(1, n + 1):
        if not _pose_free(fp, _interp_se2(a, b, i / n), obstacles):
            return False
    return True


def _inside_workspace(scene: Scene, fp: Footprint, pose: Pose2) -> bool:
    x0, y0, x1, y1 = scene.workspace
    r = fp.circumradius
    return x0 + r <= pose.x <= x1 - r and y0 + r <= pose.y <= y1 - r


# ---------------------------------------------------------------------------
# RRT* over SE(2)
# ---------------------------------------------------------------------------


def plan_object_path(
    scene: Scene,
    s: WorldState,
    obj_id: int,
    goal: Pose2,
    rng: np.random.Generator,
    cfg: RrtConfig = RrtConfig(),
) -> Optional[ObjectPath]:
    """Collision-free SE(2) route from the object's pose to ``goal``.

    Plans to a landing pose offset behind the goal along the goal heading,
    then finishes with a straight segment so the arrival travel direction
    matches the goal orientation.  For 180-degree symmetric rectangles the
    reversed heading is tried too.  Returns None when no route is found.
    """
    spec = scene.object_by_id(obj_id)
    fp = spec.footprint
    start = s.object_poses[obj_id]
    obstacles = _obstacles_for_object(scene, s, obj_id)

    if not _pose_free(fp, goal, obstacles) or not _inside_workspace(scene, fp, goal):
        return None

    headings = [goal.theta]
    if fp.kind == "rectangle":
        headings.append(wrap_angle(goal.theta + math.pi))
    elif fp.kind == "disk":
        headings = [math.atan2(goal.y - start.y, goal.x - start.x)]

    best: Optional[ObjectPath] = None
    for heading in headings:
        cand = _plan_with_landing(scene, fp, obj_id, start, goal, heading,
                                  obstacles, rng, cfg)
        if cand is not None and (best is None or cand.cost < best.cost):
            best = cand
    return best


def _plan_with_landing(scene, fp, obj_id, start, goal, heading,
                       obstacles, rng, cfg) -> Optional[ObjectPath]:
    land_len = cfg.landing_len
    land = None
    while land_len >= 2 * cfg.goal_tol_pos:
        cand = Pose2(goal.x - land_len * math.cos(heading),
                     goal.y - land_len * math.sin(heading), heading)
        if (_pose_free(fp, cand, obstacles)
                and _inside_workspace(scene, fp, cand)
                and _edge_free(fp, cand, Pose2(goal.x, goal.y, heading),
                               obstacles, cfg.collision_step)):
            land = cand
            break
        land_len *= 0.5
    if land is None:
        return None

    if math.hypot(land.x - start.x, land.y - start.y) <= cfg.goal_tol_pos:
        tree_path = [start, land]
    else:
        tree_path = _rrt_star(scene, fp, start, land, obstacles, rng, cfg)
        if tree_path is None:
            return None
    # Shortcut and resample only up to the landing pose; the final straight
    # leg is kept verbatim so the arrival direction stays the goal heading.
    pts = _shortcut(fp, [p.xy for p in tree_path], heading, obstacles, cfg)
    pts = _resample(pts, cfg.waypoint_spacing)
    land_leg = _resample([land.xy, goal.xy], cfg.waypoint_spacing)
    pts = pts + land_leg[1:]
    wps = _headings_from_tangents(pts, goal)
    return ObjectPath(obj_id=obj_id, waypoints=tuple(wps), cost=polyline_length(pts))


def _rrt_star(scene, fp, start, goal, obstacles, rng, cfg) -> Optional[List[Pose2]]:
    x0, y0, x1, y1 = scene.workspace
    r = fp.circumradius
    aw = cfg.angle_weight

    cap = cfg.max_iters + 2
    xs = np.empty(cap)
    ys = np.empty(cap)
    ths = np.empty(cap)
    parents = np.full(cap, -1, dtype=np.int64)
    costs = np.empty(cap)
    poses: List[Pose2] = [start]
    xs[0], ys[0], ths[0] = start.x, start.y, start.theta
    costs[0] = 0.0
    n = 1

    goal_nodes: List[int] = []
    lower_bound = math.hypot(goal.x - start.x, goal.y - start.y) + \
        aw * abs(angle_diff(goal.theta, start.theta))

    scratch_a = np.empty(cap)
    scratch_b = np.empty(cap)
    scratch_c = np.empty(cap)

    def metric(i_slice, px, py, pth):
        # distance from every tree node to the query pose; the result is a
        # view into a scratch buffer, valid only until the next call
        m = scratch_a[:i_slice]
        np.subtract(ths[:i_slice], pth, out=m)
        m += math.pi
        np.remainder(m, 2.0 * math.pi, out=m)
        m -= math.pi
        np.abs(m, out=m)
        m *= aw
        dx = scratch_b[:i_slice]
        dy = scratch_c[:i_slice]
        np.subtract(xs[:i_slice], px, out=dx)
        np.subtract(ys[:i_slice], py, out=dy)
        np.hypot(dx, dy, out=dx)
        m += dx
        return m

    def try_edge(a: Pose2, b: Pose2) -> bool:
        return _edge_free(fp, a, b, obstacles, cfg.collision_step)

    best_goal_cost = math.inf
    for it in range(cfg.max_iters):
        if rng.random() < cfg.goal_bias:
            sample = goal
        else:
            sample = Pose2(rng.uniform(x0 + r, x1 - r), rng.uniform(y0 + r, y1 - r),
                           rng.uniform(-math.pi, math.pi))
        d_all = metric(n, sample.x, sample.y, sample.theta)
        ni = int(np.argmin(d_all))
        near = poses[ni]
        d = float(d_all[ni])
        if d < 1e-9:
            continue
        t = min(1.0, cfg.steer / d)
        new = _interp_se2(near, sample, t)
        if not _inside_workspace(scene, fp, new) or not _pose_free(fp, new, obstacles):
            continue

        # Choose the cheapest collision-free parent in the rewire ball.
        rad = min(cfg.rewire_radius_max,
                  max(cfg.steer, cfg.rewire_gamma * (math.log(n + 1) / (n + 1)) ** (1.0 / 3.0)))
        d_new = metric(n, new.x, new.y, new.theta)
        ball = np.flatnonzero(d_new <= rad)
        parent = ni
        base = costs[ni] + float(d_new[ni])
        if not try_edge(near, new):
            continue
        for j in ball:
            c = costs[j] + float(d_new[j])
            if c < base and try_edge(poses[j], new):
                base = c
                parent = int(j)
        idx = n
        xs[idx], ys[idx], ths[idx] = new.x, new.y, new.theta
        parents[idx] = parent
        costs[idx] = base
        poses.append(new)
        n += 1

        # Rewire neighbours through the new node when that is cheaper.
        for j in ball:
            c = base + float(d_new[j])
            if c + 1e-12 < costs[j] and try_edge(new, poses[j]):
                parents[j] = idx
                costs[j] = c

        dg = math.hypot(new.x - goal.x, new.y - goal.y)
        if dg <= cfg.goal_tol_pos and \
                abs(angle_diff(new.theta, goal.theta)) <= cfg.goal_tol_ang:
            goal_nodes.append(idx)
        if goal_nodes:
            best_goal_cost = min(costs[g] for g in goal_nodes)
            if cfg.early_exit_ratio is not None and \
                    best_goal_cost <= cfg.early_exit_ratio * max(lower_bound, 1e-9):
                break

    if not goal_nodes:
        return None
    gi = min(goal_nodes, key=lambda g: costs[g])
    chain = []
    i = gi
    while i >= 0:
        chain.append(poses[i])
        i = int(parents[i])
    chain.reverse()
    if math.hypot(chain[-1].x - goal.x, chain[-1].y - goal.y) > 1e-12:
        chain.append(goal)
    return chain


def _shortcut(fp, pts, heading, obstacles, cfg) -> List[Tuple[float, float]]:
    """Greedy line-of-sight shortcutting on the position polyline."""
    pts = list(pts)
    changed = True
    while changed and len(pts) > 2:
        changed = False
        i = 0
        while i + 2 < len(pts):
            a = Pose2(pts[i][0], pts[i][1], heading)
            b = Pose2(pts[i + 2][0], pts[i + 2][1], heading)
            seg_dir = math.atan2(b.y - a.y, b.x - a.x) if b.xy != a.xy else heading
            aa = Pose2(a.x, a.y, seg_dir)
            bb = Pose2(b.x, b.y, seg_dir)
            if _edge_free(fp, aa, bb, obstacles, cfg.collision_step):
                del pts[i + 1]
                changed = True
            else:
                i += 1
    return pts


def _resample(pts: Sequence[Tuple[float, float]], spacing: float) -> List[Tuple[float, float]]:
    """Evenly spaced points along the polyline; endpoints preserved exactly."""
    total = polyline_length(list(pts))
    if total <= spacing or len(pts) < 2:
        return [pts[0], pts[-1]] if len(pts) >= 2 else list(pts)
    n = max(1, math.ceil(total / spacing))
    targets = [total * i / n for i in range(n + 1)]
    out = []
    seg = 0
    run = 0.0
    seg_len = math.hypot(pts[1][0] - pts[0][0], pts[1][1] - pts[0][1])
    for s_t in targets:
        while run + seg_len < s_t and seg + 2 < len(pts):
            run += seg_len
            seg += 1
            seg_len = math.hypot(pts[seg + 1][0] - pts[seg][0],
                                 pts[seg + 1][1] - pts[seg][1])
        f = 0.0 if seg_len == 0.0 else min(1.0, max(0.0, (s_t - run) / seg_len))
        out.append((pts[seg][0] + f * (pts[seg + 1][0] - pts[seg][0]),
                    pts[seg][1] + f * (pts[seg + 1][1] - pts[seg][1])))
    out[0] = tuple(pts[0])
    out[-1] = tuple(pts[-1])
    return out


def _headings_from_tangents(pts: Sequence[Tuple[float, float]], goal: Pose2) -> List[Pose2]:
    wps: List[Pose2] = []
    for i, (px, py) in enumerate(pts[:-1]):
        nx, ny = pts[i + 1]
        if math.hypot(nx - px, ny - py) < 1e-12:
            continue
        wps.append(Pose2(px, py, math.atan2(ny - py, nx - px)))
    wps.append(goal)
    return wps


# ---------------------------------------------------------------------------
# Grid A* for the pusher
# ---------------------------------------------------------------------------


def _occupancy(scene: Scene, s: WorldState, cfg: TransitConfig):
    """Boolean blocked grid for the pusher disk, cell centres, conservative."""
    x0, y0, x1, y1 = scene.workspace
    cell = cfg.cell
    nx = max(2, int(round((x1 - x0) / cell)) + 1)
    ny = max(2, int(round((y1 - y0) / cell)) + 1)
    gx = x0 + np.arange(nx) * cell
    gy = y0 + np.arange(ny) * cell
    cx, cy = np.meshgrid(gx, gy, indexing="ij")
    # Conservative inflation: pusher radius, safety, and half a cell diagonal
    # so blocked geometry cannot slip between samples.
    inflate = scene.ee_radius + cfg.safety_margin + 0.5 * cell * math.sqrt(2.0)
    blocked = np.zeros((nx, ny), dtype=bool)
    shapes: List[Tuple[Footprint, Pose2]] = list(scene.statics)
    for spec in scene.objects:
        pose = s.object_poses.get(spec.id)
        if pose is not None:
            shapes.append((spec.footprint, pose))
    for fp, pose in shapes:
        if fp.kind == "disk":
            blocked |= np.hypot(cx - pose.x, cy - pose.y) <= fp.radius + inflate
        else:
            c, s_ = math.cos(pose.theta), math.sin(pose.theta)
            lx = c * (cx - pose.x) + s_ * (cy - pose.y)
            ly = -s_ * (cx - pose.x) + c * (cy - pose.y)
            ddx = np.maximum(np.abs(lx) - 0.5 * fp.width, 0.0)
            ddy = np.maximum(np.abs(ly) - 0.5 * fp.height, 0.0)
            blocked |= np.hypot(ddx, ddy) <= inflate
    # Workspace boundary.
    margin = scene.ee_radius + cfg.safety_margin
    blocked[gx < x0 + margin, :] = True
    blocked[gx > x1 - margin, :] = True
    blocked[:, gy < y0 + margin] = True
    blocked[:, gy > y1 - margin] = True
    return blocked, gx, gy


def _segment_clear(scene: Scene, s: WorldState, a, b, step: float,
                   ignore: FrozenSet[int] = frozenset()) -> bool:
    """Exact pusher-disk sweep check along a straight segment."""
    fp = scene.ee_footprint
    shapes: List[Tuple[Footprint, Pose2]] = list(scene.statics)
    for spec in scene.objects:
        if spec.id in ignore:
            continue
        pose = s.object_poses.get(spec.id)
        if pose is not None:
            shapes.append((spec.footprint, pose))
    d = math.hypot(b[0] - a[0], b[1] - a[1])
    n = max(1, math.ceil(d / step))
    for i in range(n + 1):
        t = i / n
        p = Pose2(a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), 0.0)
        if not _pose_free(fp, p, shapes):
            return False
    return True


_NBRS = [(1, 0, 1.0), (-1, 0, 1.0), (0, 1, 1.0), (0, -1, 1.0),
         (1, 1, math.sqrt(2)), (1, -1, math.sqrt(2)),
         (-1, 1, math.sqrt(2)), (-1, -1, math.sqrt(2))]


def plan_transit(
    scene: Scene,
    s: WorldState,
    goal_xy: Tuple[float, float],
    cfg: TransitConfig = TransitConfig(),
) -> Optional[List[Tuple[float, float]]]:
    """Contact-free pusher route from the current pusher position.

    Grid A* with straight-line shortcutting; trivial cases return the direct
    segment.  All objects and statics are obstacles.  Returns the polyline
    including the exact endpoints, or None when unreachable.
    """
    start_xy = s.ee.xy
    if _segment_clear(scene, s, start_xy, goal_xy, cfg.smooth_step):
        return [start_xy, tuple(goal_xy)]

    blocked, gx, gy = _occupancy(scene, s, cfg)
    nx, ny = blocked.shape

    def snap(p):
        i = int(round((p[0] - gx[0]) / cfg.cell))
        j = int(round((p[1] - gy[0]) / cfg.cell))
        return min(max(i, 0), nx - 1), min(max(j, 0), ny - 1)

    def nearest_free(ij, p, rmax=6):
        # Closest free cell with a clear exact segment back to the point.
        cand = []
        for di in range(-rmax, rmax + 1):
            for dj in range(-rmax, rmax + 1):
                i, j = ij[0] + di, ij[1] + dj
                if 0 <= i < nx and 0 <= j < ny and not blocked[i, j]:
                    cand.append((di * di + dj * dj, i, j))
        for _, i, j in sorted(cand):
            if _segment_clear(scene, s, p, (gx[i], gy[j]), cfg.smooth_step):
                return i, j
        return None

    si = nearest_free(snap(start_xy), start_xy)
    gi = nearest_free(snap(goal_xy), goal_xy)
    if si is None or gi is None:
        return None

    dist: Dict[Tuple[int, int], float] = {si: 0.0}
    prev: Dict[Tuple[int, int], Tuple[int, int]] = {}
    h0 = math.hypot(si[0] - gi[0], si[1] - gi[1])
    open_heap = [(h0, si)]
    found = False
    while open_heap:
        f, cur = heapq.heappop(open_heap)
        if cur == gi:
            found = True
            break
        d_cur = dist[cur]
        if f - math.hypot(cur[0] - gi[0], cur[1] - gi[1]) > d_cur + 1e-12:
            continue
        for di, dj, w in _NBRS:
            i, j = cur[0] + di, cur[1] + dj
            if not (0 <= i < nx and 0 <= j < ny) or blocked[i, j]:
                continue
            nd = d_cur + w
            if nd < dist.get((i, j), math.inf):
                dist[(i, j)] = nd
                prev[(i, j)] = cur
                heapq.heappush(open_heap,
                               (nd + math.hypot(i - gi[0], j - gi[1]), (i, j)))
    if not found:
        return None

    cells = [gi]
    while cells[-1] != si:
        cells.append(prev[cells[-1]])
    cells.reverse()
    pts: List[Tuple[float, float]] = [(float(start_xy[0]), float(start_xy[1]))]
    pts += [(float(gx[i]), float(gy[j])) for i, j in cells]
    pts.append((float(goal_xy[0]), float(goal_xy[1])))

    # Shortcut with exact sweep checks.
    out = [pts[0]]
    i = 0
    while i < len(pts) - 1:
        j = len(pts) - 1
        while j > i + 1 and not _segment_clear(scene, s, pts[i], pts[j], cfg.smooth_step):
            j -= 1
        out.append(pts[j])
        i = j
    return out
