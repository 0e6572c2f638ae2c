"""Push execution: dock the pusher, track object paths, form and drive chains.

A push of one object runs in phases: plan a route for the object, transit
the pusher to a docking point behind it, close in to contact, then track the
route waypoint by waypoint with the trained pushing policy, finishing with
an analytic fine-placement controller.  Placed objects are forbidden to
move; any contact with them blocks the step and triggers a re-dock.

A nested push delivers two objects with one shared drive: the lead object
is pushed partway along its route and parked, the joining object is pushed
into the slot behind it, and the pair is then driven as a chain to the lead
goal before the joiner peels off to its own goal.  The maneuver is only
chosen when its estimated pusher travel beats doing the two pushes back to
back.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import (
    Footprint,
    Pose2,
    collides,
    polyline_length,
    project_to_polyline,
    tangent_at,
)
from .world import (
    ModeTag,
    ObjectSpec,
    Path,
    Scene,
    TRANSIT,
    WorldState,
    path_cost,
)
from .pushworld import (
    Blocked,
    EeMotion,
    PhysicsParams,
    propagate,
    _Body,
    _ee_gap_to_body,
)
from .pushpolicy import PolicyTable, policy_step
from .pathplan import ObjectPath, RrtConfig, TransitConfig, plan_object_path, plan_transit


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PushConfig:
    """Execution knobs shared by single and chain pushes."""

    waypoint_tol: float = 0.03          # loose capture for parking mid-route
    final_tol_pos: float = 0.01
    final_tol_ang: float = math.radians(10.0)
    fine_band: float = 0.035            # switch to fine control inside this radius
    fine_steps: int = 90
    standoff: float = 0.02              # dock this far short of contact
    approach_gap: float = 0.003         # stop the approach at this gap
    step: float = 0.01                  # nominal push step
    chunk: float = 0.015                # free-motion chunk length
    lookahead: float = 0.07             # carrot distance ahead of the object
    stall_steps: int = 80               # no route progress for this long: re-dock
    max_redocks: int = 10
    steps_per_meter: int = 2000         # tracking budget scale
    min_track_steps: int = 800
    # execution-grade planner settings: accept a slightly longer route in
    # exchange for an early exit instead of exhausting the iteration budget
    rrt: RrtConfig = RrtConfig(max_iters=6000, early_exit_ratio=1.3)
    transit: TransitConfig = TransitConfig()
    dock_overhead: float = 0.08         # estimated extra travel per docking
    min_shared_len: float = 0.15        # nesting needs this much shared route


@dataclass
class PushOutcome:
    """Result of one push maneuver; ``path`` starts at the input state."""

    ok: bool
    path: Path
    reason: str = ""

    @property
    def ee_distance(self) -> float:
        return path_cost(self.path)


class _Expired(Exception):
    pass


# ---------------------------------------------------------------------------
# Geometry helpers
# ---------------------------------------------------------------------------


def _support(fp: Footprint, theta: float, dx: float, dy: float) -> float:
    """Farthest extent of the footprint in direction (dx, dy)."""
    if fp.kind == "disk":
        return fp.radius
    c, s = math.cos(theta), math.sin(theta)
    hw, hh = 0.5 * fp.width, 0.5 * fp.height
    # corner offsets in world axes
    best = -math.inf
    for bx, by in ((hw, hh), (hw, -hh), (-hw, hh), (-hw, -hh)):
        wx = c * bx - s * by
        wy = s * bx + c * by
        best = max(best, wx * dx + wy * dy)
    return best


def chain_radius(specs: Sequence[ObjectSpec]) -> float:
    """Slot half-spacing: circumradius of the largest chain member."""
    return max(sp.footprint.circumradius for sp in specs)


def docking_pose(points: Sequence[Tuple[float, float]], t: float,
                 slots_back: int, radius: float) -> Pose2:
    """Pose ``slots_back`` chain slots behind the route point at parameter t.

    Slots are spaced two radii apart along the backward tangent; the heading
    is the forward travel direction.  Slot 1 is where a joining object
    rendezvouses, slot ``m+1`` is where the pusher docks for an m-chain.
    """
    total = polyline_length(points)
    tt = min(max(t, 0.0), 1.0)
    target = tt * total
    run = 0.0
    px, py = points[0]
    for a, b in zip(points, points[1:]):
        seg = math.hypot(b[0] - a[0], b[1] - a[1])
        if run + seg >= target and seg > 0.0:
            f = (target - run) / seg
            px, py = a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])
            break
        run += seg
    else:
        px, py = points[-1]
    tx, ty = tangent_at(points, min(tt + 1e-3, 1.0))
    d = 2.0 * radius * slots_back
    return Pose2(px - d * tx, py - d * ty, math.atan2(ty, tx))


def touch_spacing(rear: Footprint, front: Footprint) -> float:
    """Centre distance of two axis-aligned members in contact."""

    def half(fp: Footprint) -> float:
        return 0.5 * fp.width if fp.kind == "rectangle" else fp.radius

    return half(rear) + half(front)


def symmetry_angle(fp: Footprint) -> Optional[float]:
    """Heading period that leaves the footprint unchanged; None for disks."""
    if fp.kind == "disk":
        return None
    if math.isclose(fp.width, fp.height, rel_tol=1e-9):
        return math.pi / 2.0
    return math.pi


def pose_error(fp: Footprint, pose: Pose2, goal: Pose2) -> Tuple[float, float]:
    """Position and symmetry-reduced heading error against a goal pose."""
    dpos = math.hypot(pose.x - goal.x, pose.y - goal.y)
    sym = symmetry_angle(fp)
    if sym is None:
        return dpos, 0.0
    return dpos, abs(math.remainder(goal.theta - pose.theta, sym))


def placed_ok(fp: Footprint, pose: Pose2, goal: Pose2, tol_pos: float,
              tol_ang: float) -> bool:
    dpos, dang = pose_error(fp, pose, goal)
    return dpos <= tol_pos and dang <= tol_ang


# ---------------------------------------------------------------------------
# Trajectory recorder
# ---------------------------------------------------------------------------


class _Run:
    """Mutable execution context: grows the trajectory, owns budgets."""

    def __init__(self, scene: Scene, start: WorldState, params: PhysicsParams,
                 placed: FrozenSet[int], rng: np.random.Generator,
                 cfg: PushConfig, deadline: Optional[float]):
        self.scene = scene
        self.params = params
        self.placed = placed
        self.rng = rng
        self.cfg = cfg
        self.deadline = deadline
        self.states: List[WorldState] = [start]
        self.modes: List[ModeTag] = []
        self.trace: Optional[List[str]] = None

    @property
    def state(self) -> WorldState:
        return self.states[-1]

    def note(self, msg: str) -> None:
        """Record a control decision when tracing is enabled."""
        if self.trace is not None:
            self.trace.append(f"[{len(self.states)}] {msg}")

    def check_clock(self) -> None:
        if self.deadline is not None and time.monotonic() > self.deadline:
            raise _Expired()

    def step(self, motion: EeMotion, mode: ModeTag):
        """Propagate one pusher motion; appends on success."""
        res = propagate(self.scene, self.state, motion, self.params,
                        forbidden=self.placed)
        if isinstance(res, Blocked):
            return res
        self.states.append(res)
        self.modes.append(mode)
        return res

    def path(self) -> Path:
        return Path(tuple(self.states), tuple(self.modes))


def _gap_to_object(run: _Run, spec: ObjectSpec) -> float:
    fp = spec.footprint
    pose = run.state.pose_of(spec.id)
    if fp.kind == "disk":
        body = _Body(spec.id, "disk", 0.0, 0.0, fp.radius, pose)
    else:
        body = _Body(spec.id, "rect", 0.5 * fp.width, 0.5 * fp.height, 0.0, pose)
    g, _, _, _, _ = _ee_gap_to_body(run.state.ee.x, run.state.ee.y,
                                    run.scene.ee_radius, body)
    return g


# ---------------------------------------------------------------------------
# Transit and docking
# ---------------------------------------------------------------------------


def _follow_polyline(run: _Run, pts: Sequence[Tuple[float, float]]) -> bool:
    """Drive the pusher along a planned contact-free route."""
    cfg = run.cfg
    for a, b in zip(pts, pts[1:]):
        seg = math.hypot(b[0] - a[0], b[1] - a[1])
        n = max(1, math.ceil(seg / cfg.chunk))
        for k in range(n):
            run.check_clock()
            cur = run.state.ee
            fx = a[0] + (b[0] - a[0]) * (k + 1) / n
            fy = a[1] + (b[1] - a[1]) * (k + 1) / n
            res = run.step(EeMotion(fx - cur.x, fy - cur.y), TRANSIT)
            if isinstance(res, Blocked):
                return False
    return True


def _dock(run: _Run, chain: Tuple[int, ...], dock_dir: float) -> bool:
    """Transit behind the chain's rear object and close in to contact gap.

    ``dock_dir`` is the direction the subsequent push will travel; the
    pusher parks on the opposite side.
    """
    cfg = run.cfg
    spec = run.scene.object_by_id(chain[0])
    obj = run.state.pose_of(chain[0])
    vx, vy = math.cos(dock_dir), math.sin(dock_dir)
    reach = _support(spec.footprint, obj.theta, -vx, -vy) + run.scene.ee_radius
    dock_xy = (obj.x - (reach + cfg.standoff) * vx,
               obj.y - (reach + cfg.standoff) * vy)
    route = plan_transit(run.scene, run.state, dock_xy, cfg.transit)
    if route is None:
        return False
    if not _follow_polyline(run, route):
        return False
    # straight approach until the contact gap closes to approach_gap
    for _ in range(12):
        run.check_clock()
        g = _gap_to_object(run, spec)
        adv = g - cfg.approach_gap
        if adv <= 1e-4:
            return True
        res = run.step(EeMotion(min(adv, cfg.chunk) * vx,
                                min(adv, cfg.chunk) * vy), TRANSIT)
        if isinstance(res, Blocked):
            return False
    return _gap_to_object(run, spec) <= cfg.approach_gap + 5e-3


# ---------------------------------------------------------------------------
# Waypoint tracking
# ---------------------------------------------------------------------------


def _point_at_arclen(points: Sequence[Tuple[float, float]],
                     s: float) -> Tuple[float, float]:
    """Point at arclength ``s`` from the start of a polyline."""
    if s <= 0.0:
        return points[0]
    run = 0.0
    for a, b in zip(points, points[1:]):
        seg = math.hypot(b[0] - a[0], b[1] - a[1])
        if run + seg >= s and seg > 0.0:
            f = (s - run) / seg
            return a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])
        run += seg
    return points[-1]


def _truncate_polyline(points: Sequence[Tuple[float, float]],
                       margin: float) -> List[Tuple[float, float]]:
    """Copy of a polyline cut ``margin`` short of its far end."""
    total = polyline_length(points)
    keep = total - margin
    if keep <= 0.0:
        return list(points[:2])
    out = [points[0]]
    run_len = 0.0
    for a, b in zip(points, points[1:]):
        seg = math.hypot(b[0] - a[0], b[1] - a[1])
        if run_len + seg >= keep and seg > 0.0:
            f = (keep - run_len) / seg
            out.append((a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])))
            return out
        run_len += seg
        out.append(b)
    return out


def _track_route(
    run: _Run,
    chain: Tuple[int, ...],
    table: PolicyTable,
    fallback: Optional[PolicyTable],
    points: Sequence[Tuple[float, float]],
    capture_final: float,
) -> bool:
    """Drive the chain's front object along the route to its last point.

    Carrot tracking: the object is projected onto the route and the policy
    steers toward a point a fixed lookahead further along, which keeps the
    travel frame stable all the way in.  Aborts, blocked steps and progress
    stalls trigger a re-dock; with a chain the single-object table can
    substitute by herding the rear member toward a virtual trailing slot.
    """
    cfg = run.cfg
    front = chain[-1]
    rear = chain[0]
    specs = [run.scene.object_by_id(i) for i in chain]
    mode = ModeTag("push", chain)
    spacing = touch_spacing(specs[0].footprint, specs[-1].footprint)
    total = polyline_length(points)
    budget = max(cfg.min_track_steps,
                 int(cfg.steps_per_meter * (total + 0.3)))
    end = points[-1]
    redocks = 0
    visits: Dict[Tuple[int, ...], int] = {}
    best_s = -1.0
    stall = 0
    futile = 0
    s_at_redock = -1.0
    # hysteresis width: the policy discretizes the whole relative state in
    # the travel frame, so a drifting frame re-bins everything every step
    # and the pusher thrashes between contact sides
    half_bin = math.pi / table.grid.ang_bins
    travel = None

    def redock(direction: float) -> bool:
        nonlocal redocks, visits, futile, s_at_redock
        # a redock that buys no route progress over the previous one is
        # futile; three in a row means the approach is structurally stuck
        if best_s <= s_at_redock + 1e-3:
            futile += 1
            if futile >= 3:
                run.note(f"track{chain}: stuck at s={best_s * 100:.1f}cm")
                return False
        else:
            futile = 0
        s_at_redock = best_s
        # a single docking spot can be unreachable (hemmed in by a wall or
        # a forbidden neighbour), so try a few approach angles
        for _ in range(3):
            redocks += 1
            if redocks > cfg.max_redocks:
                run.note(f"track{chain}: redocks exhausted")
                return False
            jitter = 0.0 if redocks == 1 else float(run.rng.uniform(-1.2, 1.2))
            visits = {}
            if _dock(run, chain, direction + jitter):
                run.note(f"track{chain}: redock {redocks} ok")
                return True
        run.note(f"track{chain}: dock attempts failed")
        return False

    while True:
        run.check_clock()
        fpos = run.state.pose_of(front)
        end_dist = math.hypot(end[0] - fpos.x, end[1] - fpos.y)
        if end_dist <= capture_final:
            return True
        budget -= 1
        if budget <= 0:
            run.note(f"track{chain}: budget exhausted at end_dist "
                     f"{end_dist * 100:.1f}cm")
            return False
        t, _ = project_to_polyline((fpos.x, fpos.y), points)
        s = t * total
        # past the end of the route: a push can no longer reduce a lateral
        # miss, hand over to fine placement while the miss is still small
        if s >= total - 0.005 and end_dist <= 0.08:
            run.note(f"track{chain}: route end, lateral "
                     f"{end_dist * 100:.1f}cm")
            return True
        if s + cfg.lookahead >= total:
            # carrot pinned at the endpoint: aiming at it would spin the
            # travel frame as the object closes in, so hold the final
            # segment's direction and drive straight through
            raw = math.atan2(points[-1][1] - points[-2][1],
                             points[-1][0] - points[-2][0])
        else:
            carrot = _point_at_arclen(points, s + cfg.lookahead)
            raw = math.atan2(carrot[1] - fpos.y, carrot[0] - fpos.x)
        if travel is None or abs(math.remainder(raw - travel,
                                                2.0 * math.pi)) > half_bin:
            travel = raw
        if s > best_s + 1e-4:
            best_s = s
            stall = 0
        else:
            stall += 1
            if stall >= cfg.stall_steps:
                stall = 0
                if not redock(travel):
                    return False
                continue
        obj_poses = [run.state.pose_of(i) for i in chain]
        dec = policy_step(table, run.state.ee, obj_poses, travel,
                          visits, run.rng)
        if dec.kind == "abort" and fallback is not None and len(chain) > 1:
            # outside the trained chain window: herd the rear member into
            # the slot touching the front object's tail, then shove the
            # formation forward through the rear
            rpos = run.state.pose_of(rear)
            vx, vy = math.cos(travel), math.sin(travel)
            slot = (fpos.x - spacing * vx, fpos.y - spacing * vy)
            gap = math.hypot(slot[0] - rpos.x, slot[1] - rpos.y)
            if gap > 0.012:
                aim = math.atan2(slot[1] - rpos.y, slot[0] - rpos.x)
            else:
                aim = travel
            dec = policy_step(fallback, run.state.ee, [rpos], aim,
                              visits, run.rng)
        if dec.kind == "abort":
            if not redock(travel):
                return False
            continue
        res = run.step(dec.motion, mode)
        if isinstance(res, Blocked):
            if not redock(travel):
                return False


# ---------------------------------------------------------------------------
# Fine placement
# ---------------------------------------------------------------------------


def _fine_place(run: _Run, obj_id: int, goal: Pose2,
                chain: Tuple[int, ...],
                tol_pos: Optional[float] = None,
                tol_ang: Optional[float] = None) -> bool:
    """Analytic terminal controller: small aimed pushes onto the goal pose.

    Aim-point control: pushing the trailing face at lateral offset ``o``
    rotates the object by about -o * len / c_eff^2 per push, with c_eff a
    scaled pressure radius.  The loop alternates pusher repositioning moves
    with short pushes until both tolerances hold.
    """
    cfg = run.cfg
    scene = run.scene
    spec = scene.object_by_id(obj_id)
    fp = spec.footprint
    mode = ModeTag("push", chain)
    tp = cfg.final_tol_pos if tol_pos is None else tol_pos
    ta = cfg.final_tol_ang if tol_ang is None else tol_ang
    c_eff2 = 2.25 * spec.pressure_radius ** 2
    redocks = 0

    last_face = -1
    for _ in range(cfg.fine_steps):
        run.check_clock()
        obj = run.state.pose_of(obj_id)
        dpos, dang = pose_error(fp, obj, goal)
        if dpos <= tp and dang <= ta:
            return True
        # signed heading error reduced by symmetry, drives the aim offset
        sym = symmetry_angle(fp)
        eth = 0.0 if sym is None else math.remainder(goal.theta - obj.theta, sym)
        if dpos > 1e-6:
            ehx, ehy = (goal.x - obj.x) / dpos, (goal.y - obj.y) / dpos
        else:
            ehx, ehy = math.cos(goal.theta), math.sin(goal.theta)
        # push along a face normal: oblique pushes leave the friction cone
        # and only slip, so the direction set is the body's inward normals
        vx, vy, half, depth, last_face = _face_push(fp, obj.theta, ehx, ehy,
                                                    last_face)
        # aim offset capped by face extent and by the stick (no-slip) limit
        mu = spec.contact_friction
        beta_d = depth / (spec.pressure_radius ** 2)
        lat_cap = min(0.55 * half, 0.9 * mu * (1.0 + beta_d * depth) / beta_d)
        # rotation per push is off * length / c_eff2, so a large heading
        # error needs long pushes even when the position error is small;
        # the overshoot is recovered by the opposing-face pass
        ang_len = abs(eth) * c_eff2 / lat_cap if lat_cap > 1e-9 else 0.0
        length = min(cfg.step, max(3e-3, 0.9 * dpos, 0.9 * ang_len))
        off = max(-lat_cap, min(lat_cap, -eth * c_eff2 / length))
        reach = _support(fp, obj.theta, -vx, -vy) + scene.ee_radius
        tx = obj.x - (reach + cfg.approach_gap) * vx + off * -vy
        ty = obj.y - (reach + cfg.approach_gap) * vy + off * vx
        ee = run.state.ee
        if math.hypot(tx - ee.x, ty - ee.y) > 2.5e-3:
            if not _reposition(run, obj_id, (tx, ty)):
                redocks += 1
                if redocks > 3:
                    return False
                if not _dock(run, (obj_id,), math.atan2(vy, vx)):
                    return False
                continue
        # the centreline reach undershoots off-centre: creep to true contact
        blocked = False
        for _creep in range(8):
            g = _gap_to_object(run, spec)
            adv = g - cfg.approach_gap
            if adv <= 2e-4:
                break
            res = run.step(EeMotion(min(adv, cfg.chunk) * vx,
                                    min(adv, cfg.chunk) * vy), TRANSIT)
            if isinstance(res, Blocked):
                blocked = True
                break
        if not blocked:
            # spend the residual gap on top so the commanded displacement
            # lands on the object, not on empty space
            total = min(0.95 * run.params.max_ee_step,
                        length + max(0.0, _gap_to_object(run, spec)))
            res = run.step(EeMotion(total * vx, total * vy), mode)
            blocked = isinstance(res, Blocked)
        if blocked:
            redocks += 1
            if redocks > 3 or not _dock(run, (obj_id,), math.atan2(vy, vx)):
                return False
    obj = run.state.pose_of(obj_id)
    dpos, dang = pose_error(fp, obj, goal)
    ok = dpos <= tp and dang <= ta
    if not ok:
        run.note(f"fine {obj_id}: out of steps at {dpos * 1000:.1f}mm/"
                 f"{math.degrees(dang):.1f}deg")
    return ok


def _move_to(run: _Run, target_xy: Tuple[float, float]) -> bool:
    """Straight chunked pusher move; fails on any blocked step."""
    start = run.state.ee
    dx, dy = target_xy[0] - start.x, target_xy[1] - start.y
    n = max(1, math.ceil(math.hypot(dx, dy) / run.cfg.chunk))
    for k in range(n):
        run.check_clock()
        cur = run.state.ee
        fx = start.x + dx * (k + 1) / n
        fy = start.y + dy * (k + 1) / n
        res = run.step(EeMotion(fx - cur.x, fy - cur.y), TRANSIT)
        if isinstance(res, Blocked):
            return False
    return True


def _face_push(fp: Footprint, theta: float, ehx: float, ehy: float,
               last_face: int) -> Tuple[float, float, float, float, int]:
    """Pick the push direction: the inward face normal best aligned with
    the wanted motion direction (ehx, ehy).

    Returns (dir_x, dir_y, face half-width, face depth from centre, face id).
    A small bonus keeps the previous face when it is nearly as good, which
    avoids swinging the pusher to a new side every step.  Disks have no
    faces; any direction works.
    """
    if fp.kind == "disk":
        return ehx, ehy, 0.6 * fp.radius, fp.radius, -1
    c, s = math.cos(theta), math.sin(theta)
    # inward normals of the four faces with their half-widths and depths
    cands = (
        (-c, -s, 0.5 * fp.height, 0.5 * fp.width),    # push on the +x face
        (c, s, 0.5 * fp.height, 0.5 * fp.width),      # push on the -x face
        (s, -c, 0.5 * fp.width, 0.5 * fp.height),     # push on the +y face
        (-s, c, 0.5 * fp.width, 0.5 * fp.height),     # push on the -y face
    )
    best_i, best_score = 0, -math.inf
    for i, (dx, dy, _, _) in enumerate(cands):
        score = dx * ehx + dy * ehy + (0.25 if i == last_face else 0.0)
        if score > best_score:
            best_i, best_score = i, score
    dx, dy, half, depth = cands[best_i]
    return dx, dy, half, depth, best_i


def _reposition(run: _Run, obj_id: int, target_xy: Tuple[float, float]) -> bool:
    """Swing the pusher around the object to a nearby contact-side point."""
    cfg = run.cfg
    spec = run.scene.object_by_id(obj_id)
    obj = run.state.pose_of(obj_id)
    ee = run.state.ee
    ca = math.atan2(ee.y - obj.y, ee.x - obj.x)
    ta = math.atan2(target_xy[1] - obj.y, target_xy[0] - obj.x)
    swing = math.remainder(ta - ca, 2 * math.pi)
    if abs(swing) <= 0.4:
        # back off radially first so the lateral move cannot clip the body
        r_cur = math.hypot(ee.x - obj.x, ee.y - obj.y)
        if abs(swing) * r_cur > 4e-3:
            out = r_cur + 0.012
            if not _move_to(run, (obj.x + out * math.cos(ca),
                                  obj.y + out * math.sin(ca))):
                return False
        return _move_to(run, target_xy)
    # retreat to a safe radius, arc around, close back in
    r_tgt = math.hypot(target_xy[0] - obj.x, target_xy[1] - obj.y)
    r_arc = max(spec.footprint.circumradius + run.scene.ee_radius + 0.012, r_tgt)
    if not _move_to(run, (obj.x + r_arc * math.cos(ca),
                          obj.y + r_arc * math.sin(ca))):
        return False
    steps = max(2, math.ceil(abs(swing) * r_arc / cfg.chunk))
    for k in range(1, steps + 1):
        run.check_clock()
        a = ca + swing * k / steps
        cur = run.state.ee
        res = run.step(EeMotion(obj.x + r_arc * math.cos(a) - cur.x,
                                obj.y + r_arc * math.sin(a) - cur.y), TRANSIT)
        if isinstance(res, Blocked):
            return False
    return _move_to(run, target_xy)


# ---------------------------------------------------------------------------
# Single-object push
# ---------------------------------------------------------------------------


def _exec_push(
    run: _Run,
    obj_id: int,
    goal: Pose2,
    table: PolicyTable,
    route: Optional[ObjectPath] = None,
    tol_pos: Optional[float] = None,
    tol_ang: Optional[float] = None,
) -> Tuple[bool, str]:
    """Plan, track and fine-place one object on the shared trajectory."""
    cfg = run.cfg
    spec = run.scene.object_by_id(obj_id)
    tp = cfg.final_tol_pos if tol_pos is None else tol_pos
    ta = cfg.final_tol_ang if tol_ang is None else tol_ang
    if placed_ok(spec.footprint, run.state.pose_of(obj_id), goal, tp, ta):
        return True, ""
    if route is None:
        route = plan_object_path(run.scene, run.state, obj_id, goal, run.rng,
                                 cfg.rrt)
        if route is None:
            return False, "no route for object"
    if not _track_route(run, (obj_id,), table, None, route.points,
                        capture_final=cfg.fine_band):
        return False, "tracking failed"
    if not _fine_place(run, obj_id, goal, (obj_id,), tol_pos=tp, tol_ang=ta):
        return False, "fine placement failed"
    return True, ""


def push_object(
    scene: Scene,
    state: WorldState,
    obj_id: int,
    goal: Pose2,
    table: PolicyTable,
    rng: np.random.Generator,
    placed: FrozenSet[int] = frozenset(),
    cfg: PushConfig = PushConfig(),
    route: Optional[ObjectPath] = None,
    deadline: Optional[float] = None,
    trace: Optional[List[str]] = None,
) -> PushOutcome:
    """Push a single object to its goal pose.

    Returns the full pusher trajectory including transit segments; on
    failure the trajectory covers everything attempted so far.  ``trace``
    collects control decisions for post-mortems when a list is passed.
    """
    params = PhysicsParams.from_scene(scene)
    run = _Run(scene, state, params, placed, rng, cfg, deadline)
    run.trace = trace
    try:
        ok, reason = _exec_push(run, obj_id, goal, table, route=route)
    except _Expired:
        return PushOutcome(False, run.path(), "timeout")
    return PushOutcome(ok, run.path(), reason)


# ---------------------------------------------------------------------------
# Nested push of a pair
# ---------------------------------------------------------------------------


@dataclass
class NestedOutcome:
    """Result of a pair delivery; ``nested`` tells which variant ran."""

    ok: bool
    path: Path
    nested: bool
    reason: str = ""
    est_sequential: float = math.inf
    est_nested: float = math.inf

    @property
    def ee_distance(self) -> float:
        return path_cost(self.path)


def _waypoint_params(points: Sequence[Tuple[float, float]]) -> List[float]:
    """Arclength parameter in [0, 1] of every route vertex."""
    total = polyline_length(points)
    if total <= 0.0:
        return [0.0] * len(points)
    out = [0.0]
    run = 0.0
    for a, b in zip(points, points[1:]):
        run += math.hypot(b[0] - a[0], b[1] - a[1])
        out.append(run / total)
    return out


def _plan_rendezvous(
    scene: Scene,
    state: WorldState,
    lead_id: int,
    join_id: int,
    points: Sequence[Tuple[float, float]],
    radius: float,
    cfg: PushConfig,
) -> Optional[Tuple[int, Pose2, Pose2]]:
    """Pick the earliest route vertex where the pair can rendezvous.

    Returns (vertex index, planned parked pose of the lead, rendezvous pose
    of the joiner) or None when no vertex leaves enough shared route or no
    slot is collision free.
    """
    total = polyline_length(points)
    join = state.pose_of(join_id)
    t_join, _ = project_to_polyline((join.x, join.y), points)
    params = _waypoint_params(points)
    back = 2.0 * radius + 0.01
    join_spec = scene.object_by_id(join_id)
    for k in range(1, len(points) - 1):
        t = params[k]
        # the slot behind the parked lead must itself lie ahead of the
        # joiner's projection, else the joiner gets pushed backwards into
        # the lead's shadow
        if t * total < t_join * total + back + 0.05:
            continue
        if (1.0 - t) * total < cfg.min_shared_len:
            return None
        tx, ty = tangent_at(points, min(t + 1e-3, 1.0))
        parked = Pose2(points[k][0], points[k][1], math.atan2(ty, tx))
        rdv = Pose2(parked.x - back * tx,
                    parked.y - back * ty, parked.theta)
        virt = state.with_object_pose(lead_id, parked)
        virt = virt.with_object_pose(join_id, rdv)
        if _pair_clear(scene, virt, lead_id, join_id):
            return k, parked, rdv
    return None


def _straighten(scene: Scene, state: WorldState, ignore: FrozenSet[int],
                pts: Sequence[Tuple[float, float]],
                radius: float) -> List[Tuple[float, float]]:
    """Greedy line-of-sight shortcut of a position polyline for a disc.

    Conservative: the moving set is summarized by one bounding disc, so a
    cut is only taken when the whole swept corridor clears the statics and
    every bystander object.
    """
    disc = Footprint.disk(radius)
    others = [(scene.object_by_id(oid).footprint, pose)
              for oid, pose in state.object_poses.items() if oid not in ignore]

    def seg_clear(a: Tuple[float, float], b: Tuple[float, float]) -> bool:
        n = max(1, math.ceil(math.hypot(b[0] - a[0], b[1] - a[1]) / 0.01))
        for i in range(n + 1):
            f = i / n
            p = Pose2(a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1]), 0.0)
            for sf, sp in scene.statics:
                if collides(disc, p, sf, sp):
                    return False
            for of, op in others:
                if collides(disc, p, of, op):
                    return False
        return True

    out = [pts[0]]
    i = 0
    while i < len(pts) - 1:
        j = len(pts) - 1
        while j > i + 1 and not seg_clear(pts[i], pts[j]):
            j -= 1
        out.append(pts[j])
        i = j
    return out


def _pair_clear(scene: Scene, s: WorldState, lead_id: int, join_id: int) -> bool:
    """Object-level validity of a hypothetical pair placement."""
    specs = {o.id: o for o in scene.objects}
    for oid in (lead_id, join_id):
        fa, pa = specs[oid].footprint, s.pose_of(oid)
        for sf, sp in scene.statics:
            if collides(fa, pa, sf, sp):
                return False
        for other, pb in s.object_poses.items():
            if other == oid or (oid == join_id and other == lead_id):
                continue  # the pair itself is checked once, lead side
            if collides(fa, pa, specs[other].footprint, pb):
                return False
    return True


def _estimate_costs(
    state: WorldState,
    lead_route: Sequence[Tuple[float, float]],
    join_xy: Tuple[float, float],
    join_goal: Pose2,
    rdv: Optional[Tuple[int, Pose2, Pose2]],
    cfg: PushConfig,
) -> Tuple[float, float]:
    """Straight-line pusher-travel estimates for both delivery variants."""
    ee = (state.ee.x, state.ee.y)
    lead_len = polyline_length(lead_route)
    lead_start = lead_route[0]
    lead_end = lead_route[-1]

    def d(a, b) -> float:
        return math.hypot(a[0] - b[0], a[1] - b[1])

    seq = (d(ee, lead_start) + cfg.dock_overhead + lead_len
           + d(lead_end, join_xy) + cfg.dock_overhead
           + 1.3 * d(join_xy, (join_goal.x, join_goal.y)))
    if rdv is None:
        return seq, math.inf
    k, parked, rdv_pose = rdv
    params = _waypoint_params(lead_route)
    t = params[k]
    nested = (d(ee, lead_start) + cfg.dock_overhead + t * lead_len
              + d((parked.x, parked.y), join_xy) + cfg.dock_overhead
              + 1.3 * d(join_xy, (rdv_pose.x, rdv_pose.y)) + cfg.dock_overhead
              + (1.0 - t) * lead_len + cfg.dock_overhead
              + 1.3 * d((rdv_pose.x, rdv_pose.y), (join_goal.x, join_goal.y)))
    return seq, nested


def nested_push(
    scene: Scene,
    state: WorldState,
    lead_id: int,
    join_id: int,
    lead_goal: Pose2,
    join_goal: Pose2,
    mono_table: PolicyTable,
    chain_table: Optional[PolicyTable],
    rng: np.random.Generator,
    placed: FrozenSet[int] = frozenset(),
    cfg: PushConfig = PushConfig(),
    deadline: Optional[float] = None,
    trace: Optional[List[str]] = None,
) -> NestedOutcome:
    """Deliver two objects, chaining them over the shared route when cheaper.

    The lead is pushed partway along its route and parked; the joiner is
    pushed into the slot behind it; the pair is driven as a chain to the
    lead goal; the joiner then peels off to its own goal.  When the
    estimated pusher travel of plain back-to-back pushes is lower (or no
    rendezvous exists), the sequential variant runs instead.  ``trace``
    collects control decisions for post-mortems when a list is passed.
    """
    params = PhysicsParams.from_scene(scene)
    run = _Run(scene, state, params, placed, rng, cfg, deadline)
    run.trace = trace
    lead_spec = scene.object_by_id(lead_id)
    join_spec = scene.object_by_id(join_id)
    radius = chain_radius([lead_spec, join_spec])

    try:
        lead_route = plan_object_path(scene, state, lead_id, lead_goal, rng,
                                      cfg.rrt)
        if lead_route is None:
            return NestedOutcome(False, run.path(), False, "no route for lead")
        rdv = None
        if chain_table is not None:
            rdv = _plan_rendezvous(scene, state, lead_id, join_id,
                                   lead_route.points, radius, cfg)
        join0 = state.pose_of(join_id)
        est_seq, est_nested = _estimate_costs(
            state, lead_route.points, (join0.x, join0.y), join_goal, rdv, cfg)

        if rdv is None or est_seq <= est_nested:
            ok = _run_sequential(run, lead_id, join_id, lead_goal, join_goal,
                                 mono_table, lead_route)
            return NestedOutcome(ok, run.path(), False,
                                 "" if ok else "sequential failed",
                                 est_seq, est_nested)

        ok, reason = _run_nested(run, lead_id, join_id, lead_goal, join_goal,
                                 mono_table, chain_table, lead_route, rdv,
                                 radius)
        if not ok:
            # salvage with plain pushes from wherever execution stopped
            ok = _mono_complete(run, ((lead_id, lead_goal), (join_id, join_goal)),
                                mono_table)
            reason = ("salvaged: " + reason) if ok else reason
        return NestedOutcome(ok, run.path(), True, reason, est_seq, est_nested)
    except _Expired:
        return NestedOutcome(False, run.path(), False, "timeout",
                             math.inf, math.inf)


def _run_sequential(run: _Run, lead_id: int, join_id: int, lead_goal: Pose2,
                    join_goal: Pose2, table: PolicyTable,
                    lead_route: ObjectPath) -> bool:
    ok, _ = _exec_push(run, lead_id, lead_goal, table, route=lead_route)
    if not ok:
        return False
    run.placed = run.placed | {lead_id}
    ok, _ = _exec_push(run, join_id, join_goal, table)
    return ok


def _mono_complete(run: _Run, pairs, table: PolicyTable) -> bool:
    """Finish any not-yet-placed objects with independent pushes."""
    for obj_id, goal in pairs:
        spec = run.scene.object_by_id(obj_id)
        if placed_ok(spec.footprint, run.state.pose_of(obj_id), goal,
                     run.cfg.final_tol_pos, run.cfg.final_tol_ang):
            run.placed = run.placed | {obj_id}
            continue
        ok, _ = _exec_push(run, obj_id, goal, table)
        if not ok:
            return False
        run.placed = run.placed | {obj_id}
    return True


def _form_chain(
    run: _Run,
    lead_id: int,
    join_id: int,
    mono_table: PolicyTable,
    route_pts: Sequence[Tuple[float, float]],
    radius: float,
) -> Optional[List[Tuple[float, float]]]:
    """Build a driving formation at the lead's current position.

    Squares the lead up with the outgoing route tangent, pushes the joiner
    to a staging pose behind it, shoves it into the slot and docks the
    pusher behind the pair.  Returns the straightened remaining route
    (head at the lead), an empty list when no route is left, or None on
    failure.
    """
    cfg = run.cfg
    fpos = run.state.pose_of(lead_id)
    t, _ = project_to_polyline((fpos.x, fpos.y), route_pts)
    params = _waypoint_params(route_pts)
    tail = [p for p, tp in zip(route_pts, params) if tp > t]
    rem_raw = [(fpos.x, fpos.y)] + tail
    if len(rem_raw) < 2 or polyline_length(rem_raw) < 0.02:
        return []
    clear_r = radius + run.scene.ee_radius + 0.002
    remainder = _straighten(run.scene, run.state,
                            frozenset((lead_id, join_id)), rem_raw, clear_r)
    vx, vy = remainder[1][0] - fpos.x, remainder[1][1] - fpos.y
    nv = math.hypot(vx, vy)
    if nv < 1e-9:
        return []
    vx, vy = vx / nv, vy / nv
    heading = math.atan2(vy, vx)

    # square the lead up with the outgoing tangent, otherwise the chain
    # window (trained around aligned formations) never engages
    park_pose = Pose2(fpos.x, fpos.y, heading)
    if not _fine_place(run, lead_id, park_pose, (lead_id,),
                       tol_pos=0.02, tol_ang=math.radians(12.0)):
        run.note("form: lead align failed")
        return None

    # joiner into the slot behind the parked lead, which rides as forbidden
    # so a stray pusher arc cannot spin it.  Precision work happens at a
    # staging pose with elbow room, then a short straight shove closes the
    # gap without any side maneuvering.
    lead_now = run.state.pose_of(lead_id)
    back = 2.0 * radius + 0.01
    stage = Pose2(lead_now.x - (back + 0.03) * vx,
                  lead_now.y - (back + 0.03) * vy, heading)
    saved = run.placed
    run.placed = saved | {lead_id}
    ok, _ = _exec_push(run, join_id, stage, mono_table,
                       tol_pos=0.015, tol_ang=math.radians(14.0))
    if ok:
        ok = _dock(run, (join_id,), heading)
    if ok:
        slot = (lead_now.x - back * vx, lead_now.y - back * vy)
        mode = ModeTag("push", (join_id,))
        for _ in range(12):
            run.check_clock()
            jp = run.state.pose_of(join_id)
            rem = (slot[0] - jp.x) * vx + (slot[1] - jp.y) * vy
            if rem <= 0.005:
                break
            res = run.step(EeMotion(min(rem, cfg.chunk) * vx,
                                    min(rem, cfg.chunk) * vy), mode)
            if isinstance(res, Blocked):
                break  # formation contact reached early
    run.placed = saved
    if not ok:
        run.note("form: rendezvous failed")
        return None
    if not _dock(run, (join_id, lead_id), heading):
        run.note("form: chain dock failed")
        return None
    remainder[0] = (run.state.pose_of(lead_id).x,
                    run.state.pose_of(lead_id).y)
    return remainder


def _run_nested(
    run: _Run,
    lead_id: int,
    join_id: int,
    lead_goal: Pose2,
    join_goal: Pose2,
    mono_table: PolicyTable,
    chain_table: PolicyTable,
    lead_route: ObjectPath,
    rdv: Tuple[int, Pose2, Pose2],
    radius: float,
) -> Tuple[bool, str]:
    cfg = run.cfg
    k, _, _ = rdv
    points = lead_route.points

    run.note(f"nested: rendezvous vertex {k}/{len(points) - 1}")
    # phase 1: lead partway along its route, parked loosely
    if not _track_route(run, (lead_id,), mono_table, None, points[: k + 1],
                        capture_final=cfg.waypoint_tol):
        return False, "lead leg failed"

    # phase 2: form the pair and drive it; when tracking degrades the
    # formation is rebuilt at the current spot and the drive continues,
    # the last stretch before the lead goal stays with the fine controller
    for attempt in range(4):
        remainder = _form_chain(run, lead_id, join_id, mono_table, points,
                                radius)
        if remainder is None:
            return False, "formation failed"
        chain_pts = _truncate_polyline(remainder, 0.06)
        if not remainder or polyline_length(chain_pts) < 0.05:
            break
        if _track_route(run, (join_id, lead_id), chain_table, mono_table,
                        chain_pts, capture_final=cfg.fine_band):
            break
        run.note(f"nested: reform {attempt + 1}")
    else:
        return False, "chain leg failed"

    # phase 4: peel the joiner off to its own goal, then finish the lead.
    # The lead is left unprotected here: peeling out of a touching
    # formation cannot avoid brushing it, and the lead finish below
    # recovers from a shove anyway.
    ok, _ = _exec_push(run, join_id, join_goal, mono_table)
    if not ok:
        return False, "peel failed"
    run.placed = run.placed | {join_id}
    if not _fine_place(run, lead_id, lead_goal, (lead_id,)):
        ok, _ = _exec_push(run, lead_id, lead_goal, mono_table)
        if not ok:
            return False, "lead finish failed"
    run.placed = run.placed | {lead_id}
    return True, ""
