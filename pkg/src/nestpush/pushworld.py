"""Deterministic quasi-static push physics.

The pusher is a disk that translates in small substeps.  When it penetrates
an object, the object yields with a twist predicted by an ellipsoidal
limit-surface model of the support friction: the force at the contact maps
linearly to the object's velocity, sticking when the required force lies
inside the Coulomb cone at the contact and sliding along a cone edge
otherwise.  A pushed object can in turn push further objects within the same
substep, which is how nested chains move.  Placed objects and static
obstacles are immovable; driving into one aborts the motion.

All of this is pure float arithmetic in a fixed order, so a propagation is
bit-for-bit reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, List, Optional, Tuple, Union

import numpy as np

from .geometry import Pose2, _k_closest_on_rect, _k_contact, wrap_angle
from .world import Scene, WorldState

# Penetrations below this depth are treated as resting contact.
_PEN_TOL = 1e-12
# Gap left between bodies after resolving a contact, keeps states collision-free.
_SEPARATION_BIAS = 1e-9
# Frozen-geometry push steps have first-order truncation error, so substeps
# shrink by _CONTACT_REFINE while anything is within _REFINE_BAND substeps,
# but never below _REFINE_FLOOR: steps that fine need no further splitting.
_CONTACT_REFINE = 4
_REFINE_BAND = 2.5
_REFINE_FLOOR = 1e-4
# Gaps this small count as touching; skips the impact-time bisection while
# contact is sustained across substeps.
_TOUCH_EPS = 1e-7


@dataclass(frozen=True)
class EeMotion:
    """One pusher micro-action: a translation plus a heading increment."""

    dx: float
    dy: float
    dtheta: float = 0.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.dx) and math.isfinite(self.dy) and math.isfinite(self.dtheta)):
            raise ValueError("non-finite pusher motion")

    @property
    def translation(self) -> float:
        return math.hypot(self.dx, self.dy)


@dataclass(frozen=True)
class PhysicsParams:
    """Runtime physics parameters, possibly perturbed copies of the scene's.

    contact_friction and pressure_radius are per-object maps so that noise
    can vary them without touching the scene.
    """

    contact_friction: Dict[int, float]
    pressure_radius: Dict[int, float]
    integration_step: float = 1e-3
    max_ee_step: float = 0.02

    @staticmethod
    def from_scene(scene: Scene, integration_step: float = 1e-3, max_ee_step: float = 0.02) -> "PhysicsParams":
        return PhysicsParams(
            contact_friction={o.id: o.contact_friction for o in scene.objects},
            pressure_radius={o.id: o.pressure_radius for o in scene.objects},
            integration_step=integration_step,
            max_ee_step=max_ee_step,
        )


@dataclass(frozen=True)
class NoiseSpec:
    """Execution noise model.

    param_rel_sigma is the log-sigma of multiplicative lognormal noise on
    contact friction and pressure radius; pose sigmas are additive Gaussian
    noise on object positions (per axis, meters) and headings (radians).
    """

    param_rel_sigma: float = 0.0
    pose_pos_sigma: float = 0.0
    pose_ang_sigma: float = 0.0

    @property
    def is_zero(self) -> bool:
        return self.param_rel_sigma == 0.0 and self.pose_pos_sigma == 0.0 and self.pose_ang_sigma == 0.0


@dataclass(frozen=True)
class Blocked:
    """Motion rejected: an immovable body was in the way.

    fraction is how much of the requested motion completed before the block;
    blocking_id is the offending object id, or None when a static obstacle
    (index in blocking_static) blocked.
    """

    fraction: float
    blocking_id: Optional[int] = None
    blocking_static: Optional[int] = None


def perturb(
    params: PhysicsParams,
    s: WorldState,
    noise: NoiseSpec,
    rng: np.random.Generator,
) -> Tuple[PhysicsParams, WorldState]:
    """Sample a noisy copy of physics parameters and object poses.

    Friction and pressure radius get multiplicative lognormal noise (unit
    median), poses additive Gaussian noise.  All-zero noise returns inputs
    unchanged, bit for bit.  Draws are consumed in a fixed order keyed by
    sorted object id.
    """
    if noise.is_zero:
        return params, s
    mu = dict(params.contact_friction)
    c = dict(params.pressure_radius)
    poses = dict(s.object_poses)
    for obj_id in sorted(mu.keys()):
        if noise.param_rel_sigma > 0.0:
            mu[obj_id] = mu[obj_id] * math.exp(noise.param_rel_sigma * rng.standard_normal())
            c[obj_id] = c[obj_id] * math.exp(noise.param_rel_sigma * rng.standard_normal())
    for obj_id in sorted(poses.keys()):
        p = poses[obj_id]
        x, y, th = p.x, p.y, p.theta
        if noise.pose_pos_sigma > 0.0:
            x += noise.pose_pos_sigma * rng.standard_normal()
            y += noise.pose_pos_sigma * rng.standard_normal()
        if noise.pose_ang_sigma > 0.0:
            th += noise.pose_ang_sigma * rng.standard_normal()
        poses[obj_id] = Pose2(x, y, th)
    return (
        replace(params, contact_friction=mu, pressure_radius=c),
        WorldState(s.ee, poses),
    )


# ---------------------------------------------------------------------------
# Internal body bookkeeping for the stepper.  Bodies live as mutable lists
# [x, y, theta, cos, sin]; shape tuples are rebuilt from them on demand.
# ---------------------------------------------------------------------------


class _Body:
    __slots__ = ("obj_id", "kind", "hw", "hh", "radius", "x", "y", "theta", "c", "s", "vx", "vy", "w", "moved", "circum")

    def __init__(self, obj_id, kind, hw, hh, radius, pose: Pose2):
        self.obj_id = obj_id
        self.kind = kind
        self.hw = hw
        self.hh = hh
        self.radius = radius
        self.x = pose.x
        self.y = pose.y
        self.theta = pose.theta
        self.c = math.cos(pose.theta)
        self.s = math.sin(pose.theta)
        self.vx = 0.0  # accumulated twist this substep
        self.vy = 0.0
        self.w = 0.0
        self.moved = False
        self.circum = radius if kind == "disk" else math.hypot(hw, hh)

    def tuple(self):
        if self.kind == "disk":
            return ("disk", self.x, self.y, self.radius)
        return ("rect", self.x, self.y, self.c, self.s, self.hw, self.hh)

    def apply_twist(self, vx: float, vy: float, w: float) -> None:
        self.x += vx
        self.y += vy
        if w != 0.0:
            self.theta += w
            self.c = math.cos(self.theta)
            self.s = math.sin(self.theta)
        self.vx += vx
        self.vy += vy
        self.w += w
        self.moved = True


def _solve_push_twist(
    rx: float, ry: float, nx: float, ny: float,
    ux: float, uy: float, mu: float, c_pressure: float,
) -> Optional[Tuple[float, float, float]]:
    """Quasi-static twist of an object pushed at one contact.

    Everything is in the object's body frame with the origin at its center:
    r is the contact point, n the push direction (into the object), u the
    pusher's displacement at the contact.  Returns (vx, vy, w), the object
    displacement twist for this pusher displacement, or None when the pusher
    is not actually advancing into the surface.

    Limit-surface model: force f maps to velocity (f, (r x f)/c^2).  Sticking
    requires the solved f inside the friction cone; otherwise the force lies
    on the violated cone edge and the contact point only tracks the pusher
    along the normal.
    """
    un = ux * nx + uy * ny
    if un <= _PEN_TOL:
        return None
    beta = 1.0 / (c_pressure * c_pressure)
    # Sticking: solve M f = u with M = I + beta * rperp rperp^T.
    a11 = 1.0 + beta * ry * ry
    a12 = -beta * rx * ry
    a22 = 1.0 + beta * rx * rx
    det = a11 * a22 - a12 * a12
    fx = (a22 * ux - a12 * uy) / det
    fy = (a11 * uy - a12 * ux) / det
    fn = fx * nx + fy * ny
    tx, ty = -ny, nx
    ft = fx * tx + fy * ty
    if fn >= 0.0 and abs(ft) <= mu * fn + _PEN_TOL:
        w = beta * (rx * fy - ry * fx)
        return (fx, fy, w)
    # Sliding: force on the cone edge nearer the sticking solution.
    sgn = 1.0 if ft >= 0.0 else -1.0
    ex = nx + mu * sgn * tx
    ey = ny + mu * sgn * ty
    we = beta * (rx * ey - ry * ex)
    # Normal advance of the contact point per unit force magnitude.
    adv = (ex - we * ry) * nx + (ey + we * rx) * ny
    if adv <= _PEN_TOL:
        return None
    lam = un / adv
    return (lam * ex, lam * ey, lam * we)


_MAX_PASSES_FACTOR = 4


def _ee_gap_to_body(x: float, y: float, ee_r: float, b: "_Body"):
    """Exact gap between the pusher disk at (x, y) and a body.

    Returns (gap, px, py, nx, ny): closest boundary point of the body and the
    unit normal pointing from the pusher into the body.  gap < 0 means
    penetration.  Well defined at touch, which is what the time-of-impact
    stepping needs: the normal field of the inflated body is continuous.
    """
    if b.kind == "disk":
        dx, dy = b.x - x, b.y - y
        d = math.hypot(dx, dy)
        if d < 1e-12:
            return (-(ee_r + b.radius), b.x, b.y, 1.0, 0.0)
        nx, ny = dx / d, dy / d
        return (d - ee_r - b.radius, b.x - nx * b.radius, b.y - ny * b.radius, nx, ny)
    px, py, dist = _k_closest_on_rect(x, y, b.x, b.y, b.c, b.s, b.hw, b.hh)
    if dist > 1e-12:
        inv = 1.0 / dist
        return (dist - ee_r, px, py, (px - x) * inv, (py - y) * inv)
    # Pusher center inside the rectangle; push on through the nearest face.
    nx, ny = x - px, y - py
    nrm = math.hypot(nx, ny)
    if nrm < 1e-12:
        return (dist - ee_r, px, py, b.c, b.s)
    inv = 1.0 / nrm
    return (dist - ee_r, px, py, -nx * inv, -ny * inv)


def propagate(
    scene: Scene,
    s: WorldState,
    dq: EeMotion,
    params: PhysicsParams,
    forbidden: FrozenSet[int] = frozenset(),
) -> Union[WorldState, Blocked]:
    """Advance the world by one pusher motion.

    The translation is split into substeps no longer than
    params.integration_step.  Within a substep the pusher advances to its
    first touch, the touched object yields by the limit-surface twist for the
    remaining displacement, and any second-order residue (rotation overlap,
    chain contacts) is resolved by a penetration cascade.  Objects listed in
    ``forbidden`` and all static obstacles are immovable: any motion that
    would displace or penetrate one returns Blocked with the fraction of dq
    achieved.  Objects not in the chain are still movable and get pushed if
    hit.
    """
    if dq.translation > params.max_ee_step + 1e-12:
        raise ValueError(f"pusher step {dq.translation:.4g} exceeds max {params.max_ee_step:.4g}")

    bodies: List[_Body] = []
    for spec in scene.objects:
        pose = s.object_poses.get(spec.id)
        if pose is None:
            continue
        fp = spec.footprint
        if fp.kind == "disk":
            bodies.append(_Body(spec.id, "disk", 0.0, 0.0, fp.radius, pose))
        else:
            bodies.append(_Body(spec.id, "rect", 0.5 * fp.width, 0.5 * fp.height, 0.0, pose))
    bodies.sort(key=lambda b: b.obj_id)
    statics = [
        _Body(None, "disk" if fp.kind == "disk" else "rect",
              0.5 * fp.width, 0.5 * fp.height, fp.radius, pose)
        for fp, pose in scene.statics
    ]
    mu_map = params.contact_friction
    c_map = params.pressure_radius

    ee_r = scene.ee_radius
    ex, ey, eth = s.ee.x, s.ee.y, s.ee.theta

    n_sub = max(1, math.ceil(dq.translation / params.integration_step - 1e-12))
    base_h = 1.0 / n_sub
    base_len = dq.translation * base_h

    movable = [b for b in bodies if b.obj_id not in forbidden]

    def ee_blocker_hit(x: float, y: float):
        """First immovable body overlapping the pusher disk at (x, y)."""
        for idx, st in enumerate(statics):
            if math.hypot(st.x - x, st.y - y) - st.circum - ee_r >= 0.0:
                continue
            if _k_contact(("disk", x, y, ee_r), st.tuple()) is not None:
                return (None, idx)
        for b in bodies:
            if b.obj_id in forbidden:
                if math.hypot(b.x - x, b.y - y) - b.circum - ee_r >= 0.0:
                    continue
                if _k_contact(("disk", x, y, ee_r), b.tuple()) is not None:
                    return (b.obj_id, None)
        return None

    def min_gap_all(x: float, y: float) -> float:
        """Smallest pusher gap over every body, movable or not."""
        g = math.inf
        for b in bodies:
            if math.hypot(b.x - x, b.y - y) - b.circum - ee_r >= g:
                continue
            gb = _ee_gap_to_body(x, y, ee_r, b)[0]
            if gb < g:
                g = gb
        for st in statics:
            if math.hypot(st.x - x, st.y - y) - st.circum - ee_r >= g:
                continue
            gb = _ee_gap_to_body(x, y, ee_r, st)[0]
            if gb < g:
                g = gb
        return g

    refined_len = min(base_len, max(base_len / _CONTACT_REFINE, _REFINE_FLOOR))
    refined_h = base_h * (refined_len / base_len) if base_len > 0.0 else base_h

    pos_frac = 0.0
    while pos_frac < 1.0 - 1e-12:
        h = base_h
        if base_len > 0.0:
            g = min_gap_all(ex, ey)
            if g >= _REFINE_BAND * base_len:
                # Nothing reachable for several substeps: free motion is a
                # plain translation, so cover those substeps in one chunk.
                skip = math.floor((g - _REFINE_BAND * base_len) / base_len)
                if skip >= 2:
                    h = min(1.0 - pos_frac, base_h * skip)
                    ex += dq.dx * h
                    ey += dq.dy * h
                    eth = wrap_angle(eth + dq.dtheta * h)
                    pos_frac += h
                    continue
            elif refined_h < base_h:
                # Refine the substep near contact: truncation error of the
                # frozen-geometry push step is first order in the step length.
                h = refined_h
        if pos_frac + h > 1.0:
            h = 1.0 - pos_frac
        ux_step = dq.dx * h
        uy_step = dq.dy * h
        step_len = dq.translation * h

        nx_pos = ex + ux_step
        ny_pos = ey + uy_step
        hit = ee_blocker_hit(nx_pos, ny_pos) if step_len > 0.0 else None
        if hit is not None:
            # Bisect the substep for the achieved fraction.
            lo, hi = 0.0, 1.0
            for _ in range(30):
                mid = 0.5 * (lo + hi)
                if ee_blocker_hit(ex + ux_step * mid, ey + uy_step * mid) is None:
                    lo = mid
                else:
                    hi = mid
            return Blocked(pos_frac + lo * h, hit[0], hit[1])

        eth = wrap_angle(eth + dq.dtheta * h)
        if step_len == 0.0:
            ex, ey = nx_pos, ny_pos
            pos_frac += h
            continue

        for b in bodies:
            b.vx = b.vy = b.w = 0.0
            b.moved = False

        # Time of impact against movable objects: advance to first touch,
        # then push the touched object with the remaining displacement using
        # the touch-point geometry.
        candidates = [
            b for b in movable
            if math.hypot(b.x - ex, b.y - ey) - b.circum - ee_r < step_len + 1e-9
        ]
        touched = None
        if candidates:
            geom = None
            best = math.inf
            for b in candidates:
                gb = _ee_gap_to_body(ex, ey, ee_r, b)
                if gb[0] < best:
                    best = gb[0]
                    geom = gb
                    touched = b
            if best > _TOUCH_EPS:
                # Not in contact yet: look for a first impact this substep.
                touched = None
                end_gap = math.inf
                for b in candidates:
                    g = _ee_gap_to_body(nx_pos, ny_pos, ee_r, b)[0]
                    if g < end_gap:
                        end_gap = g
                if end_gap < 0.0:
                    lo, hi = 0.0, 1.0
                    for _ in range(40):
                        mid = 0.5 * (lo + hi)
                        mg = min(
                            _ee_gap_to_body(ex + ux_step * mid, ey + uy_step * mid, ee_r, b)[0]
                            for b in candidates
                        )
                        if mg > 0.0:
                            lo = mid
                        else:
                            hi = mid
                    tx_pos = ex + ux_step * lo
                    ty_pos = ey + uy_step * lo
                    best = math.inf
                    for b in candidates:
                        gb = _ee_gap_to_body(tx_pos, ty_pos, ee_r, b)
                        if gb[0] < best:
                            best = gb[0]
                            geom = gb
                            touched = b
                    rem = 1.0 - lo
            else:
                # Sustained contact from the previous substep.
                rem = 1.0
            if touched is not None:
                gap, px, py, nxw, nyw = geom
                ucx, ucy = ux_step * rem, uy_step * rem
                un_w = ucx * nxw + ucy * nyw
                if un_w > _PEN_TOL:
                    c_, s_ = touched.c, touched.s
                    rx_w, ry_w = px - touched.x, py - touched.y
                    rx = c_ * rx_w + s_ * ry_w
                    ry = -s_ * rx_w + c_ * ry_w
                    nx_b = c_ * nxw + s_ * nyw
                    ny_b = -s_ * nxw + c_ * nyw
                    ub_x = c_ * ucx + s_ * ucy
                    ub_y = -s_ * ucx + c_ * ucy
                    twist = _solve_push_twist(
                        rx, ry, nx_b, ny_b, ub_x, ub_y,
                        mu_map[touched.obj_id], c_map[touched.obj_id],
                    )
                    if twist is not None:
                        vbx, vby, w = twist
                        touched.apply_twist(c_ * vbx - s_ * vby,
                                            s_ * vbx + c_ * vby, w)
        ex, ey = nx_pos, ny_pos

        if touched is None and pos_frac > 0.0:
            # Nothing was hit and nothing moved: no new penetrations.  The
            # first substep still runs the cascade to clean up any overlap
            # present in the input state.
            pos_frac += h
            continue

        # Residual penetration cascade: rotation overlap at the primary
        # contact and anything the touched object ran into.
        max_passes = _MAX_PASSES_FACTOR * (len(bodies) + 2)
        for _ in range(max_passes):
            deepest = None
            deepest_depth = _PEN_TOL
            # Pusher against movable objects.
            for b in bodies:
                if b.obj_id in forbidden:
                    continue
                if math.hypot(b.x - ex, b.y - ey) - b.circum - ee_r >= deepest_depth:
                    continue
                hit_c = _k_contact(("disk", ex, ey, ee_r), b.tuple())
                if hit_c is not None and hit_c[0] > deepest_depth:
                    deepest_depth = hit_c[0]
                    deepest = ("ee", None, b, hit_c)
            # Moved objects against everything else.
            for a in bodies:
                if not a.moved:
                    continue
                at = a.tuple()
                for b in bodies:
                    if b is a:
                        continue
                    if math.hypot(b.x - a.x, b.y - a.y) - a.circum - b.circum >= deepest_depth:
                        continue
                    hit_c = _k_contact(at, b.tuple())
                    if hit_c is not None and hit_c[0] > deepest_depth:
                        deepest_depth = hit_c[0]
                        deepest = ("obj", a, b, hit_c)
                for idx, st in enumerate(statics):
                    if math.hypot(st.x - a.x, st.y - a.y) - a.circum - st.circum >= deepest_depth:
                        continue
                    if _k_contact(at, st.tuple()) is not None:
                        return Blocked(pos_frac, None, idx)
            if deepest is None:
                break
            kind, pusher, target, (depth, px, py, nxw, nyw) = deepest
            if target.obj_id in forbidden:
                return Blocked(pos_frac, target.obj_id, None)
            # Pusher displacement at the contact point this substep.
            if kind == "ee":
                ucx, ucy = ux_step, uy_step
            else:
                ucx = pusher.vx - pusher.w * (py - pusher.y)
                ucy = pusher.vy + pusher.w * (px - pusher.x)
            # Into the target's body frame.
            c_, s_ = target.c, target.s
            rx_w, ry_w = px - target.x, py - target.y
            rx = c_ * rx_w + s_ * ry_w
            ry = -s_ * rx_w + c_ * ry_w
            nx_b = c_ * nxw + s_ * nyw
            ny_b = -s_ * nxw + c_ * nyw
            ub_x = c_ * ucx + s_ * ucy
            ub_y = -s_ * ucx + c_ * ucy
            mu = mu_map[target.obj_id]
            if kind == "obj":
                mu = math.sqrt(mu * mu_map[pusher.obj_id])
            twist = _solve_push_twist(rx, ry, nx_b, ny_b, ub_x, ub_y, mu, c_map[target.obj_id])
            if twist is None:
                # Contact without normal drive (e.g. rotation residue):
                # project the target out along the contact normal.
                target.apply_twist(nxw * (depth + _SEPARATION_BIAS), nyw * (depth + _SEPARATION_BIAS), 0.0)
                continue
            vbx, vby, w = twist
            # Normal advance of the target's contact point under this twist
            # equals the pusher's normal advance by construction; rescale so
            # the accumulated penetration is resolved exactly.
            un = ub_x * nx_b + ub_y * ny_b
            scale = (depth + _SEPARATION_BIAS) / un
            vwx = c_ * vbx - s_ * vby
            vwy = s_ * vbx + c_ * vby
            target.apply_twist(vwx * scale, vwy * scale, w * scale)

        pos_frac += h

    poses = {b.obj_id: Pose2(b.x, b.y, b.theta) for b in bodies}
    return WorldState(Pose2(ex, ey, eth), poses)
