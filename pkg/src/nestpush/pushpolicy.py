"""Offline pushing policy: a discretized MDP over pusher-relative states.

States describe object poses relative to the pusher in a travel-aligned
frame, one window ("slot") per pushed object plus a pusher-heading bin.
Transitions are Monte-Carlo estimates from the quasi-static contact model
under parameter and pose noise; value iteration with a constant step cost
yields a policy that recovers a good pushing formation from anywhere in the
window.  States with every slot in its contact pocket are terminal: there
the executor simply drives forward.

The trained table is dense over the discrete state space and serializes to
a little-endian binary file with magic "NPPT".
"""

from __future__ import annotations

import math
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .geometry import Footprint, Pose2, _k_closest_on_rect, angle_diff, wrap_angle
from .seeding import rng_stream
from .world import ObjectSpec, Scene, WorldState, is_valid
from .pushworld import Blocked, EeMotion, NoiseSpec, PhysicsParams, perturb, propagate

ABORT_ACTION = 0xFFFF
NPPT_MAGIC = b"NPPT"
NPPT_VERSION = 1


# ---------------------------------------------------------------------------
# Discretization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """Pusher-relative window discretization.

    Positions are binned into ``pos_cells`` centred cells of size
    ``2 * pos_extent / pos_cells`` per axis, offset by the per-slot window
    centre.  Object and pusher headings are binned round-to-nearest into
    ``ang_bins`` and ``ee_bins`` bins of the full circle.
    """

    pos_extent: float = 0.12
    pos_cells: int = 21
    ang_bins: int = 12
    ee_bins: int = 12
    slot_centers: Tuple[Tuple[float, float], ...] = ((0.0, 0.0),)

    def __post_init__(self):
        if self.pos_cells < 3 or self.pos_cells % 2 == 0:
            raise ValueError("pos_cells must be odd and >= 3")
        if self.pos_extent <= 0 or self.ang_bins < 1 or self.ee_bins < 1:
            raise ValueError("bad grid parameters")
        if not self.slot_centers:
            raise ValueError("at least one slot is required")

    @property
    def cell_size(self) -> float:
        return 2.0 * self.pos_extent / self.pos_cells

    @property
    def n_slots(self) -> int:
        return len(self.slot_centers)

    @property
    def slot_states(self) -> int:
        return self.pos_cells * self.pos_cells * self.ang_bins

    @property
    def full_states(self) -> int:
        return self.slot_states ** self.n_slots * self.ee_bins

    def bin_pos(self, v: float) -> Optional[int]:
        i = self.pos_cells // 2 + math.floor(v / self.cell_size + 0.5)
        if 0 <= i < self.pos_cells:
            return i
        return None

    def cell_center(self, i: int) -> float:
        return (i - self.pos_cells // 2) * self.cell_size

    def bin_angle(self, theta: float) -> int:
        bw = 2.0 * math.pi / self.ang_bins
        return int(math.floor(theta / bw + 0.5)) % self.ang_bins

    def angle_center(self, b: int) -> float:
        return wrap_angle(b * 2.0 * math.pi / self.ang_bins)

    def bin_ee(self, theta: float) -> int:
        bw = 2.0 * math.pi / self.ee_bins
        return int(math.floor(theta / bw + 0.5)) % self.ee_bins

    def slot_index(self, cx: int, cy: int, ab: int) -> int:
        return (cx * self.pos_cells + cy) * self.ang_bins + ab

    def slot_unindex(self, idx: int) -> Tuple[int, int, int]:
        ab = idx % self.ang_bins
        idx //= self.ang_bins
        return idx // self.pos_cells, idx % self.pos_cells, ab

    def discretize_slot(self, slot: int, rel_x: float, rel_y: float,
                        rel_theta: float) -> Optional[int]:
        """Slot-state id for a pusher-relative object pose, None if outside."""
        sx, sy = self.slot_centers[slot]
        cx = self.bin_pos(rel_x - sx)
        cy = self.bin_pos(rel_y - sy)
        if cx is None or cy is None:
            return None
        return self.slot_index(cx, cy, self.bin_angle(rel_theta))

    def full_index(self, slot_ids: Sequence[int], ee_bin: int) -> int:
        idx = 0
        for sid in slot_ids:
            idx = idx * self.slot_states + sid
        return idx * self.ee_bins + ee_bin


def chain_grid(spec: ObjectSpec, ee_radius: float, n_slots: int = 2) -> GridSpec:
    """Window layout for pushing a line of identical objects.

    Slot 0 sits where the rear object rides against the pusher; following
    slots are one object length further ahead.
    """
    fp = spec.footprint
    lead = 0.5 * fp.width if fp.kind == "rectangle" else fp.radius
    step = fp.width if fp.kind == "rectangle" else 2.0 * fp.radius
    first = lead + ee_radius
    centers = tuple((first + k * step, 0.0) for k in range(n_slots))
    return GridSpec(pos_extent=0.054, pos_cells=9, ang_bins=6, ee_bins=1,
                    slot_centers=centers)


# ---------------------------------------------------------------------------
# Actions
# ---------------------------------------------------------------------------


def default_actions(step: float = 0.01, rot: float = math.radians(5.0)) -> Tuple[EeMotion, ...]:
    """Eight compass translations plus two in-place rotations.

    Expressed in the travel frame where +x is the direction of travel; the
    forward push comes first so cost ties resolve towards it.
    """
    acts = []
    for k in range(8):
        a = k * math.pi / 4.0
        acts.append(EeMotion(step * math.cos(a), step * math.sin(a), 0.0))
    acts.append(EeMotion(0.0, 0.0, rot))
    acts.append(EeMotion(0.0, 0.0, -rot))
    return tuple(acts)


def rotate_motion(m: EeMotion, theta: float) -> EeMotion:
    c, s = math.cos(theta), math.sin(theta)
    return EeMotion(c * m.dx - s * m.dy, s * m.dx + c * m.dy, m.dtheta)


# ---------------------------------------------------------------------------
# Rewards and terminals
# ---------------------------------------------------------------------------


def pocket_slot_states(grid: GridSpec, fp: Footprint, ee_radius: float,
                       lateral_cells: int = 1) -> FrozenSet[int]:
    """Slot states that count as a good pushing contact ("the pocket").

    The object sits directly ahead of the pusher at contact distance, within
    ``lateral_cells`` of the window centreline, aligned with the travel
    direction.  Rectangles admit the 180-degree twin; disks any heading.
    """
    if fp.kind == "rectangle":
        contact_x = 0.5 * fp.width + ee_radius
        bins = {0}
        half_turn = grid.ang_bins // 2
        if grid.ang_bins % 2 == 0:
            bins.add(half_turn)
    else:
        contact_x = fp.radius + ee_radius
        bins = set(range(grid.ang_bins))
    sx, _ = grid.slot_centers[0]
    # Columns are shared across slots: all slot centres sit at the same
    # relative contact geometry by construction (chain_grid).
    col = grid.bin_pos(contact_x - sx) if grid.n_slots == 1 else grid.bin_pos(0.0)
    if col is None:
        raise ValueError("contact column outside the window")
    mid = grid.pos_cells // 2
    out = set()
    for dy in range(-lateral_cells, lateral_cells + 1):
        cy = mid + dy
        if 0 <= cy < grid.pos_cells:
            for ab in bins:
                out.add(grid.slot_index(col, cy, ab))
    return frozenset(out)


@dataclass(frozen=True)
class RewardSpec:
    """Constant step cost until a terminal formation is reached."""

    step_reward: float = -1.0
    gamma: float = 0.98
    pocket: Tuple[FrozenSet[int], ...] = (frozenset(),)

    @property
    def out_value(self) -> float:
        # Leaving the window forfeits the episode: perpetual step cost.
        return self.step_reward / (1.0 - self.gamma)


# ---------------------------------------------------------------------------
# Transition container and value iteration
# ---------------------------------------------------------------------------


@dataclass
class TransitionModel:
    """Sparse (state, action) -> categorical next-state distributions."""

    n_states: int
    n_actions: int
    entries: Dict[Tuple[int, int], Tuple[Tuple[int, ...], Tuple[float, ...]]] = field(
        default_factory=dict)

    def add(self, s: int, a: int, nexts: Sequence[int], probs: Sequence[float]) -> None:
        total = sum(probs)
        if not math.isclose(total, 1.0, rel_tol=1e-9, abs_tol=1e-9):
            raise ValueError(f"probabilities sum to {total}")
        self.entries[(s, a)] = (tuple(int(v) for v in nexts),
                                tuple(float(p) for p in probs))


def value_iteration(
    model: TransitionModel,
    step_reward: float,
    gamma: float,
    fixed_values: Dict[int, float],
    tol: float = 1e-6,
    max_sweeps: int = 100000,
) -> Tuple[np.ndarray, np.ndarray, List[float]]:
    """Solve the MDP; returns values, greedy actions, residual history.

    ``fixed_values`` pins absorbing states (terminals, out-of-window).  Ties
    between equally good actions resolve to the lowest action index.  States
    without any modelled action keep value -inf and the abort action.
    """
    S, A = model.n_states, model.n_actions
    mats = []
    masks = []
    for a in range(A):
        rows, cols, vals = [], [], []
        mask = np.zeros(S, dtype=bool)
        for (s, aa), (nxt, pr) in model.entries.items():
            if aa != a:
                continue
            mask[s] = True
            rows.extend([s] * len(nxt))
            cols.extend(nxt)
            vals.extend(pr)
        mats.append(sp.csr_matrix((vals, (rows, cols)), shape=(S, S)))
        masks.append(mask)

    fixed_idx = np.fromiter(fixed_values.keys(), dtype=np.int64, count=len(fixed_values))
    fixed_val = np.fromiter(fixed_values.values(), dtype=np.float64, count=len(fixed_values))
    free = np.ones(S, dtype=bool)
    if len(fixed_idx):
        free[fixed_idx] = False
    # States without any modelled action sit at -inf with the abort action.
    # They must not appear as transition targets of live states.
    dead = np.ones(S, dtype=bool)
    for mask in masks:
        dead &= ~mask
    if len(fixed_idx):
        dead[fixed_idx] = False
    free &= ~dead
    neg_masks = [~m for m in masks]

    V = np.zeros(S)
    V[dead] = -np.inf
    if len(fixed_idx):
        V[fixed_idx] = fixed_val
    residuals: List[float] = []
    Q = np.empty((S, A))
    for _ in range(max_sweeps):
        for a in range(A):
            Q[:, a] = step_reward + gamma * mats[a].dot(V)
            Q[neg_masks[a], a] = -np.inf
        V_new = Q.max(axis=1)
        if len(fixed_idx):
            V_new[fixed_idx] = fixed_val
        resid = float(np.max(np.abs(V_new[free] - V[free]))) if free.any() else 0.0
        residuals.append(resid)
        V = V_new
        if resid <= tol:
            break
    else:
        raise RuntimeError(f"value iteration did not converge, residual {residuals[-1]:.3g}")

    pi = np.where(np.isfinite(V), Q.argmax(axis=1), ABORT_ACTION).astype(np.uint32)
    pi[~np.isfinite(V)] = ABORT_ACTION
    return V, pi, residuals


# ---------------------------------------------------------------------------
# Monte-Carlo transition estimation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MdpConfig:
    """Training knobs: discount, sampling effort, robustness noise."""

    gamma: float = 0.98
    step_reward: float = -1.0
    samples_per_sa: int = 32
    tol: float = 1e-6
    max_sweeps: int = 100000
    noise: NoiseSpec = NoiseSpec(param_rel_sigma=0.1, pose_pos_sigma=0.002,
                                 pose_ang_sigma=0.02)
    closure_cap: int = 8000
    seed: int = 0


def _micro_scene(specs: Sequence[ObjectSpec], ee_radius: float) -> Scene:
    return Scene(statics=(), objects=tuple(specs), workspace=(-5, -5, 5, 5),
                 ee_radius=ee_radius)


def _exact_gap(fp: Footprint, px: float, py: float, theta: float,
               ee_radius: float) -> float:
    """Pusher-at-origin gap to an object footprint at a relative pose."""
    if fp.kind == "disk":
        return math.hypot(px, py) - fp.radius - ee_radius
    c, s = math.cos(theta), math.sin(theta)
    _, _, dist = _k_closest_on_rect(0.0, 0.0, px, py, c, s,
                                    0.5 * fp.width, 0.5 * fp.height)
    return dist - ee_radius


def estimate_transitions_single(
    spec: ObjectSpec,
    grid: GridSpec,
    actions: Sequence[EeMotion],
    cfg: MdpConfig,
    ee_radius: float = 0.01,
) -> TransitionModel:
    """Transitions for one object in the window, pusher heading collapsed.

    The pusher disk has no orientation coupling, so the model is built on
    slot states only and later broadcast across pusher-heading bins.  State
    id ``grid.slot_states`` is the out-of-window absorber.  Cells where the
    object cannot be placed without overlap are unreachable and map to the
    absorber under every action.

    A contact-shell test skips physics wherever the pusher cannot possibly
    reach the object within one action, including noise margins: there the
    object stays put and only the relative shift is sampled.
    """
    if grid.n_slots != 1:
        raise ValueError("single-object estimation needs a one-slot grid")
    S1 = grid.slot_states
    OUT = S1
    model = TransitionModel(S1 + 1, len(actions))
    scene = _micro_scene([spec], ee_radius)
    params = PhysicsParams.from_scene(scene)
    noise = cfg.noise
    fp = spec.footprint
    cell = grid.cell_size
    sx, sy = grid.slot_centers[0]
    K = cfg.samples_per_sa
    # Margin covering intra-cell spread, pose noise, and binning slack.
    slack = 0.5 * cell * math.sqrt(2.0) + 3.0 * noise.pose_pos_sigma + 1e-6
    n_rot_shift = fp.circumradius  # rotation sweep bound per radian

    for s_idx in range(S1):
        cx, cy, ab = grid.slot_unindex(s_idx)
        cxc = grid.cell_center(cx) + sx
        cyc = grid.cell_center(cy) + sy
        thc = grid.angle_center(ab)
        base_gap = _exact_gap(fp, cxc, cyc, thc, ee_radius)
        ang_slack = (0.5 * 2 * math.pi / grid.ang_bins + 3 * noise.pose_ang_sigma)
        gap_lb = base_gap - slack - ang_slack * n_rot_shift

        for a_idx, act in enumerate(actions):
            rng = rng_stream(cfg.seed, 1, s_idx, a_idx)
            ux, uy = act.dx, act.dy
            alen = math.hypot(ux, uy)
            if alen == 0.0:
                # In-place pusher rotation: a disk cannot torque anything.
                model.add(s_idx, a_idx, [s_idx], [1.0])
                continue
            counts: Dict[int, int] = {}
            if gap_lb > alen:
                # No contact reachable: object static, window shifts.
                rel_x = cxc + rng.uniform(-0.5, 0.5, K) * cell \
                    + rng.normal(0.0, noise.pose_pos_sigma, K)
                rel_y = cyc + rng.uniform(-0.5, 0.5, K) * cell \
                    + rng.normal(0.0, noise.pose_pos_sigma, K)
                rel_t = thc + rng.uniform(-0.5, 0.5, K) * (2 * math.pi / grid.ang_bins) \
                    + rng.normal(0.0, noise.pose_ang_sigma, K)
                for j in range(K):
                    nxt = grid.discretize_slot(0, rel_x[j] - ux, rel_y[j] - uy, rel_t[j])
                    counts[OUT if nxt is None else nxt] = \
                        counts.get(OUT if nxt is None else nxt, 0) + 1
            else:
                got = 0
                tries = 0
                while got < K and tries < 4 * K:
                    tries += 1
                    px = cxc + rng.uniform(-0.5, 0.5) * cell
                    py = cyc + rng.uniform(-0.5, 0.5) * cell
                    pt = thc + rng.uniform(-0.5, 0.5) * (2 * math.pi / grid.ang_bins)
                    if _exact_gap(fp, px, py, pt, ee_radius) <= 0.0:
                        continue
                    got += 1
                    s0 = WorldState(Pose2(0.0, 0.0, 0.0), {spec.id: Pose2(px, py, pt)})
                    p2, s2 = perturb(params, s0, noise, rng)
                    if _exact_gap(fp, s2.object_poses[spec.id].x,
                                  s2.object_poses[spec.id].y,
                                  s2.object_poses[spec.id].theta, ee_radius) <= 0.0:
                        continue  # noise pushed it into overlap, resample
                    res = propagate(scene, s2, act, p2)
                    if isinstance(res, Blocked):
                        continue
                    o = res.object_poses[spec.id]
                    nxt = grid.discretize_slot(0, o.x - res.ee.x, o.y - res.ee.y, o.theta)
                    counts[OUT if nxt is None else nxt] = \
                        counts.get(OUT if nxt is None else nxt, 0) + 1
                if not counts:
                    # Cell volume is unplaceable: unreachable state.
                    counts[OUT] = 1
            total = sum(counts.values())
            items = sorted(counts.items())
            model.add(s_idx, a_idx, [k for k, _ in items],
                      [v / total for k, v in items])
    return model


def estimate_transitions_chain(
    specs: Sequence[ObjectSpec],
    grid: GridSpec,
    actions: Sequence[EeMotion],
    cfg: MdpConfig,
    ee_radius: float = 0.01,
) -> Tuple[TransitionModel, Dict[int, int], List[Tuple[int, ...]]]:
    """Transitions for a chain of objects, explored from formation seeds.

    The compound state space is too large to sweep, so states are expanded
    breadth-first from near-formation seeds up to ``cfg.closure_cap``.
    Returns the model over local indices, the map from compound slot-state
    tuples (flattened) to local index, and the local->slots decode list.
    The local absorber (out of window or outside the explored set) is the
    last state.
    """
    m = grid.n_slots
    if len(specs) != m:
        raise ValueError("one object spec per slot required")
    scene = _micro_scene(specs, ee_radius)
    params = PhysicsParams.from_scene(scene)
    noise = cfg.noise
    cell = grid.cell_size
    bw = 2 * math.pi / grid.ang_bins
    K = cfg.samples_per_sa
    mid = grid.pos_cells // 2

    # Seeds: each slot within one cell and one heading bin of its centre.
    seed_slot: List[List[int]] = []
    for _ in range(m):
        ids = []
        for dcx in (-1, 0, 1):
            for dcy in (-1, 0, 1):
                for ab in (grid.ang_bins - 1, 0, 1):
                    ids.append(grid.slot_index(mid + dcx, mid + dcy,
                                               ab % grid.ang_bins))
        seed_slot.append(sorted(set(ids)))

    def compound_key(slot_ids: Tuple[int, ...]) -> int:
        k = 0
        for sid in slot_ids:
            k = k * grid.slot_states + sid
        return k

    from itertools import product
    seeds = [tuple(t) for t in product(*seed_slot)]

    def deviation(slot_ids: Tuple[int, ...]) -> int:
        d = 0
        for sid in slot_ids:
            cx, cy, ab = grid.slot_unindex(sid)
            d += abs(cx - mid) + abs(cy - mid)
            d += min(ab, grid.ang_bins - ab)
        return d

    # Expand the closure outward from the tightest formation states so a
    # small cap still covers the neighbourhood the executor lives in.
    seeds.sort(key=lambda t: (deviation(t), t))

    local_of: Dict[int, int] = {}
    slots_of: List[Tuple[int, ...]] = []
    queue = deque()
    for t in seeds:
        k = compound_key(t)
        if k not in local_of:
            local_of[k] = len(slots_of)
            slots_of.append(t)
            queue.append(t)

    raw: Dict[Tuple[int, int], Dict[Tuple[int, ...], int]] = {}
    explored: set = set()
    while queue and len(explored) < cfg.closure_cap:
        slot_ids = queue.popleft()
        s_local = local_of[compound_key(slot_ids)]
        if s_local in explored:
            continue
        explored.add(s_local)
        centers = []
        for k, sid in enumerate(slot_ids):
            cx, cy, ab = grid.slot_unindex(sid)
            centers.append((grid.cell_center(cx) + grid.slot_centers[k][0],
                            grid.cell_center(cy) + grid.slot_centers[k][1],
                            grid.angle_center(ab)))
        for a_idx, act in enumerate(actions):
            rng = rng_stream(cfg.seed, 2, compound_key(slot_ids), a_idx)
            if act.translation == 0.0:
                raw[(s_local, a_idx)] = {slot_ids: 1}
                continue
            counts: Dict[Tuple[int, ...], int] = {}
            got = 0
            tries = 0
            while got < K and tries < 4 * K:
                tries += 1
                poses = {}
                for k, (cxc, cyc, thc) in enumerate(centers):
                    poses[specs[k].id] = Pose2(
                        cxc + rng.uniform(-0.5, 0.5) * cell,
                        cyc + rng.uniform(-0.5, 0.5) * cell,
                        thc + rng.uniform(-0.5, 0.5) * bw)
                s0 = WorldState(Pose2(0.0, 0.0, 0.0), poses)
                p2, s2 = perturb(params, s0, noise, rng)
                if not is_valid(scene, s2) or any(
                        _exact_gap(specs[k].footprint, s2.object_poses[specs[k].id].x,
                                   s2.object_poses[specs[k].id].y,
                                   s2.object_poses[specs[k].id].theta,
                                   ee_radius) <= 0.0 for k in range(m)):
                    continue
                got += 1
                res = propagate(scene, s2, act, p2)
                if isinstance(res, Blocked):
                    continue
                nxt: List[int] = []
                ok = True
                for k in range(m):
                    o = res.object_poses[specs[k].id]
                    sid = grid.discretize_slot(k, o.x - res.ee.x, o.y - res.ee.y, o.theta)
                    if sid is None:
                        ok = False
                        break
                    nxt.append(sid)
                key = tuple(nxt) if ok else None
                counts[key] = counts.get(key, 0) + 1
            if not counts:
                counts = {None: 1}
            raw[(s_local, a_idx)] = counts
            for key in counts:
                if key is None:
                    continue
                ck = compound_key(key)
                if ck not in local_of:
                    local_of[ck] = len(slots_of)
                    slots_of.append(key)
                    queue.append(key)

    # Discovered-but-unexpanded frontier states have no outgoing samples;
    # compact the index to expanded states and send everything else to the
    # absorber so the solve stays well posed.
    keep = sorted(explored)
    re_of = {old: new for new, old in enumerate(keep)}
    OUT = len(keep)
    model = TransitionModel(OUT + 1, len(actions))
    for (s_local, a_idx), counts in raw.items():
        conv: Dict[int, int] = {}
        for key, c in counts.items():
            if key is None:
                tgt = OUT
            else:
                tgt = re_of.get(local_of[compound_key(key)], OUT)
            conv[tgt] = conv.get(tgt, 0) + c
        total = sum(conv.values())
        items = sorted(conv.items())
        model.add(re_of[s_local], a_idx, [k for k, _ in items],
                  [v / total for _, v in items])
    slots_kept = [slots_of[i] for i in keep]
    return model, {compound_key(t): i for i, t in enumerate(slots_kept)}, slots_kept


# ---------------------------------------------------------------------------
# Policy table
# ---------------------------------------------------------------------------


@dataclass
class PolicyTable:
    """Dense trained policy over the discrete window states."""

    grid: GridSpec
    actions: Tuple[EeMotion, ...]
    gamma: float
    pocket: Tuple[FrozenSet[int], ...]
    values: np.ndarray   # float64 [grid.full_states]
    acts: np.ndarray     # uint16  [grid.full_states]

    @property
    def n_slots(self) -> int:
        return self.grid.n_slots

    def save(self, path: str) -> None:
        g = self.grid
        head = bytearray()
        head += NPPT_MAGIC
        head += struct.pack("<I", NPPT_VERSION)
        head += struct.pack("<I", g.n_slots)
        head += struct.pack("<dIII", g.pos_extent, g.pos_cells, g.ang_bins, g.ee_bins)
        for sx, sy in g.slot_centers:
            head += struct.pack("<dd", sx, sy)
        head += struct.pack("<I", len(self.actions))
        for a in self.actions:
            head += struct.pack("<ddd", a.dx, a.dy, a.dtheta)
        head += struct.pack("<d", self.gamma)
        for pk in self.pocket:
            ids = sorted(pk)
            head += struct.pack("<I", len(ids))
            head += struct.pack(f"<{len(ids)}I", *ids) if ids else b""
        head += struct.pack("<Q", self.values.shape[0])
        with open(path, "wb") as fh:
            fh.write(bytes(head))
            fh.write(self.values.astype("<f8").tobytes())
            fh.write(self.acts.astype("<u2").tobytes())

    @staticmethod
    def load(path: str) -> "PolicyTable":
        with open(path, "rb") as fh:
            buf = fh.read()
        off = 0

        def take(fmt):
            nonlocal off
            vals = struct.unpack_from(fmt, buf, off)
            off += struct.calcsize(fmt)
            return vals

        if buf[:4] != NPPT_MAGIC:
            raise ValueError("not a policy table file")
        off = 4
        (version,) = take("<I")
        if version != NPPT_VERSION:
            raise ValueError(f"unsupported policy table version {version}")
        (m,) = take("<I")
        pos_extent, pos_cells, ang_bins, ee_bins = take("<dIII")
        slots = tuple(take("<dd") for _ in range(m))
        (na,) = take("<I")
        actions = tuple(EeMotion(*take("<ddd")) for _ in range(na))
        (gamma,) = take("<d")
        pocket = []
        for _ in range(m):
            (cnt,) = take("<I")
            pocket.append(frozenset(take(f"<{cnt}I")) if cnt else frozenset())
        (S,) = take("<Q")
        grid = GridSpec(pos_extent=pos_extent, pos_cells=pos_cells,
                        ang_bins=ang_bins, ee_bins=ee_bins, slot_centers=slots)
        if S != grid.full_states:
            raise ValueError("table size does not match grid")
        values = np.frombuffer(buf, dtype="<f8", count=S, offset=off).copy()
        off += 8 * S
        acts = np.frombuffer(buf, dtype="<u2", count=S, offset=off).copy()
        return PolicyTable(grid=grid, actions=actions, gamma=gamma,
                           pocket=tuple(pocket), values=values, acts=acts)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def train_policy(
    specs: Sequence[ObjectSpec],
    grid: GridSpec,
    actions: Sequence[EeMotion],
    cfg: MdpConfig = MdpConfig(),
    ee_radius: float = 0.01,
) -> PolicyTable:
    """Estimate transitions, run value iteration, expand to a dense table."""
    m = grid.n_slots
    if len(specs) != m:
        raise ValueError("one object spec per slot required")
    pocket = tuple(
        pocket_slot_states(grid, specs[k].footprint, ee_radius) for k in range(m)
    )
    if m == 1:
        model = estimate_transitions_single(specs[0], grid, actions, cfg, ee_radius)
        S1 = grid.slot_states
        OUT = S1
        fixed = {t: 0.0 for t in pocket[0]}
        fixed[OUT] = cfg.step_reward / (1.0 - cfg.gamma)
        V, pi, _ = value_iteration(model, cfg.step_reward, cfg.gamma, fixed,
                                   cfg.tol, cfg.max_sweeps)
        v_slot = V[:S1]
        a_slot = pi[:S1].astype(np.uint16)
        a_slot[np.fromiter(pocket[0], dtype=np.int64)] = 0
        values = np.repeat(v_slot, grid.ee_bins)
        acts = np.repeat(a_slot, grid.ee_bins)
        return PolicyTable(grid=grid, actions=tuple(actions), gamma=cfg.gamma,
                           pocket=pocket, values=values, acts=acts)

    model, local_of, slots_of = estimate_transitions_chain(
        specs, grid, actions, cfg, ee_radius)
    OUT = len(slots_of)
    fixed = {OUT: cfg.step_reward / (1.0 - cfg.gamma)}
    for li, slot_ids in enumerate(slots_of):
        if all(slot_ids[k] in pocket[k] for k in range(m)):
            fixed[li] = 0.0
    V, pi, _ = value_iteration(model, cfg.step_reward, cfg.gamma, fixed,
                               cfg.tol, cfg.max_sweeps)
    values = np.full(grid.full_states, -np.inf)
    acts = np.full(grid.full_states, ABORT_ACTION, dtype=np.uint16)
    for li, slot_ids in enumerate(slots_of):
        if not np.isfinite(V[li]):
            continue
        base = grid.full_index(slot_ids, 0)
        for b in range(grid.ee_bins):
            values[base + b] = V[li]
            acts[base + b] = 0 if li in fixed and fixed[li] == 0.0 else pi[li]
    return PolicyTable(grid=grid, actions=tuple(actions), gamma=cfg.gamma,
                       pocket=pocket, values=values, acts=acts)


# ---------------------------------------------------------------------------
# Lookup
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PolicyDecision:
    """Executor-facing outcome of a table lookup.

    kind "drive": formation held, push straight along the travel direction.
    kind "table": recovery action from the table (world frame).
    kind "abort": state unmodeled or outside the window.
    """

    kind: str
    motion: Optional[EeMotion] = None


def policy_lookup(
    table: PolicyTable,
    ee: Pose2,
    obj_poses: Sequence[Pose2],
    travel_dir: float,
) -> PolicyDecision:
    """World-frame policy query for the current pusher-relative state."""
    g = table.grid
    if len(obj_poses) != g.n_slots:
        raise ValueError("one object pose per slot required")
    c, s = math.cos(travel_dir), math.sin(travel_dir)
    slot_ids = []
    for k, op in enumerate(obj_poses):
        dx, dy = op.x - ee.x, op.y - ee.y
        rel_x = c * dx + s * dy
        rel_y = -s * dx + c * dy
        sid = g.discretize_slot(k, rel_x, rel_y, angle_diff(op.theta, travel_dir))
        if sid is None:
            return PolicyDecision("abort")
        slot_ids.append(sid)
    if all(slot_ids[k] in table.pocket[k] for k in range(g.n_slots)):
        step = table.actions[0].translation if table.actions else 0.01
        return PolicyDecision("drive", rotate_motion(EeMotion(step, 0.0, 0.0),
                                                     travel_dir))
    b = g.bin_ee(angle_diff(ee.theta, travel_dir))
    idx = g.full_index(slot_ids, b)
    a = int(table.acts[idx])
    if a == ABORT_ACTION:
        return PolicyDecision("abort")
    return PolicyDecision("table", rotate_motion(table.actions[a], travel_dir))


def policy_step(
    table: PolicyTable,
    ee: Pose2,
    obj_poses: Sequence[Pose2],
    travel_dir: float,
    visits: Dict[Tuple[int, ...], int],
    rng: np.random.Generator,
    kick_after: int = 3,
) -> PolicyDecision:
    """Table lookup with a randomized kick out of discretization cycles.

    Greedy execution of a cell-averaged policy can trap a deterministic
    rollout between cells that each point at the other: the model assumes a
    fresh sample inside the cell on every visit, a deterministic loop never
    provides one.  Repeat visits to the same discrete state therefore swap
    in a random translation, restoring that assumption.
    """
    g = table.grid
    c, s = math.cos(travel_dir), math.sin(travel_dir)
    key = []
    for k, op in enumerate(obj_poses):
        dx, dy = op.x - ee.x, op.y - ee.y
        sid = g.discretize_slot(k, c * dx + s * dy, -s * dx + c * dy,
                                angle_diff(op.theta, travel_dir))
        if sid is None:
            return PolicyDecision("abort")
        key.append(sid)
    dec = policy_lookup(table, ee, obj_poses, travel_dir)
    if dec.kind != "table":
        return dec
    tkey = tuple(key)
    visits[tkey] = visits.get(tkey, 0) + 1
    if visits[tkey] >= kick_after:
        moves = [a for a in table.actions if a.translation > 0.0]
        pick = moves[int(rng.integers(len(moves)))]
        return PolicyDecision("table", rotate_motion(pick, travel_dir))
    return dec


def rollout_to_pocket(
    table: PolicyTable,
    specs: Sequence[ObjectSpec],
    start_rel: Sequence[Pose2],
    travel_dir: float = 0.0,
    max_steps: int = 150,
    ee_radius: float = 0.01,
    noise: Optional[NoiseSpec] = None,
    seed: int = 0,
) -> Optional[int]:
    """Run the policy closed loop from pusher-relative starts.

    Returns the number of actions taken until every slot reaches its
    pocket, or None on abort / step budget exhaustion.  ``start_rel`` poses
    are in the travel frame.  Optional noise perturbs each step's physics
    the way training did.
    """
    scene = _micro_scene(list(specs), ee_radius)
    params = PhysicsParams.from_scene(scene)
    c, sn = math.cos(travel_dir), math.sin(travel_dir)
    poses = {}
    for sp, rel in zip(specs, start_rel):
        poses[sp.id] = Pose2(c * rel.x - sn * rel.y, sn * rel.x + c * rel.y,
                             wrap_angle(rel.theta + travel_dir))
    state = WorldState(Pose2(0.0, 0.0, travel_dir), poses)
    rng = rng_stream(seed, 9)
    visits: Dict[Tuple[int, ...], int] = {}
    for step in range(max_steps):
        obj_poses = [state.object_poses[sp.id] for sp in specs]
        dec = policy_step(table, state.ee, obj_poses, travel_dir, visits, rng)
        if dec.kind == "drive":
            return step
        if dec.kind == "abort":
            return None
        p = params
        s = state
        if noise is not None and not noise.is_zero:
            p, s = perturb(params, state, noise, rng)
        res = propagate(scene, s, dec.motion, p)
        if isinstance(res, Blocked):
            return None
        state = res
    return None
