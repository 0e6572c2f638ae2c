"""Scene and state containers for the planar rearrangement world.

A scene fixes the immutable layout: static obstacles, movable objects with
their physical parameters, workspace bounds and the pusher (end-effector)
disk radius.  A world state holds the pusher pose plus one pose per object.
Paths are sequences of states with a mode tag per transition, either a
contact-free "transit" of the pusher or a "push" with an ordered chain of
object ids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import yaml

from .geometry import Footprint, Pose2, angle_diff, collides, polyline_length

SCENE_FORMAT_VERSION = 1

# Absolute coordinate tolerance when joining two paths at a shared state.
JUNCTION_TOL = 1e-9


class JunctionMismatch(ValueError):
    """Raised when two paths are concatenated at non-matching states."""


class IllegalModeChange(ValueError):
    """Raised when a path's states and mode tags are inconsistent."""


@dataclass(frozen=True)
class ObjectSpec:
    """A movable object: shape plus quasi-static pushing parameters.

    support_friction is the object/surface friction coefficient, kept for
    completeness (it scales forces, not motion directions).  contact_friction
    acts at the pusher/object interface and decides sticking versus sliding.
    pressure_radius is the characteristic length of the support pressure
    distribution; it sets how readily pushes rotate the object.
    """

    id: int
    footprint: Footprint
    mass: float = 0.2
    support_friction: float = 0.5
    contact_friction: float = 0.3
    pressure_radius: float = 0.03

    def __post_init__(self) -> None:
        if self.id < 0:
            raise ValueError("object id must be non-negative")
        for name in ("mass", "support_friction", "contact_friction", "pressure_radius"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class Scene:
    """Immutable world layout shared by every state of a planning problem."""

    statics: Tuple[Tuple[Footprint, Pose2], ...] = ()
    objects: Tuple[ObjectSpec, ...] = ()
    workspace: Tuple[float, float, float, float] = (0.0, 0.0, 2.0, 2.0)
    ee_radius: float = 0.01

    def __post_init__(self) -> None:
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate object ids")
        xmin, ymin, xmax, ymax = self.workspace
        if xmax <= xmin or ymax <= ymin:
            raise ValueError("degenerate workspace")
        if self.ee_radius <= 0.0:
            raise ValueError("ee_radius must be positive")

    @property
    def ee_footprint(self) -> Footprint:
        return Footprint.disk(self.ee_radius)

    def object_by_id(self, obj_id: int) -> ObjectSpec:
        for o in self.objects:
            if o.id == obj_id:
                return o
        raise KeyError(f"no object with id {obj_id}")


@dataclass(frozen=True)
class WorldState:
    """Poses of the pusher and of every movable object."""

    ee: Pose2
    object_poses: Dict[int, Pose2] = field(default_factory=dict)

    def pose_of(self, obj_id: int) -> Pose2:
        return self.object_poses[obj_id]

    def with_ee(self, ee: Pose2) -> "WorldState":
        return WorldState(ee, dict(self.object_poses))

    def with_object_pose(self, obj_id: int, pose: Pose2) -> "WorldState":
        poses = dict(self.object_poses)
        poses[obj_id] = pose
        return WorldState(self.ee, poses)


@dataclass(frozen=True)
class ModeTag:
    """Transition label: contact-free pusher transit, or a push of a chain.

    ``chain`` lists the pushed object ids ordered rear to front; it is empty
    for transits.
    """

    kind: str  # "transit" | "push"
    chain: Tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in ("transit", "push"):
            raise ValueError(f"unknown mode kind {self.kind!r}")
        if self.kind == "transit" and self.chain:
            raise ValueError("transit mode carries no chain")
        if self.kind == "push" and not self.chain:
            raise ValueError("push mode needs a chain")


TRANSIT = ModeTag("transit")


@dataclass
class Path:
    """A sequence of world states with one mode tag per transition."""

    states: Tuple[WorldState, ...]
    modes: Tuple[ModeTag, ...]

    def __post_init__(self) -> None:
        self.states = tuple(self.states)
        self.modes = tuple(self.modes)
        if self.states and len(self.modes) != len(self.states) - 1:
            raise IllegalModeChange(
                f"{len(self.states)} states need {len(self.states) - 1} mode tags, "
                f"got {len(self.modes)}"
            )
        if not self.states and self.modes:
            raise IllegalModeChange("empty path cannot carry mode tags")

    @property
    def is_empty(self) -> bool:
        return not self.states

    @property
    def end(self) -> WorldState:
        return self.states[-1]


def single_state_path(s: WorldState) -> Path:
    return Path((s,), ())


def path_cost(path: Path) -> float:
    """Total end-effector travel distance along the path."""
    return polyline_length([s.ee.xy for s in path.states])


def _states_close(a: WorldState, b: WorldState, tol: float) -> bool:
    if abs(a.ee.x - b.ee.x) > tol or abs(a.ee.y - b.ee.y) > tol:
        return False
    if abs(angle_diff(a.ee.theta, b.ee.theta)) > tol:
        return False
    if a.object_poses.keys() != b.object_poses.keys():
        return False
    for obj_id, pa in a.object_poses.items():
        pb = b.object_poses[obj_id]
        if abs(pa.x - pb.x) > tol or abs(pa.y - pb.y) > tol:
            return False
        if abs(angle_diff(pa.theta, pb.theta)) > tol:
            return False
    return True


def concat(a: Path, b: Path) -> Path:
    """Join two paths at a shared state.

    The last state of ``a`` must equal the first state of ``b`` in every
    coordinate within JUNCTION_TOL; the duplicate is dropped.  An empty path
    acts as identity.
    """
    if a.is_empty:
        return Path(b.states, b.modes)
    if b.is_empty:
        return Path(a.states, a.modes)
    if not _states_close(a.end, b.states[0], JUNCTION_TOL):
        raise JunctionMismatch("paths do not share a junction state")
    return Path(a.states + b.states[1:], a.modes + b.modes)


def is_valid(scene: Scene, s: WorldState, placed: FrozenSet[int] = frozenset()) -> bool:
    """Check a state for illegal overlaps.

    Disallowed: object-object, object-static, pusher-static and pusher
    against any placed object.  Pusher contact with an unplaced object is
    legal (that is how pushing happens); shared boundaries never collide.
    """
    ee_fp = scene.ee_footprint
    specs = {o.id: o for o in scene.objects}
    poses = s.object_poses
    ids = sorted(poses.keys())
    for i, a in enumerate(ids):
        fa, pa = specs[a].footprint, poses[a]
        for b in ids[i + 1 :]:
            if collides(fa, pa, specs[b].footprint, poses[b]):
                return False
        for sf, sp in scene.statics:
            if collides(fa, pa, sf, sp):
                return False
    for sf, sp in scene.statics:
        if collides(ee_fp, s.ee, sf, sp):
            return False
    for obj_id in placed:
        if obj_id in poses and collides(ee_fp, s.ee, specs[obj_id].footprint, poses[obj_id]):
            return False
    return True


def success(
    s: WorldState, goal: Mapping[int, Pose2], tol_pos: float, tol_ang: float
) -> FrozenSet[int]:
    """Ids of objects whose pose is within tolerance of its goal pose."""
    done = set()
    for obj_id, pose in s.object_poses.items():
        g = goal.get(obj_id)
        if g is None:
            continue
        if math.hypot(pose.x - g.x, pose.y - g.y) <= tol_pos and abs(
            angle_diff(pose.theta, g.theta)
        ) <= tol_ang:
            done.add(obj_id)
    return frozenset(done)


@dataclass(frozen=True)
class ProblemInstance:
    """A rearrangement problem: scene, start state, per-object goal poses."""

    scene: Scene
    start: WorldState
    goal: Mapping[int, Pose2]
    placed: FrozenSet[int] = frozenset()


# ---------------------------------------------------------------------------
# Scene file round-trip.  Plain YAML, format_version pinned; floats survive a
# round-trip at full repr precision.
# ---------------------------------------------------------------------------


def _pose_to_list(p: Pose2) -> List[float]:
    return [float(p.x), float(p.y), float(p.theta)]


def _pose_from_list(v: Sequence[float]) -> Pose2:
    return Pose2(float(v[0]), float(v[1]), float(v[2]))


def _footprint_to_dict(fp: Footprint) -> Dict:
    if fp.kind == "disk":
        return {"shape": "disk", "radius": float(fp.radius)}
    return {"shape": "rectangle", "width": float(fp.width), "height": float(fp.height)}


def _footprint_from_dict(d: Dict) -> Footprint:
    if d["shape"] == "disk":
        return Footprint.disk(float(d["radius"]))
    if d["shape"] == "rectangle":
        return Footprint.rectangle(float(d["width"]), float(d["height"]))
    raise ValueError(f"unknown shape {d['shape']!r}")


def instance_to_dict(inst: ProblemInstance) -> Dict:
    scene = inst.scene
    objs = []
    for spec in scene.objects:
        entry = {
            "id": int(spec.id),
            **_footprint_to_dict(spec.footprint),
            "mass": float(spec.mass),
            "support_friction": float(spec.support_friction),
            "contact_friction": float(spec.contact_friction),
            "pressure_radius": float(spec.pressure_radius),
            "start": _pose_to_list(inst.start.pose_of(spec.id)),
            "goal": _pose_to_list(inst.goal[spec.id]),
        }
        objs.append(entry)
    return {
        "format_version": SCENE_FORMAT_VERSION,
        "workspace": [float(v) for v in scene.workspace],
        "ee_radius": float(scene.ee_radius),
        "statics": [
            {**_footprint_to_dict(fp), "pose": _pose_to_list(pose)}
            for fp, pose in scene.statics
        ],
        "objects": objs,
        "ee_start": _pose_to_list(inst.start.ee),
        "placed": sorted(int(i) for i in inst.placed),
    }


def instance_from_dict(data: Dict) -> ProblemInstance:
    version = data.get("format_version")
    if version != SCENE_FORMAT_VERSION:
        raise ValueError(f"unsupported scene format_version {version!r}")
    statics = tuple(
        (_footprint_from_dict(d), _pose_from_list(d["pose"])) for d in data.get("statics", [])
    )
    specs = []
    starts: Dict[int, Pose2] = {}
    goals: Dict[int, Pose2] = {}
    for d in data.get("objects", []):
        spec = ObjectSpec(
            id=int(d["id"]),
            footprint=_footprint_from_dict(d),
            mass=float(d["mass"]),
            support_friction=float(d["support_friction"]),
            contact_friction=float(d["contact_friction"]),
            pressure_radius=float(d["pressure_radius"]),
        )
        specs.append(spec)
        starts[spec.id] = _pose_from_list(d["start"])
        goals[spec.id] = _pose_from_list(d["goal"])
    scene = Scene(
        statics=statics,
        objects=tuple(specs),
        workspace=tuple(float(v) for v in data["workspace"]),
        ee_radius=float(data.get("ee_radius", 0.01)),
    )
    start = WorldState(_pose_from_list(data["ee_start"]), starts)
    placed = frozenset(int(i) for i in data.get("placed", []))
    return ProblemInstance(scene, start, goals, placed)


def save_instance(inst: ProblemInstance, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(instance_to_dict(inst), fh, sort_keys=False)


def load_instance(path: str) -> ProblemInstance:
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    return instance_from_dict(data)
