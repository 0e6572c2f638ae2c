"""Object route planning (RRT*) and pusher transit planning (grid A*)."""

import math

import pytest

from nestpush.geometry import Footprint, Pose2, angle_diff, collides
from nestpush.pathplan import (
    ObjectPath,
    RrtConfig,
    TransitConfig,
    plan_object_path,
    plan_transit,
)
from nestpush.seeding import rng_stream
from nestpush.world import ObjectSpec, Scene, WorldState


@pytest.fixture
def walled_scene():
    spec = ObjectSpec(id=1, footprint=Footprint.rectangle(0.095, 0.065))
    other = ObjectSpec(id=2, footprint=Footprint.disk(0.04))
    wall = (Footprint.rectangle(0.02, 0.8), Pose2(1.0, 0.6, 0.0))
    scene = Scene(statics=(wall,), objects=(spec, other),
                  workspace=(0, 0, 2, 2), ee_radius=0.01)
    s = WorldState(Pose2(0.3, 0.3, 0.0),
                   {1: Pose2(0.5, 0.5, 0.2), 2: Pose2(1.5, 1.5, 0.0)})
    return scene, s


FAST = RrtConfig(max_iters=4000, early_exit_ratio=2.0)


def test_object_path_reaches_exact_goal_pose(walled_scene):
    scene, s = walled_scene
    goal = Pose2(1.5, 0.5, 0.0)
    path = plan_object_path(scene, s, 1, goal, rng_stream(0, 1), FAST)
    assert path is not None
    assert isinstance(path, ObjectPath)
    end = path.waypoints[-1]
    assert (end.x, end.y, end.theta) == (goal.x, goal.y, goal.theta)
    assert path.cost >= 1.0  # must detour around the wall


def test_object_path_waypoints_are_collision_free(walled_scene):
    scene, s = walled_scene
    path = plan_object_path(scene, s, 1, Pose2(1.5, 0.5, 0.0), rng_stream(0, 1), FAST)
    fp = scene.object_by_id(1).footprint
    obstacles = list(scene.statics) + [(scene.object_by_id(2).footprint, s.pose_of(2))]
    for w in path.waypoints:
        for ofp, opose in obstacles:
            assert not collides(fp, w, ofp, opose)


def test_object_path_waypoint_spacing(walled_scene):
    scene, s = walled_scene
    path = plan_object_path(scene, s, 1, Pose2(1.5, 0.5, 0.0), rng_stream(0, 1), FAST)
    pts = path.points
    for i in range(len(pts) - 1):
        assert math.hypot(pts[i + 1][0] - pts[i][0], pts[i + 1][1] - pts[i][1]) <= 0.051


def test_object_path_arrival_heading_matches_goal(walled_scene):
    # Intermediate headings are travel directions; the last leg must arrive
    # along the goal heading (or its 180-degree twin for rectangles).
    scene, s = walled_scene
    goal = Pose2(1.5, 0.5, 0.0)
    path = plan_object_path(scene, s, 1, goal, rng_stream(0, 1), FAST)
    a, b = path.points[-2], path.points[-1]
    arr = math.atan2(b[1] - a[1], b[0] - a[0])
    d = abs(angle_diff(arr, goal.theta))
    assert min(d, abs(d - math.pi)) < 1e-6


def test_object_path_open_space_is_nearly_straight(walled_scene):
    # Goal heading along the line of sight, so the landing approach adds
    # nothing and the optimum is the straight segment.
    scene, s = walled_scene
    goal = Pose2(0.5, 1.4, math.pi / 2)
    path = plan_object_path(scene, s, 1, goal, rng_stream(0, 2),
                            RrtConfig(max_iters=4000, early_exit_ratio=1.2))
    assert path is not None
    assert path.cost <= 0.9 * 1.05


def test_object_path_deterministic_given_stream(walled_scene):
    scene, s = walled_scene
    p1 = plan_object_path(scene, s, 1, Pose2(1.5, 0.5, 0.0), rng_stream(7, 3), FAST)
    p2 = plan_object_path(scene, s, 1, Pose2(1.5, 0.5, 0.0), rng_stream(7, 3), FAST)
    assert p1.waypoints == p2.waypoints
    assert p1.cost == p2.cost


def test_object_path_rejects_colliding_goal(walled_scene):
    scene, s = walled_scene
    assert plan_object_path(scene, s, 1, Pose2(1.0, 0.6, 0.0),
                            rng_stream(0, 4), FAST) is None


def test_object_path_rejects_goal_outside_workspace(walled_scene):
    scene, s = walled_scene
    assert plan_object_path(scene, s, 1, Pose2(1.99, 1.99, 0.0),
                            rng_stream(0, 5), FAST) is None


def test_transit_direct_when_free(walled_scene):
    scene, s = walled_scene
    pts = plan_transit(scene, s, (0.3, 1.8))
    L = sum(math.hypot(pts[i + 1][0] - pts[i][0], pts[i + 1][1] - pts[i][1])
            for i in range(len(pts) - 1))
    assert pts[0] == (0.3, 0.3)
    assert pts[-1] == (0.3, 1.8)
    assert L <= 1.5 * 1.01


def test_transit_detours_around_wall(walled_scene):
    scene, s = walled_scene
    pts = plan_transit(scene, s, (1.7, 0.4))
    assert pts is not None
    assert pts[0] == (0.3, 0.3) and pts[-1] == (1.7, 0.4)
    L = sum(math.hypot(pts[i + 1][0] - pts[i][0], pts[i + 1][1] - pts[i][1])
            for i in range(len(pts) - 1))
    direct = math.hypot(1.4, 0.1)
    assert L > direct  # the wall forces a detour
    # No polyline point may sit inside the wall slab (x ~ 1.0, y in [0.2, 1.0]).
    for x, y in pts:
        inside = abs(x - 1.0) < 0.01 + 0.01 and 0.2 - 0.01 < y < 1.0 + 0.01
        assert not inside


def test_transit_unreachable_returns_none():
    # Goal sealed inside a box of four wall slabs.
    walls = (
        (Footprint.rectangle(0.3, 0.02), Pose2(0.5, 0.35, 0.0)),
        (Footprint.rectangle(0.3, 0.02), Pose2(0.5, 0.65, 0.0)),
        (Footprint.rectangle(0.02, 0.3), Pose2(0.35, 0.5, 0.0)),
        (Footprint.rectangle(0.02, 0.3), Pose2(0.65, 0.5, 0.0)),
    )
    scene = Scene(statics=walls, objects=(), workspace=(0, 0, 1, 1), ee_radius=0.01)
    s = WorldState(Pose2(0.1, 0.1, 0.0), {})
    assert plan_transit(scene, s, (0.5, 0.5)) is None


def test_transit_avoids_objects(walled_scene):
    scene, s = walled_scene
    # Goal on the far side of object 2 at (1.5, 1.5).
    pts = plan_transit(scene, s, (1.9, 1.9))
    assert pts is not None
    for x, y in pts:
        assert math.hypot(x - 1.5, y - 1.5) >= 0.04  # outside the disk
