"""Quasi-static push propagation: contact solve, stepping, invariants."""

import math

import numpy as np
import pytest

from nestpush.geometry import Footprint, Pose2, angle_diff, wrap_angle
from nestpush.world import ObjectSpec, Scene, WorldState, is_valid
from nestpush.pushworld import (
    Blocked,
    EeMotion,
    NoiseSpec,
    PhysicsParams,
    perturb,
    propagate,
)


@pytest.fixture
def rect_scene():
    spec = ObjectSpec(id=1, footprint=Footprint.rectangle(0.095, 0.065))
    return Scene(statics=(), objects=(spec,), workspace=(-2, -2, 2, 2), ee_radius=0.01)


def params(scene, step=1e-3):
    return PhysicsParams.from_scene(scene, integration_step=step)


def test_ee_motion_validation():
    with pytest.raises(ValueError):
        EeMotion(math.nan, 0.0)
    m = EeMotion(0.003, 0.004)
    assert m.translation == pytest.approx(0.005)


def test_propagate_rejects_oversized_step(rect_scene):
    s = WorldState(Pose2(0.5, 0.5, 0), {1: Pose2(0, 0, 0)})
    with pytest.raises(ValueError):
        propagate(rect_scene, s, EeMotion(0.05, 0.0), params(rect_scene))


def test_centered_face_push_translates_without_rotation(rect_scene):
    # Pushing through the centroid: zero lever arm, pure translation.
    s = WorldState(Pose2(0.0, -0.0425, 0.0), {1: Pose2(0, 0, 0)})
    r = propagate(rect_scene, s, EeMotion(0.0, 0.01), params(rect_scene))
    assert isinstance(r, WorldState)
    assert r.object_poses[1].x == pytest.approx(0.0, abs=1e-9)
    assert r.object_poses[1].y == pytest.approx(0.01, abs=1e-6)
    assert r.object_poses[1].theta == pytest.approx(0.0, abs=1e-9)
    assert r.ee.y == pytest.approx(-0.0325)


def test_off_center_push_first_millimetre_matches_stick_solve(rect_scene):
    # Independent closed-form check: contact at (0.01, -0.0325) on the long
    # face, c = 0.03, mu = 0.3 gives a sticking contact with
    # v = (-0.158055, 0.951368), w = 4.863222 per unit of normal advance.
    s = WorldState(Pose2(0.01, -0.0425, 0.0), {1: Pose2(0, 0, 0)})
    r = propagate(rect_scene, s, EeMotion(0.0, 0.001), params(rect_scene))
    o = r.object_poses[1]
    assert o.x == pytest.approx(-0.15805471e-3, rel=0.02)
    assert o.y == pytest.approx(0.95136778e-3, rel=0.02)
    assert o.theta == pytest.approx(4.863222e-3, rel=0.02)


def test_off_center_push_coarse_matches_fine_oracle(rect_scene):
    s = WorldState(Pose2(0.01, -0.0425, 0.0), {1: Pose2(0, 0, 0)})
    coarse = propagate(rect_scene, s, EeMotion(0.0, 0.01), params(rect_scene, 1e-3))
    fine = propagate(rect_scene, s, EeMotion(0.0, 0.01), params(rect_scene, 1e-5))
    dp = math.hypot(coarse.object_poses[1].x - fine.object_poses[1].x,
                    coarse.object_poses[1].y - fine.object_poses[1].y)
    da = abs(angle_diff(coarse.object_poses[1].theta, fine.object_poses[1].theta))
    assert dp <= 1e-4
    assert da <= 1e-3
    # Rotation away from the offset side.
    assert coarse.object_poses[1].theta > 0.01


def test_propagate_is_deterministic(rect_scene):
    s = WorldState(Pose2(0.011, -0.0426, 0.2), {1: Pose2(0, 0, 0.05)})
    m = EeMotion(0.0012, 0.0099, 0.01)
    assert propagate(rect_scene, s, m, params(rect_scene)) == \
        propagate(rect_scene, s, m, params(rect_scene))


def test_no_contact_means_no_object_motion(rect_scene):
    s = WorldState(Pose2(0.5, 0.5, 0.0), {1: Pose2(0, 0, 0)})
    r = propagate(rect_scene, s, EeMotion(0.02, 0.0), params(rect_scene))
    assert r.object_poses[1] == s.object_poses[1]
    assert r.ee.x == pytest.approx(0.52)


def test_no_teleportation(rect_scene):
    # Per propagate call the object displacement stays bounded by the pusher
    # translation (quasi-static contact cannot outrun its driver by much).
    rng = np.random.default_rng(0)
    for _ in range(60):
        ang = rng.uniform(-math.pi, math.pi)
        rad = rng.uniform(0.055, 0.075)
        s = WorldState(Pose2(rad * math.cos(ang), rad * math.sin(ang), 0.0),
                       {1: Pose2(0, 0, rng.uniform(-math.pi, math.pi))})
        if not is_valid(rect_scene, s):
            continue
        d = math.atan2(-s.ee.y, -s.ee.x) + rng.uniform(-0.3, 0.3)
        m = EeMotion(0.015 * math.cos(d), 0.015 * math.sin(d))
        r = propagate(rect_scene, s, m, params(rect_scene))
        if isinstance(r, Blocked):
            continue
        moved = math.hypot(r.object_poses[1].x - s.object_poses[1].x,
                           r.object_poses[1].y - s.object_poses[1].y)
        assert moved <= m.translation * 1.5 + 1e-6


def test_frame_invariance(rect_scene):
    s0 = WorldState(Pose2(0.01, -0.0425, 0.0), {1: Pose2(0, 0, 0)})
    m = EeMotion(0.001, 0.0099)
    base = propagate(rect_scene, s0, m, params(rect_scene))
    rng = np.random.default_rng(3)
    for _ in range(20):
        tx, ty, a = rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-math.pi, math.pi)
        c, s_ = math.cos(a), math.sin(a)

        def mv(p):
            return Pose2(c * p.x - s_ * p.y + tx, s_ * p.x + c * p.y + ty,
                         wrap_angle(p.theta + a))

        sT = WorldState(mv(s0.ee), {1: mv(s0.object_poses[1])})
        mT = EeMotion(c * m.dx - s_ * m.dy, s_ * m.dx + c * m.dy, m.dtheta)
        rT = propagate(rect_scene, sT, mT, params(rect_scene))
        want = mv(base.object_poses[1])
        got = rT.object_poses[1]
        assert math.hypot(want.x - got.x, want.y - got.y) <= 1e-6
        assert abs(angle_diff(want.theta, got.theta)) <= 1e-6


def test_halving_step_changes_result_only_slightly(rect_scene):
    rng = np.random.default_rng(11)
    worst = 0.0
    n = 0
    while n < 40:
        ang = rng.uniform(-math.pi, math.pi)
        s = WorldState(Pose2(0.07 * math.cos(ang), 0.07 * math.sin(ang), 0.0),
                       {1: Pose2(0, 0, rng.uniform(-math.pi, math.pi))})
        if not is_valid(rect_scene, s):
            continue
        n += 1
        d = math.atan2(-s.ee.y, -s.ee.x) + rng.uniform(-0.5, 0.5)
        m = EeMotion(0.02 * math.cos(d), 0.02 * math.sin(d))
        ra = propagate(rect_scene, s, m, params(rect_scene, 1e-3))
        rb = propagate(rect_scene, s, m, params(rect_scene, 5e-4))
        if isinstance(ra, Blocked) or isinstance(rb, Blocked):
            continue
        worst = max(worst, math.hypot(ra.object_poses[1].x - rb.object_poses[1].x,
                                      ra.object_poses[1].y - rb.object_poses[1].y))
    assert worst <= 2e-3


def test_chain_push_propagates_through_middle_object():
    specs = (ObjectSpec(id=1, footprint=Footprint.rectangle(0.095, 0.065)),
             ObjectSpec(id=2, footprint=Footprint.disk(0.04)))
    scene = Scene(statics=(), objects=specs, workspace=(-2, -2, 2, 2), ee_radius=0.01)
    s = WorldState(Pose2(0.0, -0.0425, 0.0),
                   {1: Pose2(0, 0, 0), 2: Pose2(0.0, 0.0725, 0.0)})
    for _ in range(8):
        s = propagate(scene, s, EeMotion(0.0, 0.01), params(scene))
        assert isinstance(s, WorldState)
    # Front disk got carried; separation stays non-negative and tiny.
    gap = (s.object_poses[2].y - s.object_poses[1].y) - 0.0325 - 0.04
    assert s.object_poses[2].y > 0.13
    assert 0.0 <= gap < 1e-6


def test_blocked_by_static_wall():
    spec = ObjectSpec(id=1, footprint=Footprint.rectangle(0.095, 0.065))
    wall = (Footprint.rectangle(0.4, 0.02), Pose2(0.0, 0.12, 0.0))
    scene = Scene(statics=(wall,), objects=(spec,), workspace=(-2, -2, 2, 2),
                  ee_radius=0.01)
    s = WorldState(Pose2(0.0, -0.0425, 0.0), {1: Pose2(0, 0, 0)})
    hit = None
    for _ in range(20):
        r = propagate(scene, s, EeMotion(0.0, 0.01), params(scene))
        if isinstance(r, Blocked):
            hit = r
            break
        s = r
    assert hit is not None
    assert hit.blocking_static == 0
    assert hit.blocking_id is None
    assert 0.0 <= hit.fraction < 1.0
    # Object rests against the wall: top face near the wall's lower face.
    assert s.object_poses[1].y + 0.0325 <= 0.11 + 1e-6


def test_forbidden_object_blocks_the_push():
    specs = (ObjectSpec(id=1, footprint=Footprint.disk(0.03)),
             ObjectSpec(id=2, footprint=Footprint.disk(0.03)))
    scene = Scene(statics=(), objects=specs, workspace=(-2, -2, 2, 2), ee_radius=0.01)
    s = WorldState(Pose2(0.0, -0.04, 0.0),
                   {1: Pose2(0, 0, 0), 2: Pose2(0.0, 0.0601, 0.0)})
    r = propagate(scene, s, EeMotion(0.0, 0.01), params(scene),
                  forbidden=frozenset({2}))
    assert isinstance(r, Blocked)
    assert r.blocking_id == 2


def test_ee_cannot_enter_forbidden_object():
    spec = ObjectSpec(id=1, footprint=Footprint.disk(0.03))
    scene = Scene(statics=(), objects=(spec,), workspace=(-2, -2, 2, 2), ee_radius=0.01)
    s = WorldState(Pose2(0.0, -0.041, 0.0), {1: Pose2(0, 0, 0)})
    r = propagate(scene, s, EeMotion(0.0, 0.01), params(scene),
                  forbidden=frozenset({1}))
    assert isinstance(r, Blocked)
    assert r.blocking_id == 1
    assert r.fraction == pytest.approx(0.1, abs=0.02)


def test_perturb_zero_noise_is_identity(rect_scene):
    s = WorldState(Pose2(0.3, 0.2, 0.1), {1: Pose2(0, 0, 0)})
    p = params(rect_scene)
    rng = np.random.default_rng(0)
    p2, s2 = perturb(p, s, NoiseSpec(0.0, 0.0, 0.0), rng)
    assert p2 == p
    assert s2 == s


def test_perturb_lognormal_parameter_moments(rect_scene):
    # Multiplicative exp(sigma Z) noise has mean exp(sigma^2 / 2).
    s = WorldState(Pose2(0.3, 0.2, 0.1), {1: Pose2(0, 0, 0)})
    p = params(rect_scene)
    rng = np.random.default_rng(42)
    sigma = 0.2
    vals = []
    for _ in range(4000):
        p2, _ = perturb(p, s, NoiseSpec(sigma, 0.0, 0.0), rng)
        vals.append(p2.contact_friction[1] / p.contact_friction[1])
    assert np.mean(vals) == pytest.approx(math.exp(sigma ** 2 / 2), rel=0.02)
    assert np.std(np.log(vals)) == pytest.approx(sigma, rel=0.05)


def test_perturb_pose_noise_displaces_objects(rect_scene):
    s = WorldState(Pose2(0.3, 0.2, 0.1), {1: Pose2(0, 0, 0)})
    p = params(rect_scene)
    rng = np.random.default_rng(1)
    _, s2 = perturb(p, s, NoiseSpec(0.0, 1e-3, 1e-2), rng)
    assert s2.object_poses[1] != s.object_poses[1]
    assert s2.ee == s.ee  # only object poses carry placement uncertainty
    assert math.hypot(s2.object_poses[1].x, s2.object_poses[1].y) < 1e-2
