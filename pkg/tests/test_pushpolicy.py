"""Tests for the discretized pushing policy: grids, solving, tables, lookup."""

import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nestpush.geometry import Footprint, Pose2
from nestpush.world import ObjectSpec
from nestpush.pushworld import EeMotion
from nestpush.pushpolicy import (
    ABORT_ACTION,
    GridSpec,
    MdpConfig,
    PolicyTable,
    TransitionModel,
    chain_grid,
    default_actions,
    estimate_transitions_chain,
    estimate_transitions_single,
    pocket_slot_states,
    policy_lookup,
    policy_step,
    rollout_to_pocket,
    rotate_motion,
    train_policy,
    value_iteration,
)
from nestpush.seeding import rng_stream

RECT = Footprint.rectangle(0.095, 0.065)


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------


class TestGridSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            GridSpec(pos_cells=10)  # even
        with pytest.raises(ValueError):
            GridSpec(pos_cells=1)
        with pytest.raises(ValueError):
            GridSpec(pos_extent=-0.1)
        with pytest.raises(ValueError):
            GridSpec(slot_centers=())

    def test_cell_size(self):
        g = GridSpec(pos_extent=0.12, pos_cells=21)
        assert g.cell_size == pytest.approx(0.24 / 21)

    def test_center_cell_is_middle(self):
        g = GridSpec()
        assert g.bin_pos(0.0) == g.pos_cells // 2
        assert g.cell_center(g.pos_cells // 2) == 0.0

    def test_boundary_is_outside(self):
        g = GridSpec(pos_extent=0.12, pos_cells=21)
        assert g.bin_pos(0.1199) is not None
        assert g.bin_pos(0.1201) is None
        assert g.bin_pos(-0.1201) is None

    @given(st.floats(-0.119, 0.119))
    @settings(max_examples=200, deadline=None)
    def test_pos_round_trip_within_half_cell(self, x):
        g = GridSpec()
        i = g.bin_pos(x)
        assert i is not None
        assert abs(g.cell_center(i) - x) <= g.cell_size / 2 + 1e-12

    @given(st.floats(-math.pi, math.pi))
    @settings(max_examples=200, deadline=None)
    def test_angle_round_trip_within_half_bin(self, th):
        g = GridSpec(ang_bins=12)
        b = g.bin_angle(th)
        assert 0 <= b < 12
        d = abs(math.remainder(th - g.angle_center(b), 2 * math.pi))
        assert d <= math.pi / 12 + 1e-9

    def test_angle_wraps(self):
        g = GridSpec(ang_bins=12)
        assert g.bin_angle(2 * math.pi - 0.01) == 0
        assert g.bin_angle(-0.01) == 0
        assert g.bin_angle(math.pi) == 6
        assert g.bin_angle(-math.pi) == 6

    def test_slot_index_round_trip(self):
        g = GridSpec()
        for sid in (0, 17, 1234, g.slot_states - 1):
            cx, cy, ab = g.slot_unindex(sid)
            assert g.slot_index(cx, cy, ab) == sid

    def test_discretize_slot_offsets_by_center(self):
        g = GridSpec(slot_centers=((0.05, -0.02),))
        sid = g.discretize_slot(0, 0.05, -0.02, 0.0)
        mid = g.pos_cells // 2
        assert sid == g.slot_index(mid, mid, 0)

    def test_full_index_layout(self):
        g = GridSpec(ee_bins=4)
        assert g.full_index([0], 0) == 0
        assert g.full_index([0], 3) == 3
        assert g.full_index([1], 0) == 4
        assert g.full_states == g.slot_states * 4

    def test_chain_grid_slots(self):
        g = chain_grid(ObjectSpec(id=1, footprint=RECT), 0.01)
        (x0, y0), (x1, y1) = g.slot_centers
        assert x0 == pytest.approx(0.0475 + 0.01)
        assert x1 == pytest.approx(x0 + 0.095)
        assert y0 == y1 == 0.0


def test_chain_grid_disk():
    spec = ObjectSpec(id=1, footprint=Footprint.disk(0.04))
    g = chain_grid(spec, 0.01, n_slots=3)
    xs = [c[0] for c in g.slot_centers]
    assert xs[0] == pytest.approx(0.05)
    assert xs[1] == pytest.approx(0.13)
    assert xs[2] == pytest.approx(0.21)


# ---------------------------------------------------------------------------
# Actions
# ---------------------------------------------------------------------------


def test_default_actions_shape():
    acts = default_actions(step=0.01)
    assert len(acts) == 10
    assert acts[0].dx == pytest.approx(0.01) and acts[0].dy == 0.0
    for a in acts[:8]:
        assert a.translation == pytest.approx(0.01)
        assert a.dtheta == 0.0
    assert acts[8].translation == 0.0 and acts[8].dtheta > 0
    assert acts[9].dtheta == -acts[8].dtheta


def test_rotate_motion():
    m = rotate_motion(EeMotion(0.01, 0.0, 0.1), math.pi / 2)
    assert m.dx == pytest.approx(0.0, abs=1e-12)
    assert m.dy == pytest.approx(0.01)
    assert m.dtheta == 0.1


# ---------------------------------------------------------------------------
# Pocket terminals
# ---------------------------------------------------------------------------


class TestPocket:
    def test_rect_pocket_geometry(self):
        g = GridSpec()
        pk = pocket_slot_states(g, RECT, 0.01)
        mid = g.pos_cells // 2
        col = g.bin_pos(0.0475 + 0.01)
        expect = set()
        for cy in (mid - 1, mid, mid + 1):
            for ab in (0, 6):
                expect.add(g.slot_index(col, cy, ab))
        assert pk == expect

    def test_disk_pocket_any_heading(self):
        g = GridSpec(ang_bins=8)
        pk = pocket_slot_states(g, Footprint.disk(0.03), 0.01)
        assert len(pk) == 3 * 8

    def test_contact_outside_window_raises(self):
        g = GridSpec(pos_extent=0.03, pos_cells=5)
        with pytest.raises(ValueError):
            pocket_slot_states(g, RECT, 0.01)


# ---------------------------------------------------------------------------
# Value iteration
# ---------------------------------------------------------------------------


class TestValueIteration:
    def test_three_state_chain(self):
        m = TransitionModel(3, 1)
        m.add(0, 0, [1], [1.0])
        m.add(1, 0, [2], [1.0])
        V, pi, res = value_iteration(m, -1.0, 0.99, {2: 0.0})
        assert V[0] == pytest.approx(-1.99)
        assert V[1] == pytest.approx(-1.0)
        assert V[2] == 0.0
        assert res[-1] <= 1e-6

    def test_prefers_shortcut(self):
        # action 0 detours through state 1, action 1 jumps to the terminal
        m = TransitionModel(3, 2)
        m.add(0, 0, [1], [1.0])
        m.add(0, 1, [2], [1.0])
        m.add(1, 0, [2], [1.0])
        m.add(1, 1, [1], [1.0])
        V, pi, _ = value_iteration(m, -1.0, 0.9, {2: 0.0})
        assert pi[0] == 1
        assert V[0] == pytest.approx(-1.0)

    def test_tie_resolves_to_lowest_index(self):
        m = TransitionModel(2, 3)
        for a in range(3):
            m.add(0, a, [1], [1.0])
        _, pi, _ = value_iteration(m, -1.0, 0.9, {1: 0.0})
        assert pi[0] == 0

    def test_fixed_out_value(self):
        m = TransitionModel(2, 1)
        m.add(0, 0, [1], [1.0])
        out_v = -1.0 / (1 - 0.98)
        V, _, _ = value_iteration(m, -1.0, 0.98, {1: out_v})
        assert V[1] == out_v
        assert V[0] == pytest.approx(-1.0 + 0.98 * out_v)

    def test_stochastic_expectation(self):
        m = TransitionModel(3, 1)
        m.add(0, 0, [1, 2], [0.5, 0.5])
        m.add(1, 0, [2], [1.0])
        V, _, _ = value_iteration(m, -1.0, 1.0 - 1e-9, {2: 0.0})
        # half the time one extra step
        assert V[0] == pytest.approx(-1.5, abs=1e-6)

    def test_state_without_actions_aborts(self):
        m = TransitionModel(3, 1)
        m.add(0, 0, [2], [1.0])
        V, pi, _ = value_iteration(m, -1.0, 0.9, {2: 0.0})
        assert V[1] == -np.inf
        assert pi[1] == ABORT_ACTION

    def test_nonconvergence_raises(self):
        m = TransitionModel(2, 1)
        m.add(0, 0, [0], [1.0])
        with pytest.raises(RuntimeError):
            value_iteration(m, -1.0, 0.999999, {1: 0.0}, tol=1e-12, max_sweeps=3)

    def test_probability_validation(self):
        m = TransitionModel(2, 1)
        with pytest.raises(ValueError):
            m.add(0, 0, [1], [0.7])


# ---------------------------------------------------------------------------
# Transition estimation, one object
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def mini_setup():
    spec = ObjectSpec(id=1, footprint=RECT)
    grid = GridSpec(pos_extent=0.066, pos_cells=11, ang_bins=8, ee_bins=2)
    cfg = MdpConfig(samples_per_sa=4, seed=3)
    return spec, grid, cfg


@pytest.fixture(scope="module")
def mini_model(mini_setup):
    spec, grid, cfg = mini_setup
    return estimate_transitions_single(spec, grid, default_actions(), cfg)


class TestEstimateSingle:
    def test_distributions_normalized(self, mini_model):
        for (s, a), (nxt, pr) in mini_model.entries.items():
            assert sum(pr) == pytest.approx(1.0)
            assert len(nxt) == len(set(nxt))

    def test_every_state_action_present(self, mini_model, mini_setup):
        _, grid, _ = mini_setup
        for s in range(grid.slot_states):
            for a in range(10):
                assert (s, a) in mini_model.entries

    def test_rotation_actions_self_loop(self, mini_model, mini_setup):
        _, grid, _ = mini_setup
        for s in range(0, grid.slot_states, 37):
            for a in (8, 9):
                nxt, pr = mini_model.entries[(s, a)]
                assert nxt == (s,) and pr == (1.0,)

    def test_far_state_shifts_against_motion(self, mini_model, mini_setup):
        # object far in the corner, pusher steps +x: relative x drops a cell
        _, grid, _ = mini_setup
        s = grid.slot_index(10, 10, 0)
        nxt, pr = mini_model.entries[(s, 0)]
        best = nxt[int(np.argmax(pr))]
        cx, cy, ab = grid.slot_unindex(best)
        assert cy == 10 and ab == 0
        assert cx in (9, 10)
        assert sum(p for n, p in zip(nxt, pr) if grid.slot_unindex(n)[0] == 9) > 0.3

    def test_unplaceable_center_goes_out(self, mini_model, mini_setup):
        _, grid, _ = mini_setup
        mid = grid.pos_cells // 2
        s = grid.slot_index(mid, mid, 0)  # pusher inside the object
        OUT = grid.slot_states
        for a in range(8):
            nxt, pr = mini_model.entries[(s, a)]
            assert nxt == (OUT,) and pr == (1.0,)

    def test_deterministic_given_seed(self, mini_setup):
        spec, grid, cfg = mini_setup
        acts = default_actions()
        s = grid.slot_index(8, 3, 1)
        m1 = estimate_transitions_single(spec, GridSpec(
            pos_extent=grid.pos_extent, pos_cells=grid.pos_cells,
            ang_bins=grid.ang_bins, ee_bins=grid.ee_bins), acts, cfg)
        m2 = estimate_transitions_single(spec, grid, acts, cfg)
        assert m1.entries[(s, 2)] == m2.entries[(s, 2)]
        assert m1.entries == m2.entries


# ---------------------------------------------------------------------------
# Trained single-object policy
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def mini_table(mini_setup):
    spec, grid, cfg = mini_setup
    return train_policy([spec], grid, default_actions(), cfg)


class TestTrainedSingle:
    def test_values_nonpositive_and_pocket_zero(self, mini_table):
        t = mini_table
        assert np.all(t.values <= 1e-12)
        for sid in t.pocket[0]:
            for b in range(t.grid.ee_bins):
                assert t.values[t.grid.full_index([sid], b)] == 0.0

    def test_ee_heading_inert(self, mini_table):
        v = mini_table.values.reshape(-1, mini_table.grid.ee_bins)
        assert np.all(v == v[:, :1])

    def test_lookup_pocket_drives_forward(self, mini_table):
        d = 0.0475 + 0.01 + 0.001
        dec = policy_lookup(mini_table, Pose2(0, 0, 0), [Pose2(d, 0, 0)], 0.0)
        assert dec.kind == "drive"
        assert dec.motion.dx == pytest.approx(0.01)
        assert dec.motion.dy == pytest.approx(0.0, abs=1e-12)

    def test_lookup_rotates_with_travel_direction(self, mini_table):
        d = 0.0575
        th = 2.1
        ee = Pose2(0.3, -0.2, 0.5)
        obj = Pose2(0.3 + d * math.cos(th), -0.2 + d * math.sin(th), th)
        dec = policy_lookup(mini_table, ee, [obj], th)
        assert dec.kind == "drive"
        assert math.atan2(dec.motion.dy, dec.motion.dx) == pytest.approx(th)

    def test_lookup_out_of_window_aborts(self, mini_table):
        dec = policy_lookup(mini_table, Pose2(0, 0, 0), [Pose2(0.5, 0, 0)], 0.0)
        assert dec.kind == "abort"

    def test_lookup_recovery_action(self, mini_table):
        # object ahead-left and misaligned: some table action, not drive
        dec = policy_lookup(mini_table, Pose2(0, 0, 0), [Pose2(0.05, 0.04, 0.9)], 0.0)
        assert dec.kind == "table"
        assert dec.motion is not None

    def test_rollout_recovers_near_pocket(self, mini_table):
        spec = ObjectSpec(id=1, footprint=RECT)
        n = rollout_to_pocket(mini_table, [spec], [Pose2(0.062, 0.015, 0.1)],
                              travel_dir=0.3, max_steps=80)
        assert n is not None and n <= 40

    def test_rollout_already_in_pocket(self, mini_table):
        spec = ObjectSpec(id=1, footprint=RECT)
        n = rollout_to_pocket(mini_table, [spec], [Pose2(0.058, 0.0, 0.0)])
        assert n == 0


def test_policy_step_kick_varies_after_repeats(mini_table):
    rng = rng_stream(5, 1)
    ee = Pose2(0, 0, 0)
    obj = [Pose2(0.05, 0.04, 0.9)]
    visits = {}
    motions = set()
    for _ in range(12):
        dec = policy_step(mini_table, ee, obj, 0.0, visits, rng)
        assert dec.kind == "table"
        motions.add((round(dec.motion.dx, 6), round(dec.motion.dy, 6)))
    # repeat visits to one cell must stop returning one frozen answer
    assert len(motions) > 1


# ---------------------------------------------------------------------------
# Chain estimation and training
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def chain_setup():
    s1 = ObjectSpec(id=1, footprint=RECT)
    s2 = ObjectSpec(id=2, footprint=RECT)
    grid = chain_grid(s1, 0.01)
    cfg = MdpConfig(samples_per_sa=3, closure_cap=60, seed=5)
    return (s1, s2), grid, cfg


class TestChain:
    def test_closure_estimation(self, chain_setup):
        specs, grid, cfg = chain_setup
        model, local_of, slots = estimate_transitions_chain(
            list(specs), grid, default_actions(), cfg)
        assert len(slots) <= cfg.closure_cap
        assert model.n_states == len(slots) + 1
        for (s, a), (nxt, pr) in model.entries.items():
            assert sum(pr) == pytest.approx(1.0)
            assert all(0 <= n <= len(slots) for n in nxt)
        # formation state is explored first
        mid = grid.pos_cells // 2
        formation = (grid.slot_index(mid, mid, 0), grid.slot_index(mid, mid, 0))
        assert local_of[formation[0] * grid.slot_states + formation[1]] == 0

    def test_trained_chain_table(self, chain_setup):
        specs, grid, cfg = chain_setup
        table = train_policy(list(specs), grid, default_actions(), cfg)
        assert table.values.shape[0] == grid.full_states
        finite = np.isfinite(table.values)
        assert 0 < finite.sum() <= cfg.closure_cap * grid.ee_bins
        assert np.all(table.acts[~finite] == ABORT_ACTION)
        # formation lookup drives forward
        x0 = grid.slot_centers[0][0]
        x1 = grid.slot_centers[1][0]
        dec = policy_lookup(table, Pose2(0, 0, 0),
                            [Pose2(x0, 0, 0), Pose2(x1, 0, 0)], 0.0)
        assert dec.kind == "drive"
        # a state far outside the modeled closure aborts
        dec2 = policy_lookup(table, Pose2(0, 0, 0),
                             [Pose2(x0 - 0.04, 0.04, 2.0),
                              Pose2(x1 + 0.04, -0.04, -2.0)], 0.0)
        assert dec2.kind == "abort"


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


class TestNppt:
    def test_round_trip(self, mini_table, tmp_path):
        p = str(tmp_path / "t.nppt")
        mini_table.save(p)
        t2 = PolicyTable.load(p)
        assert t2.grid == mini_table.grid
        assert t2.actions == mini_table.actions
        assert t2.gamma == mini_table.gamma
        assert t2.pocket == mini_table.pocket
        assert np.array_equal(t2.values, mini_table.values)
        assert np.array_equal(t2.acts, mini_table.acts)

    def test_magic_enforced(self, mini_table, tmp_path):
        p = str(tmp_path / "t.nppt")
        mini_table.save(p)
        raw = bytearray(open(p, "rb").read())
        raw[:4] = b"XXXX"
        bad = tmp_path / "bad.nppt"
        bad.write_bytes(bytes(raw))
        with pytest.raises(ValueError):
            PolicyTable.load(str(bad))

    def test_version_enforced(self, mini_table, tmp_path):
        p = str(tmp_path / "t.nppt")
        mini_table.save(p)
        raw = bytearray(open(p, "rb").read())
        struct.pack_into("<I", raw, 4, 999)
        bad = tmp_path / "bad.nppt"
        bad.write_bytes(bytes(raw))
        with pytest.raises(ValueError):
            PolicyTable.load(str(bad))

    def test_truncated_rejected(self, mini_table, tmp_path):
        p = str(tmp_path / "t.nppt")
        mini_table.save(p)
        raw = open(p, "rb").read()
        bad = tmp_path / "bad.nppt"
        bad.write_bytes(raw[: len(raw) // 2])
        with pytest.raises((ValueError, struct.error)):
            PolicyTable.load(str(bad))

    def test_header_fields_little_endian(self, mini_table, tmp_path):
        p = str(tmp_path / "t.nppt")
        mini_table.save(p)
        raw = open(p, "rb").read()
        assert raw[:4] == b"NPPT"
        assert struct.unpack_from("<I", raw, 4)[0] == 1
        assert struct.unpack_from("<I", raw, 8)[0] == 1  # one slot
