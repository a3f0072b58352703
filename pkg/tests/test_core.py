import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pnp import core, preprocess
from pnp.core import (
    DataError,
    DimensionError,
    InsufficientDataError,
    SpaceTimeField,
    SpatialGrid,
    StateSnapshot,
    StateTrajectory,
    stack_state,
)


def test_grid_endpoints_exact():
    grid = SpatialGrid(7, 0.25, 1.75)
    assert grid.nodes[0] == 0.25
    assert grid.nodes[-1] == 1.75
    assert grid.dz > 0
    assert np.all(np.diff(grid.nodes) > 0)


def test_grid_too_small():
    with pytest.raises(core.ConfigurationError):
        SpatialGrid(2)


def test_stack_state_zero_case():
    snap = stack_state([0, 0, 0], [0, 0, 0])
    assert np.array_equal(snap.flatten(), np.zeros(6))


def test_flatten_is_p_then_q():
    snap = stack_state([1.0, 2.0], [3.0, 4.0])
    flat = snap.flatten()
    assert np.array_equal(flat, [1.0, 2.0, 3.0, 4.0])
    back = StateSnapshot.from_flat(flat)
    assert np.array_equal(back.p, snap.p)
    assert np.array_equal(back.q, snap.q)


def test_stack_state_length_mismatch():
    with pytest.raises(DimensionError):
        stack_state([1.0, 2.0], [3.0])


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 32 - 1))
def test_flatten_round_trip_random(seed):
    rng = core.make_rng(seed)
    p = rng.normal(size=50)
    q = rng.normal(size=50)
    snap = stack_state(p, q)
    back = StateSnapshot.from_flat(snap.flatten())
    assert np.array_equal(back.p, p)
    assert np.array_equal(back.q, q)


def test_field_validation():
    grid = SpatialGrid(3)
    with pytest.raises(DimensionError):
        SpaceTimeField(grid, np.array([0.0, 1.0]), np.zeros((2, 4)))
    with pytest.raises(DataError):
        SpaceTimeField(grid, np.array([0.0, 0.0]), np.zeros((2, 3)))
    with pytest.raises(DataError):
        bad = np.zeros((2, 3))
        bad[0, 0] = np.nan
        SpaceTimeField(grid, np.array([0.0, 1.0]), bad)


def test_field_immutable():
    grid = SpatialGrid(3)
    field = SpaceTimeField(grid, np.array([0.0, 1.0]), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        field.values[0, 0] = 1.0


def test_trajectory_length_checks():
    grid = SpatialGrid(3)
    snaps = (stack_state(np.zeros(3), np.zeros(3)),)
    with pytest.raises(DimensionError):
        StateTrajectory(grid, np.array([0.0, 1.0]), snaps)
    traj = StateTrajectory(grid, np.array([0.0]), snaps, snaps)
    assert len(traj) == 1
    assert traj.stacked_states().shape == (1, 6)


_SMOOTH_CFG = preprocess.SmootherConfig(gp_lengthscale_t=0.9, gp_lengthscale_z=0.5,
                                        gp_signal_var=1.0, gp_noise_var=1e-8)


def test_field_to_trajectory_analytic():
    # s(t,z) = sin(pi z) cos(2t) on a 20x11 grid; compare GP derivatives
    # against the closed forms
    grid = SpatialGrid(11)
    times = np.linspace(0.0, 3.0, 20)
    z = grid.nodes
    values = np.sin(np.pi * z)[None, :] * np.cos(2.0 * times)[:, None]
    field = SpaceTimeField(grid, times, values)
    traj = core.field_to_trajectory(field, _SMOOTH_CFG)
    p = np.array([s.p for s in traj.states])
    q = np.array([s.q for s in traj.states])
    p_true = -2.0 * np.sin(np.pi * z)[None, :] * np.sin(2.0 * times)[:, None]
    q_true = np.pi * np.cos(np.pi * z)[None, :] * np.cos(2.0 * times)[:, None]
    assert np.abs(p - p_true).max() < 0.05
    assert np.abs(q - q_true).max() < 0.05
    assert traj.derivs is not None


def test_field_to_trajectory_constant():
    grid = SpatialGrid(9)
    times = np.linspace(0.0, 1.0, 12)
    field = SpaceTimeField(grid, times, np.full((12, 9), 0.7))
    traj = core.field_to_trajectory(field, _SMOOTH_CFG)
    assert np.abs(np.array([s.p for s in traj.states])).max() < 1e-5
    assert np.abs(np.array([s.q for s in traj.states])).max() < 1e-5


def test_field_to_trajectory_linear_ramp():
    grid = SpatialGrid(9)
    times = np.linspace(0.0, 1.0, 12)
    field = SpaceTimeField(grid, times, np.tile(grid.nodes, (12, 1)))
    traj = core.field_to_trajectory(field, _SMOOTH_CFG)
    q = np.array([s.q for s in traj.states])
    p = np.array([s.p for s in traj.states])
    assert np.abs(q[:, 2:-2] - 1.0).max() < 0.02
    assert np.abs(p).max() < 0.02


def test_field_to_trajectory_too_few_frames():
    grid = SpatialGrid(5)
    field = SpaceTimeField(grid, np.array([0.0, 0.1, 0.2]), np.zeros((3, 5)))
    with pytest.raises(InsufficientDataError):
        core.field_to_trajectory(field, _SMOOTH_CFG)


def test_field_csv_round_trip(tmp_path):
    grid = SpatialGrid(4, 0.0, 3.0)
    rng = core.make_rng(0)
    field = SpaceTimeField(grid, np.array([0.0, 0.5, 1.0]), rng.normal(size=(3, 4)))
    path = tmp_path / "field.csv"
    core.write_field_csv(field, path)
    back = core.read_field_csv(path)
    assert np.array_equal(back.values, field.values)
    assert np.array_equal(back.times, field.times)
    assert back.grid.n_nodes == 4


def test_trajectory_csv_round_trip(tmp_path):
    grid = SpatialGrid(3)
    rng = core.make_rng(1)
    states = tuple(stack_state(rng.normal(size=3), rng.normal(size=3)) for _ in range(4))
    derivs = tuple(stack_state(rng.normal(size=3), rng.normal(size=3)) for _ in range(4))
    traj = StateTrajectory(grid, np.linspace(0, 1, 4), states, derivs)
    path = tmp_path / "traj.csv"
    core.write_trajectory_csv(traj, path)
    back = core.read_trajectory_csv(path)
    assert np.array_equal(back.stacked_states(), traj.stacked_states())
    assert np.array_equal(back.stacked_derivs(), traj.stacked_derivs())


def test_resample_field_identity_and_interp():
    grid = SpatialGrid(5)
    field = SpaceTimeField(grid, np.array([0.0, 1.0]), np.tile(grid.nodes, (2, 1)))
    same = core.resample_field(field, grid)
    assert np.allclose(same.values, field.values)
    finer = core.resample_field(field, SpatialGrid(9))
    # linear field is reproduced exactly by linear interpolation
    assert np.allclose(finer.values, np.tile(SpatialGrid(9).nodes, (2, 1)))
