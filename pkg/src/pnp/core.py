"""Shared domain types: spatial grids, space-time fields, stacked states.

Every other module consumes these containers.  All types are immutable
after construction (arrays are copied in and marked read-only), so
instances can be shared freely across threads.

The canonical stacked-state layout is the p-block followed by the
q-block; ``StateSnapshot.flatten`` / ``StateSnapshot.from_flat`` are the
single source of truth for that ordering.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field

import numpy as np

# 64-bit unsigned seed; the same seed yields bit-identical stochastic
# output on one platform (numpy PCG64).
RngSeed = int


def make_rng(seed: RngSeed) -> np.random.Generator:
    """Deterministic generator for a seed value."""
    return np.random.default_rng(seed)


class PnpError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(PnpError):
    """Array shapes inconsistent with the declared grid/config."""


class ConfigurationError(PnpError):
    """Invalid parameter values (CFL violation, negative variance, ...)."""


class DataError(PnpError):
    """Input data unusable (non-finite entries, too few frames, ...)."""


class InsufficientDataError(DataError):
    """Not enough frames/samples for the requested operation."""


class ConditioningError(PnpError):
    """Linear algebra failed even after jitter escalation."""


class CalibrationError(PnpError):
    """Conformal calibration impossible for the given K and delta."""


class ExtrapolationError(PnpError):
    """Query outside the fitted time range."""


class DivergenceError(PnpError):
    """Integration produced a non-finite state."""

    def __init__(self, step_index: int):
        self.step_index = step_index
        super().__init__(f"non-finite state at integration step {step_index}")


class OptimizationError(PnpError):
    """Hyperparameter optimization could not make progress."""


class StageError(PnpError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")


class Boundary(enum.Enum):
    FIXED_ENDS = "fixed-ends"


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class SpatialGrid:
    """Regular 1-D spatial grid with fixed-end boundary.

    Attributes
    ----------
    n_nodes : number of grid nodes (>= 3).
    z_min, z_max : domain endpoints.
    boundary : boundary condition marker (fixed ends only).
    """

    n_nodes: int
    z_min: float = 0.0
    z_max: float = 1.0
    boundary: Boundary = Boundary.FIXED_ENDS

    def __post_init__(self):
        if self.n_nodes < 3:
            raise ConfigurationError(f"n_nodes must be >= 3, got {self.n_nodes}")
        if not self.z_max > self.z_min:
            raise ConfigurationError("z_max must exceed z_min")

    @property
    def dz(self) -> float:
        return (self.z_max - self.z_min) / (self.n_nodes - 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.z_min, self.z_max, self.n_nodes)

    def refined(self, n_nodes: int) -> "SpatialGrid":
        """Same domain with a different node count."""
        return SpatialGrid(n_nodes, self.z_min, self.z_max, self.boundary)


@dataclass(frozen=True, eq=False)
class SpaceTimeField:
    """Scalar observations s(t_i, z_j) on a regular space-time grid.

    ``values`` has one row per time, one column per node.  Construction
    validates shape and finiteness; arrays are stored read-only.
    """

    grid: SpatialGrid
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "times", _readonly(self.times))
        object.__setattr__(self, "values", _readonly(self.values))
        if self.times.ndim != 1:
            raise DimensionError("times must be 1-D")
        if np.any(np.diff(self.times) <= 0):
            raise DataError("times must be strictly increasing")
        if self.values.shape != (self.times.size, self.grid.n_nodes):
            raise DimensionError(
                f"values shape {self.values.shape} != "
                f"({self.times.size}, {self.grid.n_nodes})"
            )
        if not np.all(np.isfinite(self.values)) or not np.all(np.isfinite(self.times)):
            raise DataError("field contains non-finite entries")

    @property
    def n_times(self) -> int:
        return self.times.size

    def with_values(self, values: np.ndarray) -> "SpaceTimeField":
        return SpaceTimeField(self.grid, self.times, values)


@dataclass(frozen=True, eq=False)
class StateSnapshot:
    """Stacked dPHS state at one instant: p (time-derivative channel)
    and q (space-derivative channel), one entry per grid node."""

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p", _readonly(self.p))
        object.__setattr__(self, "q", _readonly(self.q))
        if self.p.ndim != 1 or self.q.ndim != 1 or self.p.size != self.q.size:
            raise DimensionError("p and q must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(self.p)) and np.all(np.isfinite(self.q))):
            raise DataError("state contains non-finite entries")

    @property
    def n_nodes(self) -> int:
        return self.p.size

    def flatten(self) -> np.ndarray:
        """Canonical [p; q] layout consumed by gpdphs and integrate."""
        return np.concatenate([self.p, self.q])

    @classmethod
    def from_flat(cls, x: np.ndarray) -> "StateSnapshot":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1 or x.size % 2 != 0:
            raise DimensionError("flat state must be 1-D with even length")
        n = x.size // 2
        return cls(x[:n], x[n:])


def stack_state(p: np.ndarray, q: np.ndarray) -> StateSnapshot:
    """Bundle p and q channels into a snapshot; flatten/from_flat round-trip exactly."""
    return StateSnapshot(np.asarray(p), np.asarray(q))


@dataclass(frozen=True, eq=False)
class StateTrajectory:
    """Time series of stacked states, optionally with their time derivatives."""

    grid: SpatialGrid
    times: np.ndarray
    states: tuple
    derivs: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "times", _readonly(self.times))
        object.__setattr__(self, "states", tuple(self.states))
        if self.derivs is not None:
            object.__setattr__(self, "derivs", tuple(self.derivs))
            if len(self.derivs) != len(self.states):
                raise DimensionError("derivs and states must have equal length")
        if len(self.states) != self.times.size:
            raise DimensionError("states and times must have equal length")
        for s in self.states:
            if s.n_nodes != self.grid.n_nodes:
                raise DimensionError("snapshot size does not match grid")

    def __len__(self) -> int:
        return len(self.states)

    def stacked_states(self) -> np.ndarray:
        """Matrix [n_times x 2n] of flattened states."""
        return np.array([s.flatten() for s in self.states])

    def stacked_derivs(self) -> np.ndarray:
        if self.derivs is None:
            raise DataError("trajectory has no derivative channel")
        return np.array([d.flatten() for d in self.derivs])


def field_to_trajectory(field: SpaceTimeField, smoother_cfg) -> StateTrajectory:
    """Convert an observed field into (p, q) states with time derivatives.

    Fits the preprocess surface GP to the field and differentiates it at
    the original sample points.
    """
    # local import: preprocess depends on core
    from pnp import preprocess

    if field.n_times < 4:
        raise InsufficientDataError("need at least 4 time frames")
    gp = preprocess.fit_surface_gp(field, smoother_cfg)
    return preprocess.estimate_derivatives(gp, field.times, field.grid)


def resample_field(field: SpaceTimeField, grid: SpatialGrid) -> SpaceTimeField:
    """Linear interpolation of every frame onto a different regular grid."""
    src = field.grid.nodes
    dst = grid.nodes
    values = np.array([np.interp(dst, src, row) for row in field.values])
    return SpaceTimeField(grid, field.times, values)


# ---------------------------------------------------------------------------
# CSV interchange.  Field CSV: header t,z,s, one row per (time, node) sample,
# nodes in grid order, row-major by time.  Trajectory CSV adds the derivative
# channels: t,z,p,q,dpdt,dqdt.
# ---------------------------------------------------------------------------

def write_field_csv(field: SpaceTimeField, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "z", "s"])
        nodes = field.grid.nodes
        for i, t in enumerate(field.times):
            for j, z in enumerate(nodes):
                w.writerow([repr(float(t)), repr(float(z)), repr(float(field.values[i, j]))])


def read_field_csv(path) -> SpaceTimeField:
    t_col, z_col, s_col = [], [], []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if [h.strip() for h in header] != ["t", "z", "s"]:
            raise DataError(f"expected header t,z,s, got {header}")
        for row in r:
            t_col.append(float(row[0]))
            z_col.append(float(row[1]))
            s_col.append(float(row[2]))
    t = np.array(t_col)
    z = np.array(z_col)
    s = np.array(s_col)
    times = np.unique(t)
    n_nodes = int(np.sum(t == t[0]))
    if t.size != times.size * n_nodes:
        raise DataError("field CSV is not a complete regular grid")
    nodes = z[:n_nodes]
    grid = SpatialGrid(n_nodes, float(nodes[0]), float(nodes[-1]))
    if not np.allclose(nodes, grid.nodes, rtol=0, atol=1e-9 * max(1.0, abs(nodes[-1]))):
        raise DataError("nodes in field CSV are not on a regular grid")
    return SpaceTimeField(grid, times, s.reshape(times.size, n_nodes))


def write_trajectory_csv(traj: StateTrajectory, path) -> None:
    X = traj.stacked_states()
    D = traj.stacked_derivs() if traj.derivs is not None else None
    n = traj.grid.n_nodes
    nodes = traj.grid.nodes
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "z", "p", "q", "dpdt", "dqdt"])
        for i, t in enumerate(traj.times):
            for j in range(n):
                row = [repr(float(t)), repr(float(nodes[j])),
                       repr(float(X[i, j])), repr(float(X[i, n + j]))]
                if D is not None:
                    row += [repr(float(D[i, j])), repr(float(D[i, n + j]))]
                else:
                    row += ["", ""]
                w.writerow(row)


def read_trajectory_csv(path) -> StateTrajectory:
    rows = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if [h.strip() for h in header] != ["t", "z", "p", "q", "dpdt", "dqdt"]:
            raise DataError(f"expected header t,z,p,q,dpdt,dqdt, got {header}")
        rows = list(r)
    t = np.array([float(r[0]) for r in rows])
    z = np.array([float(r[1]) for r in rows])
    times = np.unique(t)
    n_nodes = int(np.sum(t == t[0]))
    nodes = z[:n_nodes]
    grid = SpatialGrid(n_nodes, float(nodes[0]), float(nodes[-1]))
    has_derivs = rows[0][4] != ""
    states, derivs = [], []
    for i in range(times.size):
        chunk = rows[i * n_nodes:(i + 1) * n_nodes]
        p = np.array([float(r[2]) for r in chunk])
        q = np.array([float(r[3]) for r in chunk])
        states.append(StateSnapshot(p, q))
        if has_derivs:
            dp = np.array([float(r[4]) for r in chunk])
            dq = np.array([float(r[5]) for r in chunk])
            derivs.append(StateSnapshot(dp, dq))
    return StateTrajectory(grid, times, tuple(states),
                           tuple(derivs) if has_derivs else None)
