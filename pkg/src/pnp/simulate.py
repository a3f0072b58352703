"""Synthetic ground-truth generators.

Two regimes replace the physical data collection rig:

* ``simulate_rigid`` -- a rigid rod oscillating with near-linear dynamics
  (the nominal training distribution); Gaussian white noise enters the
  angular velocity and is integrated to phase.
* ``simulate_wave`` -- a damped flexible string (wave equation in (p, q)
  first-order form), the out-of-distribution regime.

The wave simulator shares the RK4 stepper and the deflection
reconstruction with :mod:`pnp.integrate`, so ground truth and the
learned-model forecasts use identical numerics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from pnp import integrate as _int
from pnp.core import (
    ConfigurationError,
    RngSeed,
    SpaceTimeField,
    SpatialGrid,
    StateSnapshot,
    StateTrajectory,
    make_rng,
)


@dataclass(frozen=True)
class HalfSinePluck:
    amplitude: float = 1.0


@dataclass(frozen=True)
class GaussianBump:
    center: float
    width: float
    amplitude: float = 1.0


InitialProfile = HalfSinePluck | GaussianBump


@dataclass(frozen=True)
class WaveParams:
    """Damped wave (flexible string) configuration.

    ``wave_speed_sq`` is the squared propagation speed (tension over
    density); ``damping`` is the velocity-proportional loss rate.
    The CFL bound sqrt(wave_speed_sq)*dt/dz <= 1 is enforced here.
    """

    grid: SpatialGrid
    dt: float
    n_steps: int
    wave_speed_sq: float = 1.0
    damping: float = 0.0
    initial_profile: InitialProfile = HalfSinePluck()

    def __post_init__(self):
        if self.wave_speed_sq <= 0:
            raise ConfigurationError("wave_speed_sq must be positive")
        if self.damping < 0:
            raise ConfigurationError("damping must be >= 0")
        if self.dt <= 0 or self.n_steps < 1:
            raise ConfigurationError("dt must be positive and n_steps >= 1")
        cfl = math.sqrt(self.wave_speed_sq) * self.dt / self.grid.dz
        if cfl > 1.0:
            raise ConfigurationError(
                f"CFL violation: sqrt(wave_speed_sq)*dt/dz = {cfl:.3f} > 1"
            )


@dataclass(frozen=True)
class RigidOscillatorParams:
    """Rigid rod pivoting at z_min: s(t, z) = amplitude*(z - z_min)*sin(theta)."""

    grid: SpatialGrid
    dt: float
    n_steps: int
    angular_freq: float = 1.0
    amplitude: float = 1.0
    noise_std: float = 0.0

    def __post_init__(self):
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be >= 0")
        if self.dt <= 0 or self.n_steps < 1:
            raise ConfigurationError("dt must be positive and n_steps >= 1")


def central_difference_matrix(grid: SpatialGrid) -> np.ndarray:
    """Skew-symmetric central-difference d/dz with fixed-end rows and
    columns zeroed.  Shared stencil for the simulator and the learned
    operator."""
    n = grid.n_nodes
    h = 1.0 / (2.0 * grid.dz)
    D = np.zeros((n, n))
    for i in range(1, n - 1):
        D[i, i + 1] = h
        D[i, i - 1] = -h
    D[:, 0] = 0.0
    D[:, n - 1] = 0.0
    D[0, :] = 0.0
    D[n - 1, :] = 0.0
    return D


def wave_field_fn(params: WaveParams) -> Callable[[np.ndarray], np.ndarray]:
    """True stacked-state vector field of the damped wave system:
    dp/dt = -damping*p + wave_speed_sq * Dz q,  dq/dt = Dz p."""
    D = central_difference_matrix(params.grid)
    c2 = params.wave_speed_sq
    damping = params.damping
    n = params.grid.n_nodes

    def field(x: np.ndarray) -> np.ndarray:
        p, q = x[:n], x[n:]
        return np.concatenate([-damping * p + c2 * (D @ q), D @ p])

    return field


def _profile_values(profile: InitialProfile, grid: SpatialGrid) -> tuple[np.ndarray, np.ndarray]:
    """Initial deflection and its analytic z-derivative on the grid."""
    z = grid.nodes
    span = grid.z_max - grid.z_min
    u = (z - grid.z_min) / span
    if isinstance(profile, HalfSinePluck):
        s0 = profile.amplitude * np.sin(np.pi * u)
        q0 = profile.amplitude * (np.pi / span) * np.cos(np.pi * u)
    elif isinstance(profile, GaussianBump):
        r = z - profile.center
        s0 = profile.amplitude * np.exp(-0.5 * (r / profile.width) ** 2)
        q0 = -s0 * r / profile.width ** 2
    else:
        raise ConfigurationError(f"unknown initial profile {profile!r}")
    s0[0] = s0[-1] = 0.0
    return s0, q0


def wave_initial_state(params: WaveParams) -> StateSnapshot:
    """Release from rest: p = 0, q = analytic slope of the initial profile."""
    _, q0 = _profile_values(params.initial_profile, params.grid)
    return StateSnapshot(np.zeros(params.grid.n_nodes), q0)


def simulate_wave_states(params: WaveParams) -> StateTrajectory:
    """RK4 state trajectory of the damped wave system (fixed ends clamped)."""
    cfg = _int.IntegratorConfig(dt=params.dt, n_steps=params.n_steps, clamp_boundary=True)
    return _int.integrate(wave_field_fn(params), wave_initial_state(params), cfg,
                          grid=params.grid)


def simulate_wave(params: WaveParams, seed: RngSeed = 0) -> SpaceTimeField:
    """Deflection field of the flexible string.

    Deterministic (the seed is accepted for interface uniformity with
    the rigid simulator).  The deflection is reconstructed from the q
    channel exactly as :func:`pnp.integrate.predict_deflection` does, so
    forecast/ground-truth comparisons share one convention; boundary
    columns are exactly zero.
    """
    traj = simulate_wave_states(params)
    field = _int.predict_deflection(traj)
    values = np.array(field.values)
    values[:, 0] = 0.0
    values[:, -1] = 0.0
    return SpaceTimeField(params.grid, field.times, values)


def simulate_rigid(params: RigidOscillatorParams, seed: RngSeed = 0) -> SpaceTimeField:
    """Rigid-rod oscillation with white noise on the angular velocity.

    theta accumulates angular_freq + noise per step (Euler); the field is
    a straight line through the left endpoint at every instant.
    """
    rng = make_rng(seed)
    n_frames = params.n_steps + 1
    omega = np.full(n_frames - 1, params.angular_freq)
    if params.noise_std > 0:
        omega = omega + rng.normal(0.0, params.noise_std, size=n_frames - 1)
    theta = np.concatenate([[0.0], np.cumsum(omega * params.dt)])
    times = params.dt * np.arange(n_frames)
    arm = params.grid.nodes - params.grid.z_min
    values = params.amplitude * np.outer(np.sin(theta), arm)
    return SpaceTimeField(params.grid, times, values)


def add_observation_noise(field: SpaceTimeField, std: float, seed: RngSeed) -> SpaceTimeField:
    """Entry-wise i.i.d. Gaussian noise; std = 0 returns an identical field."""
    if std < 0:
        raise ConfigurationError("noise std must be >= 0")
    if std == 0:
        return field
    rng = make_rng(seed)
    noisy = field.values + rng.normal(0.0, std, size=field.values.shape)
    return field.with_values(noisy)


def discrete_energy(traj: StateTrajectory, wave_speed_sq: float) -> np.ndarray:
    """E(t) = sum_j (p_j^2 + wave_speed_sq * q_j^2)/2 * dz along a trajectory."""
    dz = traj.grid.dz
    return np.array([
        0.5 * dz * (np.sum(s.p ** 2) + wave_speed_sq * np.sum(s.q ** 2))
        for s in traj.states
    ])
