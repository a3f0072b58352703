"""Denoising and derivative extraction from raw deflection fields.

Pipeline: per-node Kalman smoothing along time, then a single dense GP
over (t, z) with a separable squared-exponential kernel.  Closed-form
kernel derivatives of the posterior mean provide the p, q channels and
their time derivatives; spatial refinement queries the same surface on
a finer grid.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize

from pnp._linalg import chol_solve, jittered_cholesky
from pnp.core import (
    ConfigurationError,
    DataError,
    ExtrapolationError,
    InsufficientDataError,
    SpaceTimeField,
    SpatialGrid,
    StateSnapshot,
    StateTrajectory,
)

_DENSE_SAMPLE_BUDGET = 20_000


@dataclass(frozen=True)
class SmootherConfig:
    kalman_process_var: float = 1.0
    kalman_obs_var: float = 1e-4
    gp_lengthscale_t: float = 0.3
    gp_lengthscale_z: float = 0.3
    gp_signal_var: float = 1.0
    gp_noise_var: float = 1e-6
    jitter: float = 1e-8
    gp_optimize: bool = False

    def __post_init__(self):
        for name in ("kalman_process_var", "kalman_obs_var", "gp_lengthscale_t",
                     "gp_lengthscale_z", "gp_signal_var", "gp_noise_var", "jitter"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")


# ---------------------------------------------------------------------------
# Kalman filter + RTS smoother, constant-velocity model per node
# ---------------------------------------------------------------------------

def _smooth_column(y: np.ndarray, dts: np.ndarray, q: float, r: float) -> np.ndarray:
    n = y.size
    x = np.empty((n, 2))
    P = np.empty((n, 2, 2))
    x_pred = np.empty((n, 2))
    P_pred = np.empty((n, 2, 2))

    x[0] = [y[0], (y[1] - y[0]) / dts[0]]
    P[0] = np.diag([r, 2.0 * r / dts[0] ** 2 + q * dts[0]])
    x_pred[0] = x[0]
    P_pred[0] = P[0]

    for k in range(1, n):
        dt = dts[k - 1]
        F = np.array([[1.0, dt], [0.0, 1.0]])
        Q = q * np.array([[dt ** 3 / 3.0, dt ** 2 / 2.0],
                          [dt ** 2 / 2.0, dt]])
        xp = F @ x[k - 1]
        Pp = F @ P[k - 1] @ F.T + Q
        x_pred[k] = xp
        P_pred[k] = Pp
        innov = y[k] - xp[0]
        S = Pp[0, 0] + r
        K = Pp[:, 0] / S
        x[k] = xp + K * innov
        P[k] = Pp - np.outer(K, Pp[0, :])

    # RTS backward pass
    xs = x.copy()
    Ps = P.copy()
    for k in range(n - 2, -1, -1):
        dt = dts[k]
        F = np.array([[1.0, dt], [0.0, 1.0]])
        C = P[k] @ F.T @ np.linalg.inv(P_pred[k + 1])
        xs[k] = x[k] + C @ (xs[k + 1] - x_pred[k + 1])
        Ps[k] = P[k] + C @ (Ps[k + 1] - P_pred[k + 1]) @ C.T
    return xs[:, 0]


def kalman_smooth(field: SpaceTimeField, cfg: SmootherConfig) -> SpaceTimeField:
    """Constant-velocity Kalman filter + RTS smoother applied along time,
    independently for each grid node."""
    if field.n_times < 2:
        raise InsufficientDataError("need at least 2 time frames")
    dts = np.diff(field.times)
    out = np.empty_like(field.values)
    for j in range(field.grid.n_nodes):
        out[:, j] = _smooth_column(field.values[:, j], dts,
                                   cfg.kalman_process_var, cfg.kalman_obs_var)
    return field.with_values(out)


# ---------------------------------------------------------------------------
# Dense surface GP over (t, z)
# ---------------------------------------------------------------------------

def _se_kernel(X1: np.ndarray, X2: np.ndarray, sig2: float,
               lt: float, lz: float) -> np.ndarray:
    dt = X1[:, 0:1] - X2[None, :, 0]
    dz = X1[:, 1:2] - X2[None, :, 1]
    return sig2 * np.exp(-0.5 * (dt / lt) ** 2 - 0.5 * (dz / lz) ** 2)


class SurfaceGP:
    """GP over (t, z) with separable SE kernel and a fitted constant mean,
    conditioned on a field's samples.  Queries are read-only and
    thread-safe."""

    def __init__(self, X: np.ndarray, y: np.ndarray, grid: SpatialGrid,
                 cfg: SmootherConfig, jitter_used: float,
                 L: np.ndarray, alpha: np.ndarray, y_mean: float):
        self.X = X
        self.y = y
        self.grid = grid
        self.cfg = cfg
        self.jitter_used = jitter_used
        self._L = L
        self._alpha = alpha
        self.y_mean = y_mean
        self.t_min = float(X[:, 0].min())
        self.t_max = float(X[:, 0].max())

    # -- derivative weights of the separable SE kernel ---------------------
    def _cross_terms(self, t: np.ndarray, z: np.ndarray):
        dt = t[:, None] - self.X[None, :, 0]
        dz = z[:, None] - self.X[None, :, 1]
        lt2 = self.cfg.gp_lengthscale_t ** 2
        lz2 = self.cfg.gp_lengthscale_z ** 2
        k = self.cfg.gp_signal_var * np.exp(-0.5 * dt ** 2 / lt2 - 0.5 * dz ** 2 / lz2)
        return k, dt, dz, lt2, lz2

    def mean(self, t: np.ndarray, z: np.ndarray) -> np.ndarray:
        k, _, _, _, _ = self._cross_terms(np.asarray(t, float), np.asarray(z, float))
        return k @ self._alpha + self.y_mean

    def mean_derivatives(self, t: np.ndarray, z: np.ndarray) -> dict:
        """Posterior-mean value and derivatives at query points.

        Returns s, ds_dt, ds_dz, d2s_dt2, d2s_dtdz arrays (one entry per
        query point), all from closed-form SE-kernel derivative weights.
        """
        k, dt, dz, lt2, lz2 = self._cross_terms(np.asarray(t, float),
                                                np.asarray(z, float))
        a = self._alpha
        return {
            "s": k @ a + self.y_mean,
            "ds_dt": (-dt / lt2 * k) @ a,
            "ds_dz": (-dz / lz2 * k) @ a,
            "d2s_dt2": ((dt ** 2 / lt2 ** 2 - 1.0 / lt2) * k) @ a,
            "d2s_dtdz": (dt * dz / (lt2 * lz2) * k) @ a,
        }


def _nlml_surface(X, y, log_params, jitter):
    if not np.all(np.isfinite(log_params)) or np.max(np.abs(log_params)) > 40:
        return 1e12
    sig2, lt, lz, noise = np.exp(log_params)
    K = _se_kernel(X, X, sig2, lt, lz)
    K[np.diag_indices_from(K)] += noise
    try:
        L, _ = jittered_cholesky(K, jitter)
    except Exception:
        return 1e12
    alpha = chol_solve(L, y)
    return float(0.5 * y @ alpha + np.sum(np.log(np.diag(L)))
                 + 0.5 * y.size * np.log(2.0 * np.pi))


def fit_surface_gp(field: SpaceTimeField, cfg: SmootherConfig) -> SurfaceGP:
    """Condition the surface GP on every field sample.

    Total sample count must stay within the dense-Cholesky budget
    (20,000); subsample the field first if it does not.  Hyperparameters
    come from the config, or from NLML minimization when
    ``cfg.gp_optimize`` is set.
    """
    if not np.all(np.isfinite(field.values)):
        raise DataError("field contains non-finite entries")
    n_samples = field.n_times * field.grid.n_nodes
    if n_samples > _DENSE_SAMPLE_BUDGET:
        raise DataError(
            f"{n_samples} samples exceed the dense budget {_DENSE_SAMPLE_BUDGET}; "
            "subsample the field first"
        )
    tt, zz = np.meshgrid(field.times, field.grid.nodes, indexing="ij")
    X = np.column_stack([tt.ravel(), zz.ravel()])
    y_mean = float(np.mean(field.values))
    y = field.values.ravel() - y_mean

    if cfg.gp_optimize:
        x0 = np.log([cfg.gp_signal_var, cfg.gp_lengthscale_t,
                     cfg.gp_lengthscale_z, cfg.gp_noise_var])
        res = minimize(lambda lp: _nlml_surface(X, y, lp, cfg.jitter), x0,
                       method="L-BFGS-B")
        sig2, lt, lz, noise = np.exp(res.x)
        cfg = replace(cfg, gp_signal_var=float(sig2), gp_lengthscale_t=float(lt),
                      gp_lengthscale_z=float(lz), gp_noise_var=float(noise),
                      gp_optimize=False)

    K = _se_kernel(X, X, cfg.gp_signal_var, cfg.gp_lengthscale_t, cfg.gp_lengthscale_z)
    K[np.diag_indices_from(K)] += cfg.gp_noise_var
    L, jitter_used = jittered_cholesky(K, cfg.jitter)
    alpha = chol_solve(L, y)
    return SurfaceGP(X, y, field.grid, cfg, jitter_used, L, alpha, y_mean)


def estimate_derivatives(gp: SurfaceGP, times: np.ndarray,
                         grid: SpatialGrid) -> StateTrajectory:
    """Differentiate the fitted surface at a times x grid tensor product.

    p = ds/dt, q = ds/dz; the derivative channel holds dp/dt = d2s/dt2
    and dq/dt = d2s/dtdz.  Queries must stay inside the fitted time range
    (no temporal extrapolation).
    """
    times = np.asarray(times, dtype=np.float64)
    tol = 1e-9 * max(1.0, abs(gp.t_max))
    if times.min() < gp.t_min - tol or times.max() > gp.t_max + tol:
        raise ExtrapolationError(
            f"queries [{times.min():g}, {times.max():g}] outside fitted "
            f"range [{gp.t_min:g}, {gp.t_max:g}]"
        )
    nodes = grid.nodes
    states, derivs = [], []
    for t in times:
        d = gp.mean_derivatives(np.full(nodes.size, t), nodes)
        states.append(StateSnapshot(d["ds_dt"], d["ds_dz"]))
        derivs.append(StateSnapshot(d["d2s_dt2"], d["d2s_dtdz"]))
    return StateTrajectory(grid, times, tuple(states), tuple(derivs))


def augment_spatial(gp: SurfaceGP, times: np.ndarray, n_e: int) -> StateTrajectory:
    """Same time stamps on a spatially refined grid with n_e nodes."""
    if n_e < gp.grid.n_nodes:
        raise ConfigurationError(
            f"n_e = {n_e} must be >= the source grid size {gp.grid.n_nodes}"
        )
    return estimate_derivatives(gp, times, gp.grid.refined(n_e))


def subsample_time(field: SpaceTimeField, stride: int) -> SpaceTimeField:
    """Every stride-th frame (keeps the first frame)."""
    if stride < 1:
        raise ConfigurationError("stride must be >= 1")
    return SpaceTimeField(field.grid, field.times[::stride], field.values[::stride])
