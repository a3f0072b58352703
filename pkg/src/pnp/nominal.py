"""Pluggable nominal predictor: h frames in, w frames out.

The reference implementation is a ridge-regularized linear autoregressive
model fit on sliding windows (stride 1).  Any predictor exposing
``predict(history) -> forecast`` with the same window contract can be
swapped in; the conformal gate only touches that surface.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from pnp.core import (
    ConditioningError,
    ConfigurationError,
    DimensionError,
    InsufficientDataError,
    SpaceTimeField,
)


@dataclass(frozen=True)
class PredictorConfig:
    history_h: int = 10
    horizon_w: int = 5
    ridge_lambda: float = 1e-6
    n_nodes: int = 100

    def __post_init__(self):
        if self.history_h < 1 or self.horizon_w < 1:
            raise ConfigurationError("history_h and horizon_w must be >= 1")
        if self.ridge_lambda < 0:
            raise ConfigurationError("ridge_lambda must be >= 0")


@dataclass(frozen=True, eq=False)
class NominalModel:
    """Linear map from flattened history (plus bias) to flattened forecast."""

    config: PredictorConfig
    weights: np.ndarray  # [(h*n + 1) x (w*n)]
    train_rmse: float = float("nan")

    def __post_init__(self):
        h, w, n = self.config.history_h, self.config.horizon_w, self.config.n_nodes
        if self.weights.shape != (h * n + 1, w * n):
            raise DimensionError(
                f"weights shape {self.weights.shape} != ({h * n + 1}, {w * n})"
            )
        if not np.all(np.isfinite(self.weights)):
            raise ConfigurationError("weights must be finite")


def _windows(values: np.ndarray, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    n_frames = values.shape[0]
    n_win = n_frames - h - w + 1
    X = np.stack([values[i:i + h].ravel() for i in range(n_win)])
    Y = np.stack([values[i + h:i + h + w].ravel() for i in range(n_win)])
    return X, Y


def train_nominal(data: SpaceTimeField, cfg: PredictorConfig,
                  split: float = 1.0) -> NominalModel:
    """Ridge least squares over sliding windows of the first ``split``
    fraction of frames.

    With ridge_lambda = 0 a singular normal matrix raises a conditioning
    error suggesting ridge.
    """
    h, w = cfg.history_h, cfg.horizon_w
    if data.grid.n_nodes != cfg.n_nodes:
        raise DimensionError(
            f"field has {data.grid.n_nodes} nodes, config expects {cfg.n_nodes}"
        )
    if data.n_times < h + w + 10:
        raise InsufficientDataError(f"need at least {h + w + 10} frames")
    if not 0 < split <= 1:
        raise ConfigurationError("split must be in (0, 1]")

    n_fit = max(h + w, int(round(split * data.n_times)))
    X, Y = _windows(data.values[:n_fit], h, w)
    Phi = np.column_stack([X, np.ones(X.shape[0])])
    G = Phi.T @ Phi
    if cfg.ridge_lambda == 0:
        if np.linalg.cond(G) > 1e12:
            raise ConditioningError(
                "normal equations are singular; set ridge_lambda > 0"
            )
    G[np.diag_indices_from(G)] += cfg.ridge_lambda
    weights = np.linalg.solve(G, Phi.T @ Y)
    resid = Phi @ weights - Y
    rmse = float(np.sqrt(np.mean(resid ** 2)))
    return NominalModel(cfg, weights, rmse)


def predict(model: NominalModel, history: np.ndarray) -> np.ndarray:
    """Forecast the next w frames from an [h x n_nodes] history block."""
    h, w, n = model.config.history_h, model.config.horizon_w, model.config.n_nodes
    history = np.asarray(history, dtype=np.float64)
    if history.shape != (h, n):
        raise DimensionError(f"history shape {history.shape} != ({h}, {n})")
    phi = np.concatenate([history.ravel(), [1.0]])
    return (phi @ model.weights).reshape(w, n)


def rollout(model: NominalModel, history: np.ndarray, n_future: int) -> np.ndarray:
    """Autoregressive forecast of n_future frames, feeding predictions
    back as history in blocks of w."""
    if n_future < 1:
        raise ConfigurationError("n_future must be >= 1")
    h = model.config.history_h
    buf = np.asarray(history, dtype=np.float64).copy()
    out = []
    while sum(b.shape[0] for b in out) < n_future:
        block = predict(model, buf[-h:])
        out.append(block)
        buf = np.vstack([buf, block])
    return np.vstack(out)[:n_future]


def save_model(model: NominalModel, path) -> None:
    payload = {
        "config": asdict(model.config),
        "train_rmse": model.train_rmse,
        "weights": model.weights.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_model(path) -> NominalModel:
    with open(path) as fh:
        payload = json.load(fh)
    cfg = PredictorConfig(**payload["config"])
    return NominalModel(cfg, np.array(payload["weights"]), payload["train_rmse"])
