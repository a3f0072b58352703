"""Split-conformal calibration and the OOD/ID decision gate.

Scores K exchangeable calibration windows, takes the finite-sample
adjusted quantile C, and declares a new observation out-of-distribution
exactly when its score strictly exceeds C.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from pnp import nominal as _nominal
from pnp.core import (
    CalibrationError,
    ConfigurationError,
    DimensionError,
    InsufficientDataError,
    SpaceTimeField,
)

# guard against ceil() jumping a whole integer on float roundoff when
# (K+1)(1-delta) is mathematically integral
_CEIL_GUARD = 1e-9


@dataclass(frozen=True)
class ConformalCalibration:
    """Sorted scores with the adjusted-quantile threshold.

    threshold_C is the p-th smallest score with
    p = ceil((1 + 1/K)(1 - delta) K), i.e. the (1+1/K)(1-delta) empirical
    quantile; quantile_index_p is 1-based.
    """

    scores: np.ndarray
    delta: float
    threshold_C: float
    quantile_index_p: int

    @property
    def n_calibration(self) -> int:
        return self.scores.size


def min_calibration_size(delta: float) -> int:
    """Smallest K for which (1 + 1/K)(1 - delta) <= 1."""
    return max(1, math.ceil(1.0 / delta) - 1)


def nonconformity_score(prediction: np.ndarray, truth: np.ndarray,
                        norm: str = "max_abs") -> float:
    """Scalar prediction-error statistic over a forecast window.

    ``max_abs`` (default) is the maximum absolute entry-wise error;
    ``l2_mean`` is the root mean square error.
    """
    prediction = np.asarray(prediction, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if prediction.shape != truth.shape:
        raise DimensionError(
            f"shape mismatch {prediction.shape} vs {truth.shape}"
        )
    err = truth - prediction
    if norm == "max_abs":
        return float(np.max(np.abs(err)))
    if norm == "l2_mean":
        return float(np.sqrt(np.mean(err ** 2)))
    raise ConfigurationError(f"unknown score norm {norm!r}")


def calibrate(scores: np.ndarray, delta: float) -> ConformalCalibration:
    """Threshold C from K calibration scores at miscoverage delta."""
    if not 0 < delta < 1:
        raise ConfigurationError("delta must be in (0, 1)")
    scores = np.sort(np.asarray(scores, dtype=np.float64))
    K = scores.size
    level_times_k = (K + 1) * (1.0 - delta)
    if level_times_k - _CEIL_GUARD > K:
        raise CalibrationError(
            f"K = {K} too small for delta = {delta}; "
            f"need K >= {min_calibration_size(delta)}"
        )
    p = math.ceil(level_times_k - _CEIL_GUARD)
    p = min(max(p, 1), K)
    return ConformalCalibration(scores, delta, float(scores[p - 1]), p)


def decide(calib: ConformalCalibration, new_score: float) -> str:
    """'OOD' iff the new score strictly exceeds C; ties are ID."""
    return "OOD" if new_score > calib.threshold_C else "ID"


def window_scores(model: _nominal.NominalModel, field: SpaceTimeField,
                  stride: int | None = None, norm: str = "max_abs") -> np.ndarray:
    """Nonconformity scores of (h in, w out) windows over a field.

    Default stride is h + w (non-overlapping windows, the calibration
    convention); pass stride=1 for sliding windows.
    """
    h, w = model.config.history_h, model.config.horizon_w
    if field.grid.n_nodes != model.config.n_nodes:
        raise DimensionError(
            f"field has {field.grid.n_nodes} nodes, model expects "
            f"{model.config.n_nodes}"
        )
    if field.n_times < h + w:
        raise InsufficientDataError(f"need at least {h + w} frames")
    if stride is None:
        stride = h + w
    values = field.values
    scores = []
    for start in range(0, field.n_times - h - w + 1, stride):
        hist = values[start:start + h]
        truth = values[start + h:start + h + w]
        scores.append(nonconformity_score(_nominal.predict(model, hist), truth,
                                          norm=norm))
    return np.array(scores)


@dataclass(frozen=True, eq=False)
class GateResult:
    scores: np.ndarray
    flags: np.ndarray  # bool per window, True = OOD
    threshold_C: float
    flagged_fraction: float
    verdict: str  # overall 'OOD' if more than half the windows flag


def gate_trajectory(model: _nominal.NominalModel, field: SpaceTimeField,
                    calib: ConformalCalibration, stride: int = 1,
                    norm: str = "max_abs") -> GateResult:
    """Score sliding windows of a field and aggregate per-window OOD flags
    into one regime verdict (majority rule)."""
    scores = window_scores(model, field, stride=stride, norm=norm)
    flags = scores > calib.threshold_C
    frac = float(np.mean(flags))
    return GateResult(scores, flags, calib.threshold_C, frac,
                      "OOD" if frac > 0.5 else "ID")


def save_calibration(calib: ConformalCalibration, path) -> None:
    payload = {
        "scores": calib.scores.tolist(),
        "delta": calib.delta,
        "threshold_C": calib.threshold_C,
        "quantile_index_p": calib.quantile_index_p,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_calibration(path) -> ConformalCalibration:
    with open(path) as fh:
        payload = json.load(fh)
    return ConformalCalibration(
        np.array(payload["scores"]), payload["delta"],
        payload["threshold_C"], payload["quantile_index_p"],
    )
