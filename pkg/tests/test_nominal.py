import numpy as np
import pytest

from pnp import nominal, simulate
from pnp.core import (
    ConditioningError,
    DimensionError,
    InsufficientDataError,
    SpaceTimeField,
    SpatialGrid,
)


def _rigid_field(n_frames=400, noise_std=0.0, seed=0, n_nodes=12):
    params = simulate.RigidOscillatorParams(
        grid=SpatialGrid(n_nodes), dt=0.02, n_steps=n_frames - 1,
        angular_freq=2.0, amplitude=0.5, noise_std=noise_std)
    return simulate.simulate_rigid(params, seed)


def _cfg(n_nodes=12, **kw):
    defaults = dict(history_h=10, horizon_w=5, ridge_lambda=1e-6, n_nodes=n_nodes)
    defaults.update(kw)
    return nominal.PredictorConfig(**defaults)


def test_train_on_noiseless_rigid_generalizes():
    field = _rigid_field()
    model = nominal.train_nominal(field, _cfg(), split=0.8)
    # held-out window: rigid dynamics satisfy a linear recurrence, so the
    # one-window error stays tiny
    start = 350
    hist = field.values[start:start + 10]
    truth = field.values[start + 10:start + 15]
    pred = nominal.predict(model, hist)
    assert np.sqrt(np.mean((pred - truth) ** 2)) < 1e-3


def test_constant_field_prediction():
    grid = SpatialGrid(6)
    times = 0.1 * np.arange(60)
    field = SpaceTimeField(grid, times, np.full((60, 6), 0.42))
    model = nominal.train_nominal(field, _cfg(n_nodes=6))
    pred = nominal.predict(model, np.full((10, 6), 0.42))
    assert np.abs(pred - 0.42).max() < 1e-4


def test_infinite_ridge_zeroes_weights():
    field = _rigid_field(200)
    model = nominal.train_nominal(field, _cfg(ridge_lambda=1e12))
    assert np.abs(model.weights).max() < 1e-6
    pred = nominal.predict(model, field.values[:10])
    assert np.abs(pred).max() < 1e-4


def test_zero_ridge_on_singular_data_raises():
    grid = SpatialGrid(6)
    times = 0.1 * np.arange(60)
    field = SpaceTimeField(grid, times, np.full((60, 6), 1.0))
    with pytest.raises(ConditioningError):
        nominal.train_nominal(field, _cfg(n_nodes=6, ridge_lambda=0.0))


def test_too_few_frames():
    field = _rigid_field(20)
    with pytest.raises(InsufficientDataError):
        nominal.train_nominal(field, _cfg())


def test_predict_persistence_construction():
    # weights that copy the last history frame into every output frame
    cfg = _cfg(n_nodes=4)
    h, w, n = cfg.history_h, cfg.horizon_w, cfg.n_nodes
    W = np.zeros((h * n + 1, w * n))
    for k in range(w):
        for j in range(n):
            W[(h - 1) * n + j, k * n + j] = 1.0
    model = nominal.NominalModel(cfg, W)
    hist = np.arange(h * n, dtype=float).reshape(h, n)
    pred = nominal.predict(model, hist)
    for k in range(w):
        assert np.array_equal(pred[k], hist[-1])


def test_predict_shape_check_and_determinism():
    field = _rigid_field()
    model = nominal.train_nominal(field, _cfg())
    with pytest.raises(DimensionError):
        nominal.predict(model, np.zeros((3, 12)))
    hist = field.values[:10]
    assert np.array_equal(nominal.predict(model, hist),
                          nominal.predict(model, hist))


def test_predict_linear_in_history_without_bias():
    cfg = _cfg(n_nodes=3)
    rng = np.random.default_rng(8)
    W = rng.normal(size=(cfg.history_h * 3 + 1, cfg.horizon_w * 3))
    W[-1, :] = 0.0  # no bias
    model = nominal.NominalModel(cfg, W)
    h1 = rng.normal(size=(10, 3))
    h2 = rng.normal(size=(10, 3))
    lhs = nominal.predict(model, 2.0 * h1 + 3.0 * h2)
    rhs = 2.0 * nominal.predict(model, h1) + 3.0 * nominal.predict(model, h2)
    assert np.allclose(lhs, rhs, atol=1e-10)


def test_training_reduces_ridge_loss():
    field = _rigid_field(noise_std=0.05, seed=3)
    cfg = _cfg(ridge_lambda=0.1)
    model = nominal.train_nominal(field, cfg)
    X, Y = nominal._windows(field.values[:int(0.8 * 400) + 0], 10, 5)
    n_fit = int(round(0.8 * field.n_times))
    X, Y = nominal._windows(field.values[:n_fit], 10, 5)
    Phi = np.column_stack([X, np.ones(X.shape[0])])

    def loss(W):
        return np.sum((Phi @ W - Y) ** 2) + cfg.ridge_lambda * np.sum(W ** 2)

    assert loss(model.weights) <= loss(np.zeros_like(model.weights))


def test_rollout_blocks():
    field = _rigid_field()
    model = nominal.train_nominal(field, _cfg())
    hist = field.values[100:110]
    w = model.config.horizon_w
    single = nominal.predict(model, hist)
    assert np.array_equal(nominal.rollout(model, hist, w), single)
    double = nominal.rollout(model, hist, 2 * w)
    manual_second = nominal.predict(model, np.vstack([hist, single])[-10:])
    assert np.allclose(double[w:], manual_second, atol=1e-12)


def test_rollout_zero_model():
    cfg = _cfg(n_nodes=3)
    model = nominal.NominalModel(cfg, np.zeros((31, 15)))
    out = nominal.rollout(model, np.ones((10, 3)), 7)
    assert out.shape == (7, 3)
    assert np.abs(out).max() == 0.0


def test_model_json_round_trip(tmp_path):
    field = _rigid_field()
    model = nominal.train_nominal(field, _cfg())
    path = tmp_path / "model.json"
    nominal.save_model(model, path)
    back = nominal.load_model(path)
    assert back.config == model.config
    assert np.array_equal(back.weights, model.weights)
    hist = field.values[:10]
    assert np.array_equal(nominal.predict(back, hist),
                          nominal.predict(model, hist))
