from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from restoration_attack.errors import (
    EmptyDataset,
    NonUniformSpacing,
    SeriesTooShort,
    ShapeMismatch,
)
from restoration_attack.forecast import (
    J,
    ForecastModel,
    build_windows,
    fit_normalizer,
    init_model,
    stack,
    train,
)

T0 = datetime(2024, 3, 1, tzinfo=timezone.utc)


def _series(n, seed=0, load=None):
    rng = np.random.default_rng(seed)
    temp = rng.uniform(0, 1, n)
    if load is None:
        load = np.r_[0.1, 0.3 * temp[:-1] + 0.1]
    return [(T0 + timedelta(hours=i), float(load[i]), float(temp[i]), *rng.uniform(0, 1, 3)) for i in range(n)]


def test_window_count():
    assert len(build_windows(_series(100), H=72)) == 28


def test_single_window_targets_last_row():
    rows = _series(73)
    (sample,) = build_windows(rows, H=72)
    assert sample.target == rows[72][1]
    assert sample.window.values.shape == (72, J)
    assert sample.window.values[5, 5] == pytest.approx(5 / 24)


def test_window_errors():
    with pytest.raises(SeriesTooShort):
        build_windows(_series(72), H=72)
    rows = _series(80)
    del rows[40]
    with pytest.raises(NonUniformSpacing):
        build_windows(rows, H=4)


def test_normalizer_ranges():
    samples = build_windows(_series(20), H=3)
    for s in samples:
        s.window.values[:, 4] = 5.0
        s.window.values[:, 3] = np.linspace(10, 30, 3)
    norm = fit_normalizer(samples)
    assert (norm.mins[4], norm.maxs[4]) == (5.0, 6.0)
    assert (norm.mins[3], norm.maxs[3]) == (10.0, 30.0)
    assert norm.normalize(np.array([0, 0, 0, 20.0, 5.0, 0]))[3] == pytest.approx(0.5)


def test_normalizer_matches_direct_scan():
    samples = build_windows(_series(60, seed=4), H=6)
    norm = fit_normalizer(samples)
    for j in range(J):
        col = [row[j] for s in samples for row in s.window.values]
        if j == 0:
            col += [s.target for s in samples]
        lo, hi = min(col), max(col)
        assert norm.mins[j] == lo
        assert norm.maxs[j] == (hi if hi > lo else lo + 1.0)
    with pytest.raises(EmptyDataset):
        fit_normalizer([])


@given(st.lists(st.floats(-50, 50), min_size=6, max_size=6))
def test_normalize_round_trip(values):
    norm = fit_normalizer(build_windows(_series(30, seed=1), H=4))
    assert np.allclose(norm.denormalize(norm.normalize(values)), values, atol=1e-9)


def test_linear_model_learns_realizable_target():
    samples = build_windows(_series(300), H=4)
    model = train(samples, {"architecture": "linear", "epochs": 3000, "learning_rate": 0.5})
    X, y = stack(samples)
    assert model.mse(X, y) <= 1e-8
    # closed-form least squares on the same design gives the same predictions
    D = np.c_[X.reshape(len(X), -1), np.ones(len(X))]
    coef, *_ = np.linalg.lstsq(D, y, rcond=None)
    assert np.max(np.abs(model.predict_batch(X) - D @ coef)) <= 1e-4


def test_zero_epochs_keeps_initialization():
    samples = build_windows(_series(50), H=4)
    model = train(samples, {"architecture": "mlp", "epochs": 0, "hidden": 5, "seed": 3})
    assert np.array_equal(model.theta, init_model("mlp", 4, 5, 3).theta)


def test_mlp_explains_daily_shape():
    n = 24 * 20
    hours = np.arange(n)
    load = 0.5 + 0.4 * np.sin(2 * np.pi * hours / 24)
    samples = build_windows(_series(n, seed=2, load=load), H=24)
    model = train(samples, {"architecture": "mlp", "epochs": 300, "hidden": 8})
    X, y = stack(samples)
    assert model.mse(X, y) < 0.5 * np.var(y)


def test_training_loss_never_increases():
    samples = build_windows(_series(120, seed=5), H=8)
    model = train(samples, {"architecture": "rnn", "epochs": 60, "hidden": 4, "learning_rate": 5.0})
    losses = [v for _, v in model.training_log]
    assert all(b <= a for a, b in zip(losses, losses[1:]))


def test_zero_weight_linear_predicts_zero():
    model = ForecastModel("linear", 4, np.zeros(4 * J + 1))
    assert model.predict(np.random.default_rng(0).uniform(size=(4, J))) == 0.0


def test_prediction_is_deterministic_and_shape_checked():
    model = init_model("rnn", 6, 4, seed=1)
    X = np.random.default_rng(1).uniform(size=(6, J))
    assert model.predict(X) == model.predict(X.copy())
    with pytest.raises(ShapeMismatch):
        model.predict(np.zeros((5, J)))
    with pytest.raises(ShapeMismatch):
        ForecastModel("mlp", 6, np.zeros(3), hidden=4)


def test_loss_values():
    model = ForecastModel("linear", 1, np.r_[np.zeros(J), 0.5])
    X = np.full((1, J), 0.5)
    assert model.loss(X, 0.5) == 0.0
    assert model.loss(X, 0.3) == pytest.approx(0.04)


def test_linear_input_gradient_is_chain_rule():
    rng = np.random.default_rng(2)
    model = ForecastModel("linear", 3, rng.normal(size=3 * J + 1))
    X = rng.uniform(size=(3, J))
    f = model.predict(X)
    g = model.input_gradient(X, 0.2)
    assert np.allclose(g, 2 * (f - 0.2) * model.theta[:-1].reshape(3, J))
    assert np.all(model.input_gradient(X, f) == 0.0)


@pytest.mark.parametrize("arch", ["linear", "mlp", "rnn"])
def test_input_gradient_matches_central_differences(arch):
    rng = np.random.default_rng(7)
    model = init_model(arch, 5, 6, seed=2)
    model.theta = model.theta + rng.normal(0, 0.3, model.theta.size)
    X = rng.uniform(size=(5, J))
    target = 0.1
    g = model.input_gradient(X, target)
    d = 1e-4
    fd = np.zeros_like(X)
    for i in range(5):
        for j in range(J):
            up, dn = X.copy(), X.copy()
            up[i, j] += d
            dn[i, j] -= d
            fd[i, j] = (model.loss(up, target) - model.loss(dn, target)) / (2 * d)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) <= 1e-5


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(["linear", "mlp", "rnn"]), st.integers(0, 1000))
def test_save_load_round_trip(tmp_path_factory, arch, seed):
    model = init_model(arch, 4, 3, seed=seed)
    path = tmp_path_factory.mktemp("m") / "model.json"
    model.save(path)
    again = ForecastModel.load(path)
    X = np.random.default_rng(seed).uniform(size=(4, J))
    assert again.predict(X) == model.predict(X)
