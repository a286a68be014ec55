import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from restoration_attack.attacks import (
    AttackConfig,
    BlackBoxOracle,
    WhiteBoxOracle,
    attack_fn_for,
    clip,
    gradient_oracle,
    greedy_pgd_attack,
    mse_increase,
    pgd_attack,
    sparse_attack,
    top_n_cells,
)
from restoration_attack.errors import InvalidAttackConfig, MissingTargetFeature, NonFiniteLoss
from restoration_attack.forecast import J, WEATHER_COLS, ForecastModel, init_model

H = 6


def _linear(seed=0, H=H):
    rng = np.random.default_rng(seed)
    return ForecastModel("linear", H, rng.normal(size=H * J + 1))


class _FixedGradient:
    """Oracle returning a scripted gradient and a constant loss."""

    mode = "white_box"

    def __init__(self, g):
        self.g = np.asarray(g, dtype=float)
        self.gradient_queries = 0

    def loss(self, X, target):
        return 0.0

    def gradient(self, X, target, columns=WEATHER_COLS):
        self.gradient_queries += 1
        return self.g.copy()


@pytest.mark.parametrize("cand, expected", [(0.7, 0.6), (0.55, 0.55), (0.3, 0.4)])
def test_clip(cand, expected):
    assert clip(np.array([cand]), np.array([0.5]), 0.1)[0] == pytest.approx(expected)


def test_config_validation():
    assert AttackConfig(epsilon=0.2).alpha == pytest.approx(0.02)
    assert AttackConfig(target_feature="humidity").target_feature == 2
    for bad in ({"epsilon": -1}, {"iterations": -1}, {"mode": "grey"}, {"target_feature": 0},
                {"target_feature": "time_index"}, {"fd_delta": 0}):
        with pytest.raises(InvalidAttackConfig):
            AttackConfig(**bad)


def test_black_box_is_exact_on_linear_model():
    model = _linear()
    X = np.random.default_rng(1).uniform(size=(H, J))
    for delta in (1e-1, 1e-3):
        fd = gradient_oracle(model, X, 0.3, "black_box", delta)
        an = gradient_oracle(model, X, 0.3, "white_box")
        assert np.allclose(fd[:, WEATHER_COLS], an[:, WEATHER_COLS], atol=1e-9)
        assert np.all(fd[:, [0, 5]] == 0)


def test_black_box_zero_when_prediction_hits_target():
    model = _linear()
    X = np.random.default_rng(2).uniform(size=(H, J))
    assert np.allclose(gradient_oracle(model, X, model.predict(X), "black_box"), 0.0, atol=1e-9)


def test_black_box_matches_analytic_on_trained_mlp(trained_mlp):
    model, samples = trained_mlp
    for s in samples[:10]:
        an = gradient_oracle(model, s.window, s.target)[:, WEATHER_COLS]
        fd = gradient_oracle(model, s.window, s.target, "black_box", 1e-3)[:, WEATHER_COLS]
        assert np.linalg.norm(fd - an) / np.linalg.norm(an) <= 1e-4


def test_black_box_counts_queries_and_rejects_non_finite():
    oracle = BlackBoxOracle(lambda batch: np.zeros(len(batch)))
    oracle.gradient(np.zeros((H, J)), 0.0)
    assert oracle.gradient_queries == 2 * H * 4
    oracle.gradient(np.zeros((H, J)), 0.0, columns=(2,))
    assert oracle.gradient_queries == 2 * H * 4 + 2 * H
    with pytest.raises(NonFiniteLoss):
        BlackBoxOracle(lambda b: np.full(len(b), np.nan)).gradient(np.zeros((H, J)), 0.0)


def test_pgd_needs_target_feature():
    with pytest.raises(MissingTargetFeature):
        pgd_attack(WhiteBoxOracle(_linear()), np.zeros((H, J)), 0.0, AttackConfig())


@pytest.mark.parametrize("attack", [pgd_attack, greedy_pgd_attack, sparse_attack])
def test_no_iterations_or_zero_budget_leave_window_unchanged(attack):
    X = np.random.default_rng(3).uniform(size=(H, J))
    for cfg in (AttackConfig(iterations=0, target_feature=1), AttackConfig(epsilon=0.0, target_feature=1)):
        trace = attack(WhiteBoxOracle(_linear()), X, 0.0, cfg)
        assert np.array_equal(trace.adversarial, X)


def test_pgd_saturates_on_linear_model():
    model = _linear(4)
    X = np.random.default_rng(4).uniform(size=(H, J))
    target = model.predict(X) - 1.0  # prediction above target: ascent follows +w
    cfg = AttackConfig(epsilon=0.05, iterations=20, target_feature=3)
    trace = pgd_attack(WhiteBoxOracle(model), X, target, cfg)
    w = model.theta[:-1].reshape(H, J)
    assert np.allclose(trace.adversarial[:, 3], X[:, 3] + 0.05 * np.sign(w[:, 3]))
    others = [c for c in range(J) if c != 3]
    assert np.array_equal(trace.adversarial[:, others], X[:, others])


def test_greedy_picks_column_with_largest_mean_gradient():
    g = np.zeros((H, J))
    g[:, 1] = 0.5
    g[:, 3] = -0.9
    g[:, 0] = 10.0  # load column is never eligible
    trace = greedy_pgd_attack(_FixedGradient(g), np.zeros((H, J)), 0.0, AttackConfig(epsilon=0.0, iterations=3))
    assert [it["feature"] for it in trace.per_iteration] == [3, 3, 3]
    assert np.array_equal(trace.adversarial, np.zeros((H, J)))


def test_greedy_ties_go_to_lowest_column():
    g = np.zeros((H, J))
    g[:, 2] = g[:, 4] = 1.0
    trace = greedy_pgd_attack(_FixedGradient(g), np.zeros((H, J)), 0.0, AttackConfig(iterations=1))
    assert trace.per_iteration[0]["feature"] == 2


def test_sparse_with_zero_budget_is_identity():
    X = np.random.default_rng(5).uniform(size=(H, J))
    trace = sparse_attack(WhiteBoxOracle(_linear()), X, 0.0, AttackConfig(sparsity=0))
    assert np.array_equal(trace.adversarial, X)


def test_sparse_with_full_budget_is_signed_ascent():
    rng = np.random.default_rng(6)
    g = rng.normal(size=(H, J))
    cfg = AttackConfig(sparsity=H * 4, iterations=1)
    X = rng.uniform(size=(H, J))
    trace = sparse_attack(_FixedGradient(g), X, 0.0, cfg)
    expected = X.copy()
    expected[:, WEATHER_COLS] += cfg.alpha * np.sign(g[:, WEATHER_COLS])
    assert np.allclose(trace.adversarial, expected)


@pytest.mark.parametrize("seed", range(100))
def test_top_n_matches_full_sort(seed):
    rng = np.random.default_rng(seed)
    g = np.round(rng.normal(size=(H, J)), 1)  # rounding forces ties
    n = int(rng.integers(0, H * 4 + 1))
    cells = [(i, j) for i in range(H) for j in WEATHER_COLS]
    expected = sorted(cells, key=lambda c: (-abs(g[c]), c))[:n]
    assert top_n_cells(g, n) == expected


def test_mse_increase_of_identity_attack_is_zero(trained):
    model, samples = trained
    assert mse_increase(model, samples[:5], lambda w, t: w.values) == 0.0


def test_sparse_attack_raises_error(trained):
    model, samples = trained
    cfg = AttackConfig(epsilon=0.05, iterations=10, sparsity=12)
    assert mse_increase(model, samples[:8], attack_fn_for(model, "saa", cfg)) > 0


def test_greedy_choice_agrees_between_oracles(trained):
    model, samples = trained
    rng = np.random.default_rng(8)
    agree = total = 0
    for k in rng.choice(len(samples), 100, replace=False):
        s = samples[k]
        imp = []
        for mode in ("white_box", "black_box"):
            g = gradient_oracle(model, s.window, s.target, mode, 1e-3)
            imp.append(np.abs(g[:, WEATHER_COLS]).mean(axis=0))
        top = np.sort(imp[0])
        if top[-1] - top[-2] < 1e-6 * top[-1]:
            continue  # near tie
        total += 1
        agree += int(np.argmax(imp[0]) == np.argmax(imp[1]))
    assert agree >= 0.95 * total


@settings(max_examples=200, deadline=None)
@given(
    method=st.sampled_from(["pgd", "greedy_pgd", "saa"]),
    eps=st.floats(0.0, 0.3),
    iters=st.integers(0, 6),
    n=st.integers(0, 30),
    seed=st.integers(0, 10_000),
)
def test_attack_invariants(method, eps, iters, n, seed):
    rng = np.random.default_rng(seed)
    model = init_model("mlp", H, 4, seed=seed % 7)
    X = rng.uniform(size=(H, J))
    cfg = AttackConfig(epsilon=eps, iterations=iters, sparsity=n, target_feature=int(rng.integers(1, 5)))
    fn = {"pgd": pgd_attack, "greedy_pgd": greedy_pgd_attack, "saa": sparse_attack}[method]
    trace = fn(WhiteBoxOracle(model), X, float(rng.uniform()), cfg)
    delta = trace.adversarial - X
    assert np.max(np.abs(delta)) <= eps + 1e-12
    assert np.all(delta[:, [0, 5]] == 0)
    if method == "saa":
        assert all(len(it["cells"]) <= n for it in trace.per_iteration)
