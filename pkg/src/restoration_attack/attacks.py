"""Gradient-based evasion attacks on the weather columns of a forecast window.

Three update rules share one projected signed-gradient loop:

* ``pgd_attack`` perturbs one fixed weather column,
* ``greedy_pgd_attack`` re-picks the column with the largest mean |gradient|
  every iteration,
* ``sparse_attack`` perturbs only the ``n`` weather cells with the largest
  |gradient| every iteration.

Gradients come from an oracle: analytic (white box) or two-sided finite
differences through prediction queries only (black box).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidAttackConfig, MissingTargetFeature, NonFiniteLoss, ShapeMismatch
from .forecast import FEATURES, WEATHER_COLS, FeatureWindow, ForecastModel

METHODS = ("pgd", "greedy_pgd", "saa")


@dataclass
class AttackConfig:
    epsilon: float = 0.05
    step_size: float | None = None  # defaults to epsilon / 10
    iterations: int = 50
    sparsity: int = 12
    fd_delta: float = 1e-3
    mode: str = "white_box"
    target_feature: int | str | None = None
    clamp: tuple | None = None  # optional normalized-value range, off by default

    def __post_init__(self):
        if self.epsilon < 0:
            raise InvalidAttackConfig("epsilon must be non-negative")
        if self.step_size is not None and self.step_size <= 0:
            raise InvalidAttackConfig("step_size must be positive")
        if self.iterations < 0 or self.sparsity < 0:
            raise InvalidAttackConfig("iterations and sparsity must be non-negative")
        if self.fd_delta <= 0:
            raise InvalidAttackConfig("fd_delta must be positive")
        if self.mode not in ("white_box", "black_box"):
            raise InvalidAttackConfig(f"unknown mode {self.mode!r}")
        if self.target_feature is not None:
            self.target_feature = feature_column(self.target_feature)

    @property
    def alpha(self):
        return self.step_size if self.step_size is not None else self.epsilon / 10.0

    def to_dict(self):
        d = asdict(self)
        d["step_size"] = self.alpha
        return d


def feature_column(feature) -> int:
    """Zero-based column of a weather feature given by name or index."""
    if isinstance(feature, str):
        if feature not in FEATURES:
            raise InvalidAttackConfig(f"unknown feature {feature!r}")
        col = FEATURES.index(feature)
    else:
        col = int(feature)
    if col not in WEATHER_COLS:
        raise InvalidAttackConfig(f"column {col} is not a weather column {WEATHER_COLS}")
    return col


@dataclass
class AttackTrace:
    method: str
    config: AttackConfig
    original: np.ndarray
    adversarial: np.ndarray
    per_iteration: list = field(default_factory=list)
    query_count: int = 0
    initial_loss: float = 0.0
    final_loss: float = 0.0
    support: int = 0

    @property
    def linf_norm(self):
        return float(np.max(np.abs(self.adversarial - self.original))) if self.original.size else 0.0

    @property
    def adversarial_window(self):
        return FeatureWindow(self.adversarial)

    def to_dict(self, include_windows=True):
        d = {
            "method": self.method,
            "config": self.config.to_dict(),
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "per_iteration": self.per_iteration,
            "query_count": self.query_count,
            "linf_norm": self.linf_norm,
            "support": self.support,
        }
        if include_windows:
            d["clean_window"] = self.original.tolist()
            d["adversarial_window"] = self.adversarial.tolist()
        return d


# ---------------------------------------------------------------------------
# oracles


class WhiteBoxOracle:
    """Analytic gradients straight from the model."""

    mode = "white_box"

    def __init__(self, model: ForecastModel):
        self.model = model
        self.gradient_queries = 0
        self.loss_queries = 0

    def loss(self, X, target):
        return _finite((self.model.predict_batch(X[None])[0] - target) ** 2)

    def gradient(self, X, target, columns=WEATHER_COLS):
        g = self.model.input_gradient(X, target)
        if not np.all(np.isfinite(g)):
            raise NonFiniteLoss("gradient is not finite")
        return g


class BlackBoxOracle:
    """Two-sided finite differences using prediction queries only.

    ``predict`` maps a batch of windows (N x H x J) to N forecasts; each
    window in a batch counts as one query.  Only the requested weather
    columns are estimated; the rest of the gradient is reported as zero.
    """

    mode = "black_box"

    def __init__(self, predict, delta=1e-3):
        self._predict = predict
        self.delta = float(delta)
        self.gradient_queries = 0
        self.loss_queries = 0

    @classmethod
    def from_model(cls, model: ForecastModel, delta=1e-3):
        return cls(model.predict_batch, delta)

    def loss(self, X, target):
        self.loss_queries += 1
        return _finite((self._predict(X[None])[0] - target) ** 2)

    def gradient(self, X, target, columns=WEATHER_COLS):
        H = X.shape[0]
        cells = [(i, j) for i in range(H) for j in columns]
        batch = np.repeat(X[None], 2 * len(cells), axis=0)
        for k, (i, j) in enumerate(cells):
            batch[2 * k, i, j] += self.delta
            batch[2 * k + 1, i, j] -= self.delta
        f = np.asarray(self._predict(batch), dtype=float)
        self.gradient_queries += len(batch)
        losses = (f - target) ** 2
        if not np.all(np.isfinite(losses)):
            raise NonFiniteLoss("query returned a non-finite loss")
        g = np.zeros_like(X, dtype=float)
        for k, (i, j) in enumerate(cells):
            g[i, j] = (losses[2 * k] - losses[2 * k + 1]) / (2 * self.delta)
        return g


def _finite(v):
    v = float(v)
    if not np.isfinite(v):
        raise NonFiniteLoss("loss is not finite")
    return v


def make_oracle(model: ForecastModel, config: AttackConfig):
    if config.mode == "black_box":
        return BlackBoxOracle.from_model(model, config.fd_delta)
    return WhiteBoxOracle(model)


def gradient_oracle(model_or_query, window, target, mode="white_box", fd_delta=1e-3):
    """One-shot gradient of the squared forecast error w.r.t. the window."""
    X = _as_array(window)
    if mode == "white_box":
        return WhiteBoxOracle(model_or_query).gradient(X, target)
    if mode == "black_box":
        predict = model_or_query.predict_batch if isinstance(model_or_query, ForecastModel) else model_or_query
        return BlackBoxOracle(predict, fd_delta).gradient(X, target)
    raise InvalidAttackConfig(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# attacks


def clip(candidate, original, epsilon):
    """Project ``candidate`` onto the box ``original +- epsilon``."""
    candidate = np.asarray(candidate, dtype=float)
    original = np.asarray(original, dtype=float)
    if candidate.shape != original.shape:
        raise ShapeMismatch(f"{candidate.shape} vs {original.shape}")
    return np.clip(candidate, original - epsilon, original + epsilon)


def _as_array(window):
    return (window.values if isinstance(window, FeatureWindow) else np.asarray(window, dtype=float)).copy()


def _project(cand, X0, config):
    out = clip(cand, X0, config.epsilon)
    if config.clamp is not None:
        lo, hi = config.clamp
        cols = list(WEATHER_COLS)
        out[:, cols] = np.clip(out[:, cols], lo, hi)
    return out


def _start(oracle, window, target):
    X0 = _as_array(window)
    q0 = oracle.gradient_queries
    return X0, X0.copy(), oracle.loss(X0, target), q0


def pgd_attack(oracle, window, target, config: AttackConfig) -> AttackTrace:
    if config.target_feature is None:
        raise MissingTargetFeature("plain PGD needs config.target_feature")
    j = config.target_feature
    X0, X, loss0, q0 = _start(oracle, window, target)
    log = []
    for _ in range(config.iterations):
        g = oracle.gradient(X, target, columns=(j,))
        cand = X.copy()
        cand[:, j] += config.alpha * np.sign(g[:, j])
        X = _project(cand, X0, config)
        log.append({"feature": j, "loss": oracle.loss(X, target)})
    return _trace("pgd", config, X0, X, log, oracle, q0, loss0, int(np.count_nonzero(X != X0)))


def greedy_pgd_attack(oracle, window, target, config: AttackConfig) -> AttackTrace:
    X0, X, loss0, q0 = _start(oracle, window, target)
    cols = np.array(WEATHER_COLS)
    log = []
    for _ in range(config.iterations):
        g = oracle.gradient(X, target)
        importance = np.abs(g[:, cols]).mean(axis=0)
        j = int(cols[int(np.argmax(importance))])  # first maximum = lowest column
        cand = X.copy()
        cand[:, j] += config.alpha * np.sign(g[:, j])
        X = _project(cand, X0, config)
        log.append(
            {"feature": j, "importance": [float(v) for v in importance], "loss": oracle.loss(X, target)}
        )
    return _trace("greedy_pgd", config, X0, X, log, oracle, q0, loss0, int(np.count_nonzero(X != X0)))


def top_n_cells(g, n):
    """Weather cells with the largest |g|, ties broken in row-major order."""
    H = g.shape[0]
    cols = np.array(WEATHER_COLS)
    mags = np.abs(g[:, cols]).ravel()  # row-major over (row, weather column)
    n = min(n, mags.size)
    order = np.argsort(-mags, kind="stable")[:n]
    return [(int(k // len(cols)), int(cols[k % len(cols)])) for k in order]


def sparse_attack(oracle, window, target, config: AttackConfig) -> AttackTrace:
    X0, X, loss0, q0 = _start(oracle, window, target)
    n = min(config.sparsity, X0.shape[0] * len(WEATHER_COLS))
    support = set()
    log = []
    for _ in range(config.iterations):
        if n == 0:
            log.append({"cells": [], "loss": oracle.loss(X, target)})
            continue
        g = oracle.gradient(X, target)
        S = top_n_cells(g, n)
        mask = np.zeros_like(X)
        rows, cols = zip(*S)
        mask[list(rows), list(cols)] = 1.0
        X = _project(X + config.alpha * np.sign(g) * mask, X0, config)
        support.update(S)
        log.append({"cells": [list(c) for c in S], "loss": oracle.loss(X, target)})
    return _trace("saa", config, X0, X, log, oracle, q0, loss0, len(support))


def _trace(method, config, X0, X, log, oracle, q0, loss0, support):
    final = log[-1]["loss"] if log else loss0
    return AttackTrace(
        method,
        config,
        X0,
        X,
        log,
        oracle.gradient_queries - q0,
        loss0,
        final,
        support,
    )


ATTACKS = {"pgd": pgd_attack, "greedy_pgd": greedy_pgd_attack, "saa": sparse_attack}


def run_attack(method, oracle, window, target, config: AttackConfig) -> AttackTrace:
    try:
        fn = ATTACKS[method]
    except KeyError:
        raise InvalidAttackConfig(f"unknown attack {method!r}") from None
    return fn(oracle, window, target, config)


def mse_increase(model: ForecastModel, clean_samples, attack_fn) -> float:
    """Attacked-window MSE minus clean-window MSE (normalized units).

    ``attack_fn(window, target)`` returns the adversarial H x J values.
    """
    from .errors import EmptyDataset

    if not clean_samples:
        raise EmptyDataset("mse_increase needs at least one sample")
    clean = np.stack([s.window.values for s in clean_samples])
    adv = np.stack([np.asarray(attack_fn(s.window, s.target), dtype=float) for s in clean_samples])
    y = np.array([s.target for s in clean_samples])
    return float(np.mean((model.predict_batch(adv) - y) ** 2) - np.mean((model.predict_batch(clean) - y) ** 2))


def attack_fn_for(model, method, config: AttackConfig):
    """Closure usable with :func:`mse_increase`; a fresh oracle per window."""

    def fn(window, target):
        return run_attack(method, make_oracle(model, config), window, target, config).adversarial

    return fn
