"""Windowed load forecasting with small differentiable models.

Every architecture exposes exact reverse-mode gradients with respect to both
its parameters (for training) and its input window (for white-box attacks).
Activations are ``tanh`` so the input gradient exists everywhere.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .errors import (
    DivergedTraining,
    EmptyDataset,
    NonUniformSpacing,
    SeriesTooShort,
    ShapeMismatch,
)

FEATURES = ("load", "temperature", "humidity", "wind_speed", "wind_direction", "time_index")
J = len(FEATURES)
LOAD_COL = 0
TIME_COL = 5
WEATHER_COLS = (1, 2, 3, 4)
DEFAULT_H = 72
CSV_HEADER = ("timestamp", "load_kw", "temp_c", "humidity_pct", "wind_speed_mps", "wind_dir_deg")
ARCHITECTURES = ("linear", "mlp", "rnn")

# inputs are shifted by this constant inside every model so the [0, 1]
# features are roughly centred; it does not change input gradients
_CENTER = 0.5


@dataclass
class FeatureWindow:
    values: np.ndarray  # H x J
    timestamps: list = field(default_factory=list)
    feature_names: tuple = FEATURES

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[1] != J or self.values.shape[0] < 1:
            raise ShapeMismatch(f"window must be H x {J}, got {self.values.shape}")

    @property
    def H(self):
        return self.values.shape[0]

    def with_values(self, values):
        return FeatureWindow(np.array(values, dtype=float), list(self.timestamps), self.feature_names)


@dataclass
class ForecastSample:
    window: FeatureWindow
    target: float


# ---------------------------------------------------------------------------
# data plumbing


def _hour_index(ts: datetime) -> float:
    return (ts.hour + ts.minute / 60.0) / 24.0


def build_windows(series, H: int = DEFAULT_H) -> list[ForecastSample]:
    """Slide an ``H``-hour window over ``series``.

    ``series`` rows are ``(timestamp, load, temperature, humidity,
    wind_speed, wind_direction)``.  The time-index column is hour-of-day / 24.
    """
    if H < 1:
        raise SeriesTooShort("window length must be positive")
    rows = list(series)
    if len(rows) < H + 1:
        raise SeriesTooShort(f"need at least {H + 1} rows, got {len(rows)}")
    stamps = [r[0] for r in rows]
    for a, b in zip(stamps, stamps[1:]):
        if b - a != timedelta(hours=1):
            raise NonUniformSpacing(f"gap of {b - a} between {a} and {b}")
    data = np.array([[float(v) for v in r[1:6]] + [_hour_index(r[0])] for r in rows])
    out = []
    for k in range(len(rows) - H):
        window = FeatureWindow(data[k : k + H].copy(), stamps[k : k + H])
        out.append(ForecastSample(window, float(data[k + H, LOAD_COL])))
    return out


@dataclass
class Normalizer:
    mins: np.ndarray
    maxs: np.ndarray

    @property
    def span(self):
        return self.maxs - self.mins

    def normalize(self, values):
        return (np.asarray(values, dtype=float) - self.mins) / self.span

    def denormalize(self, values):
        return np.asarray(values, dtype=float) * self.span + self.mins

    def normalize_load(self, v):
        return (v - self.mins[LOAD_COL]) / self.span[LOAD_COL]

    def denormalize_load(self, v):
        return v * self.span[LOAD_COL] + self.mins[LOAD_COL]

    def apply(self, samples):
        return [
            ForecastSample(s.window.with_values(self.normalize(s.window.values)), float(self.normalize_load(s.target)))
            for s in samples
        ]

    def to_list(self):
        return [[float(a), float(b)] for a, b in zip(self.mins, self.maxs)]

    @classmethod
    def from_list(cls, pairs):
        arr = np.asarray(pairs, dtype=float)
        return cls(arr[:, 0].copy(), arr[:, 1].copy())


def fit_normalizer(samples) -> Normalizer:
    """Per-feature min/max over every window row (and every target load)."""
    if not samples:
        raise EmptyDataset("cannot fit a normalizer on no samples")
    rows = np.vstack([s.window.values for s in samples])
    mins, maxs = rows.min(axis=0), rows.max(axis=0)
    targets = np.array([s.target for s in samples])
    mins[LOAD_COL] = min(mins[LOAD_COL], targets.min())
    maxs[LOAD_COL] = max(maxs[LOAD_COL], targets.max())
    flat = maxs <= mins
    maxs[flat] = mins[flat] + 1.0
    return Normalizer(mins, maxs)


def read_dataset_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValueError(f"unexpected dataset header {header}")
        return [
            (datetime.fromisoformat(r[0].replace("Z", "+00:00")), *map(float, r[1:6]))
            for r in reader
        ]


def write_dataset_csv(path, series):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for ts, *vals in series:
            w.writerow([ts.isoformat()] + [f"{v:.6f}" for v in vals])


def stack(samples):
    X = np.stack([s.window.values for s in samples])
    y = np.array([s.target for s in samples])
    return X, y


# ---------------------------------------------------------------------------
# architectures: each provides init, forward (batched) and backward


def _n_params(arch, H, hidden):
    D = H * J
    if arch == "linear":
        return D + 1
    if arch == "mlp":
        return D * hidden + 2 * hidden + 1
    if arch == "rnn":
        return J * hidden + hidden * hidden + 2 * hidden + 1
    raise ValueError(f"unknown architecture {arch!r}")


def _unpack(arch, theta, H, hidden):
    D = H * J
    if arch == "linear":
        return theta[:D], theta[D]
    if arch == "mlp":
        i = 0
        W1 = theta[i : i + D * hidden].reshape(D, hidden)
        i += D * hidden
        b1 = theta[i : i + hidden]
        i += hidden
        w2 = theta[i : i + hidden]
        return W1, b1, w2, theta[i + hidden]
    i = 0
    Wx = theta[i : i + J * hidden].reshape(J, hidden)
    i += J * hidden
    Wh = theta[i : i + hidden * hidden].reshape(hidden, hidden)
    i += hidden * hidden
    b = theta[i : i + hidden]
    i += hidden
    w = theta[i : i + hidden]
    return Wx, Wh, b, w, theta[i + hidden]


def _init(arch, H, hidden, rng):
    D = H * J
    if arch == "linear":
        return np.concatenate([rng.normal(0, 0.01, D), [0.0]])
    if arch == "mlp":
        return np.concatenate(
            [
                rng.normal(0, 1 / np.sqrt(D), D * hidden),
                np.zeros(hidden),
                rng.normal(0, 1 / np.sqrt(hidden), hidden),
                [0.0],
            ]
        )
    return np.concatenate(
        [
            rng.normal(0, 0.5 / np.sqrt(J), J * hidden),
            rng.normal(0, 0.5 / np.sqrt(hidden), hidden * hidden),
            np.zeros(hidden),
            rng.normal(0, 1 / np.sqrt(hidden), hidden),
            [0.0],
        ]
    )


def _forward(arch, theta, X, hidden):
    """Batched forward pass. ``X`` is N x H x J. Returns (f, cache)."""
    N, H, _ = X.shape
    Xc = X - _CENTER
    p = _unpack(arch, theta, H, hidden)
    if arch == "linear":
        w, b = p
        return Xc.reshape(N, -1) @ w + b, None
    if arch == "mlp":
        W1, b1, w2, b2 = p
        h = np.tanh(Xc.reshape(N, -1) @ W1 + b1)
        return h @ w2 + b2, h
    Wx, Wh, b, w, c = p
    hs = np.zeros((H + 1, N, hidden))
    for i in range(H):
        hs[i + 1] = np.tanh(Xc[:, i, :] @ Wx + hs[i] @ Wh + b)
    return hs[H] @ w + c, hs


def _backward(arch, theta, X, hidden, cache, g, need_theta=True):
    """Given dL/df per sample ``g`` return (dL/dtheta summed, dL/dX)."""
    N, H, _ = X.shape
    Xc = X - _CENTER
    p = _unpack(arch, theta, H, hidden)
    if arch == "linear":
        w, _ = p
        dX = (g[:, None] * w[None, :]).reshape(N, H, J)
        dth = np.concatenate([Xc.reshape(N, -1).T @ g, [g.sum()]]) if need_theta else None
        return dth, dX
    if arch == "mlp":
        W1, b1, w2, b2 = p
        h = cache
        dz = (g[:, None] * w2[None, :]) * (1.0 - h**2)
        dX = (dz @ W1.T).reshape(N, H, J)
        dth = None
        if need_theta:
            dth = np.concatenate(
                [(Xc.reshape(N, -1).T @ dz).ravel(), dz.sum(0), h.T @ g, [g.sum()]]
            )
        return dth, dX
    Wx, Wh, b, w, c = p
    hs = cache
    dX = np.zeros_like(X)
    dWx = np.zeros_like(Wx)
    dWh = np.zeros_like(Wh)
    db = np.zeros_like(b)
    dh = g[:, None] * w[None, :]
    for i in range(H - 1, -1, -1):
        dz = dh * (1.0 - hs[i + 1] ** 2)
        dX[:, i, :] = dz @ Wx.T
        if need_theta:
            dWx += Xc[:, i, :].T @ dz
            dWh += hs[i].T @ dz
            db += dz.sum(0)
        dh = dz @ Wh.T
    dth = None
    if need_theta:
        dth = np.concatenate([dWx.ravel(), dWh.ravel(), db, hs[H].T @ g, [g.sum()]])
    return dth, dX


# ---------------------------------------------------------------------------
# model


@dataclass
class ForecastModel:
    architecture: str
    H: int
    theta: np.ndarray
    norm_stats: Normalizer | None = None
    hidden: int = 0
    seed: int = 0
    training_log: list = field(default_factory=list)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        expected = _n_params(self.architecture, self.H, self.hidden)
        if self.theta.size != expected:
            raise ShapeMismatch(f"{self.architecture} needs {expected} parameters, got {self.theta.size}")

    @property
    def J(self):
        return J

    def _check(self, X):
        if X.shape[-2:] != (self.H, J):
            raise ShapeMismatch(f"model expects {self.H} x {J} windows, got {X.shape[-2:]}")

    def predict_batch(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        self._check(X)
        return _forward(self.architecture, self.theta, X, self.hidden)[0]

    def predict(self, window) -> float:
        X = _values(window)
        return float(self.predict_batch(X[None])[0])

    def loss(self, window, target) -> float:
        return (self.predict(window) - float(target)) ** 2

    def input_gradient(self, window, target) -> np.ndarray:
        X = _values(window)[None]
        self._check(X)
        f, cache = _forward(self.architecture, self.theta, X, self.hidden)
        g = 2.0 * (f - float(target))
        _, dX = _backward(self.architecture, self.theta, X, self.hidden, cache, g, need_theta=False)
        return dX[0]

    def mse(self, X, y) -> float:
        return float(np.mean((self.predict_batch(X) - y) ** 2))

    def denormalize(self, value):
        if self.norm_stats is None:
            return value
        return self.norm_stats.denormalize_load(value)

    def to_dict(self):
        return {
            "architecture": self.architecture,
            "H": self.H,
            "J": J,
            "hidden": self.hidden,
            "norm_stats": self.norm_stats.to_list() if self.norm_stats is not None else None,
            "theta": [float(v) for v in self.theta],
            "seed": self.seed,
            "training_log": [[int(e), float(v)] for e, v in self.training_log],
        }

    @classmethod
    def from_dict(cls, doc):
        if int(doc.get("J", J)) != J:
            raise ShapeMismatch(f"model has J={doc['J']}, toolkit uses {J}")
        norm = doc.get("norm_stats")
        return cls(
            doc["architecture"],
            int(doc["H"]),
            np.asarray(doc["theta"], dtype=float),
            Normalizer.from_list(norm) if norm is not None else None,
            int(doc.get("hidden", 0)),
            int(doc.get("seed", 0)),
            [tuple(x) for x in doc.get("training_log", [])],
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def _values(window):
    return window.values if isinstance(window, FeatureWindow) else np.asarray(window, dtype=float)


def init_model(architecture, H, hidden=16, seed=0, norm_stats=None) -> ForecastModel:
    if architecture == "linear":
        hidden = 0
    rng = np.random.default_rng(seed)
    theta = _init(architecture, H, hidden, rng)
    return ForecastModel(architecture, H, theta, norm_stats, hidden, seed)


# default step sizes; plain gradient descent is monotone at or below these
DEFAULT_LR = {"linear": 0.02, "mlp": 0.05, "rnn": 0.05}


@dataclass
class TrainConfig:
    architecture: str = "mlp"
    learning_rate: float | None = None
    epochs: int = 2000
    seed: int = 0
    hidden: int = 16

    @property
    def lr(self):
        return self.learning_rate if self.learning_rate is not None else DEFAULT_LR[self.architecture]


def train(samples, config: TrainConfig | dict, norm_stats=None) -> ForecastModel:
    """Full-batch gradient descent on the mean squared error.

    A step that would raise the training loss is rejected and the step size
    halved, so the logged loss is non-increasing for any starting step size.
    """
    if isinstance(config, dict):
        config = TrainConfig(**config)
    if not samples:
        raise EmptyDataset("no training samples")
    X, y = stack(samples)
    H = X.shape[1]
    model = init_model(config.architecture, H, config.hidden, config.seed, norm_stats)
    arch, hidden = model.architecture, model.hidden
    theta = model.theta.copy()
    N = len(y)
    lr = config.lr

    def evaluate(th):
        f, cache = _forward(arch, th, X, hidden)
        return float(np.mean((f - y) ** 2)), f, cache

    def gradient(th, f, cache):
        return _backward(arch, th, X, hidden, cache, 2.0 * (f - y) / N)[0]

    cur, f, cache = evaluate(theta)
    if not np.isfinite(cur):
        raise DivergedTraining("initial loss is not finite")
    grad = gradient(theta, f, cache)
    log = []
    for epoch in range(1, config.epochs + 1):
        while True:
            trial = theta - lr * grad
            new, f, cache = evaluate(trial)
            if not np.isfinite(new):
                raise DivergedTraining(f"loss became non-finite at epoch {epoch}")
            if new <= cur or lr < 1e-12:
                break
            lr *= 0.5
        if new > cur:
            log.append((epoch, cur))
            break
        theta, cur = trial, new
        grad = gradient(theta, f, cache)
        log.append((epoch, cur))
    model.theta = theta
    model.training_log = log
    return model


# module-level aliases mirroring the operation names


def predict(model: ForecastModel, window) -> float:
    return model.predict(window)


def loss(model: ForecastModel, window, target) -> float:
    return model.loss(window, target)


def input_gradient(model: ForecastModel, window, target) -> np.ndarray:
    return model.input_gradient(window, target)
