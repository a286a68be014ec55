import numpy as np
import pytest

from builders import ACCEPTANCE_RESULTS
from restoration_attack.forecast import build_windows, fit_normalizer, train
from restoration_attack.synth import synth_series


@pytest.fixture(scope="session")
def trained():
    """Small RNN forecaster on normalized synthetic windows: (model, samples)."""
    samples = build_windows(synth_series(5, 34, "SmallHotel"), H=24)
    norm = fit_normalizer(samples)
    samples = norm.apply(samples)
    model = train(samples[:600], {"architecture": "rnn", "hidden": 6, "epochs": 150, "seed": 1}, norm)
    return model, samples[600:]


@pytest.fixture(scope="session")
def trained_mlp():
    samples = build_windows(synth_series(6, 32, "BASE"), H=24)
    norm = fit_normalizer(samples)
    samples = norm.apply(samples)
    model = train(samples[:600], {"architecture": "mlp", "hidden": 6, "epochs": 150, "seed": 2}, norm)
    return model, samples[600:]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.stash[ACCEPTANCE_RESULTS] = {}


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, 11):
        ok, detail = results.get(number, (False, "not reached"))
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {detail}")
