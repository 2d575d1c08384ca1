import numpy as np
import pytest

from batchgp import env, gp
from batchgp.data import build_training_pairs, fit_normalizer


def make_ensemble(n=50, rank=None, seed=0, duration=30.0, fit_steps=150):
    """Small boom ensemble: n transitions drawn from a short excitation log."""
    ds = env.collect_excitation_data(duration=duration, seed=seed)
    idx = np.sort(np.random.default_rng(seed).choice(ds.n, n, replace=False))
    ds = ds.subset(idx)
    nz = fit_normalizer(ds)
    pairs = build_training_pairs(ds, nz)
    return gp.fit_hyperparams(pairs, gp.FitConfig(max_steps=fit_steps, lr=0.1), rank=rank, dt=ds.dt,
                              state_bounds=ds.state_bounds())


@pytest.fixture(scope="session")
def small_ensemble():
    return make_ensemble(50, rank=50)


@pytest.fixture(scope="session")
def medium_ensemble():
    return make_ensemble(300, rank="auto", duration=40.0)


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """record(number, ok, detail): one pass/fail line per acceptance criterion."""
    def record(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append((number, line))
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
