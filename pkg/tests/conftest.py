from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hybrid_pdp import FluorescenceParams, PureHybridState, build_fluorescence, build_telegraph, random_model
from hybrid_pdp.applications import GROUND

settings.register_profile(
    "repo", derandomize=True, deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")


def random_state(rng: np.random.Generator, model, sector: int = 0) -> PureHybridState:
    d = model.dim(sector)
    v = rng.standard_normal(d) + 1j * rng.standard_normal(d)
    return PureHybridState.normalized(sector, v)


def random_instance(seed: int, n_sectors: int = 3):
    """Model and initial state drawn from a fixed seed."""
    rng = np.random.default_rng(seed)
    model = random_model(rng, n_sectors=n_sectors, max_dim=3, coupling_norm=1.0)
    return model, random_state(rng, model)


def projector_distance(u, v) -> float:
    u, v = np.asarray(u), np.asarray(v)
    return float(np.abs(np.outer(u, u.conj()) - np.outer(v, v.conj())).max())


@pytest.fixture
def telegraph():
    return build_telegraph(1.0)


@pytest.fixture
def fluo_params():
    return FluorescenceParams(gamma=1.0, omega=2.0)


@pytest.fixture
def fluorescence(fluo_params):
    return build_fluorescence(fluo_params)


@pytest.fixture
def ground():
    return PureHybridState(0, GROUND)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def report(label: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
