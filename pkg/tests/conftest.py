from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from visplan import genmodel as gm
from visplan import gridworld as gw

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_dataset() -> gw.Dataset:
    return gw.sample_dataset(11, 400)


@pytest.fixture(scope="session")
def tiny_cfg() -> gm.ModelConfig:
    """A model small enough for finite differences (< 5k parameters)."""
    return gm.ModelConfig(d_model=8, n_layers=1, n_heads=2, mlp_ratio=2, grid=4, max_seq_len=160)


@pytest.fixture(scope="session")
def tiny_dataset() -> gw.Dataset:
    return gw.sample_dataset(5, 60, size=4)


def random_states(seed: int, count: int, size: int = gw.GRID) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [gw.random_state(rng, size) for _ in range(count)]


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
