from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hjriccati import DataBlock, GaussianPrior

settings.register_profile(
    "default",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


def random_spd(rng: np.random.Generator, n: int, cond: float = 10.0) -> np.ndarray:
    """SPD matrix with eigenvalues spread over ``[1/sqrt(cond), sqrt(cond)]``."""
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    vals = np.exp(rng.uniform(-0.5, 0.5, n) * np.log(cond))
    A = (Q * vals) @ Q.T
    return 0.5 * (A + A.T)


def random_instance(rng: np.random.Generator, n: int, n_blocks: int, max_rows: int = 3):
    """A prior plus ``n_blocks`` random blocks with moderate flow times."""
    lam = random_spd(rng, n)
    x = rng.standard_normal(n)
    eps = float(rng.uniform(0.5, 2.0))
    prior = GaussianPrior(lam, x, eps)
    blocks = []
    for _ in range(n_blocks):
        m = int(rng.integers(1, max_rows + 1))
        phi = rng.standard_normal((m, n)) / np.sqrt(n)
        y = rng.standard_normal(m)
        sigma2 = float(rng.uniform(0.5, 2.0)) * eps
        blocks.append(DataBlock(phi, y, sigma2))
    return prior, blocks


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# acceptance criteria report ----------------------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record (and print) one PASS/FAIL line for a numbered acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"ACCEPTANCE {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
