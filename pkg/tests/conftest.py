import numpy as np
import pytest

from mnarmc.panel import ObservedPanel


def low_rank(n, t, r, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, r))
    z = rng.standard_normal((t, r))
    return scale * (x @ z.T), x, z


def block_panel(m, n0, t0, noise=0.0, seed=1):
    """Observe rows < n0 everywhere and every row before column t0."""
    rng = np.random.default_rng(seed)
    y = m + noise * rng.standard_normal(m.shape)
    mask = np.ones(m.shape, dtype=bool)
    mask[n0:, t0:] = False
    return ObservedPanel(y, mask)


def staggered_mask(n, t, starts):
    """``starts[i]`` is the first missing column of unit i (t = never)."""
    mask = np.ones((n, t), dtype=bool)
    for i, a in enumerate(starts):
        mask[i, a:] = False
    return mask


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = []


def report_criterion(number, ok, detail):
    """Record a one-line acceptance verdict; lines are echoed in the terminal summary."""
    line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} | {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
