import numpy as np
import pytest

from nriuq.dynamics import SimConfig, generate_dataset


def finite_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (mutated and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    """Max elementwise relative error, floored at 1e-6 of the largest entry.

    The floor keeps exactly-zero gradients (a bias feeding batch norm, say)
    from turning finite-difference round-off into a relative error of 1.
    """
    a, b = np.asarray(a), np.asarray(b)
    floor = max(1e-8, 1e-6 * float(np.max(np.abs(b), initial=0.0)))
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale))


@pytest.fixture
def free_cfg():
    """Simulator without walls, for conservation checks."""
    return SimConfig(box_half_width=np.inf)


@pytest.fixture(scope="session")
def tiny_data():
    cfg = SimConfig(n_sampled_steps=12)
    return cfg, generate_dataset(cfg, (8, 4, 4), seed=3)


# One line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
