import numpy as np
import pytest
from hypothesis import settings

# numba compiles on first use, which blows any per-example deadline
settings.register_profile("repo", deadline=None)
settings.load_profile("repo")


def separable(n_per_class, size, classes=3, seed=0):
    """Images whose class is carried by a distinct colour plus one bright quadrant."""
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for c in range(classes):
        base = np.zeros((3, size, size), np.float32)
        base[c % 3] = 0.8
        q = size // 2
        r, col = divmod(c % 4, 2)
        base[:, r * q:(r + 1) * q, col * q:(col + 1) * q] += 0.2
        for _ in range(n_per_class):
            xs.append(np.clip(base + rng.normal(0, 0.05, base.shape), 0, 1).astype(np.float32))
            ys.append(c)
    return np.stack(xs), np.array(ys, dtype=np.int64)


@pytest.fixture
def separable_data():
    return separable


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.VERDICTS):
        terminalreporter.write_line(line)
