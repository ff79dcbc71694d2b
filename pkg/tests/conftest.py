import numpy as np
import pytest

from kktrecon.mlp import InitScheme, MlpParams, forward_cache, init_params

TINY_DIMS = (6, 8, 3)


def is_generic(params: MlpParams, X: np.ndarray, y: np.ndarray, gap: float = 1e-3) -> bool:
    """True when every ReLU sign and the runner-up class survive a 1e-6 probe."""
    _, pres = forward_cache(params, np.atleast_2d(X))
    if any(np.min(np.abs(z)) < gap for z in pres[:-1]):
        return False
    logits = pres[-1]
    for row, label in zip(logits, np.atleast_1d(y)):
        others = np.sort(np.delete(row, label))
        if len(others) > 1 and others[-1] - others[-2] < gap:
            return False
    return True


def generic_points(params: MlpParams, rng, count: int, n_per_point: int = 1):
    """Draw ``count`` batches ``(X, y)`` at which finite differences are valid."""
    out = []
    while len(out) < count:
        X = rng.uniform(-1, 1, (n_per_point, params.n_features))
        y = rng.integers(0, params.n_classes, n_per_point)
        if is_generic(params, X, y):
            out.append((X, y))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_params():
    return init_params(InitScheme("standard", 3), TINY_DIMS)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed", "skipped"):
        for rep in terminalreporter.stats.get(key, []):
            lines += [v for k, v in getattr(rep, "user_properties", []) if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
