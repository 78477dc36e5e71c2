import hashlib

import numpy as np
import pytest

from pflow.recipes import recipe, train_recipe
from pflow.velocity_net import load_checkpoint, save_checkpoint


def _checkpoint(request, kind, seed=0):
    """Train with the reference recipe once; reuse across runs via the pytest cache."""
    tag = hashlib.sha256(repr(recipe(kind)).encode()).hexdigest()[:12]
    root = request.config.cache.mkdir("pflow-checkpoints")
    path = root / f"{kind}-seed{seed}-{tag}.pflw"
    if not path.exists():
        params = train_recipe(kind, seed)
        tmp = path.with_suffix(".tmp")
        save_checkpoint(params, tmp)
        tmp.replace(path)
    return load_checkpoint(path)


@pytest.fixture(scope="session")
def mixture_params(request):
    return _checkpoint(request, "gauss-mixture-2d")


@pytest.fixture(scope="session")
def moons_params(request):
    return _checkpoint(request, "two-moons-2d")


@pytest.fixture(scope="session")
def image_params(request):
    return _checkpoint(request, "synth-gray-16x16")


def central_difference(f, x, h=1e-5):
    """Gradient of scalar ``f`` at ``x`` by central differences (oracle)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


ACCEPTANCE_LINES = []


def verdict(n, title, ok, detail):
    """Record and print one acceptance line, then fail the test if ``ok`` is false."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d} {title}: {detail}"
    ACCEPTANCE_LINES.append((n, line))
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
