import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("forge", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("forge")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def sphere_points(n, r=1.0, seed=0):
    """Uniform samples on a sphere (normalised Gaussians)."""
    g = np.random.default_rng(seed).normal(size=(n, 3))
    return r * g / np.linalg.norm(g, axis=1, keepdims=True)


def fibonacci_sphere(n, r=1.0):
    """Near-uniform deterministic sphere points."""
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    return r * np.column_stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)])


def cube_corners(h=1.0):
    return h * np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=float)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
