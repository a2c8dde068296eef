import math
import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from navaug.env_synth import generate_features, generate_suite  # noqa: E402
from navaug.episode_sim import Simulator  # noqa: E402
from navaug.nav_graph import NavGraph, PanoNode  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_graph(rng: np.random.Generator, n: int, p: float = 0.3, spread: float = 10.0,
                 connected: bool = False) -> NavGraph:
    """Random geometric-ish graph; ``connected`` threads a random spanning path through it first."""
    ids = rng.permutation(np.arange(n) * 3 + 1).tolist()
    nodes = [PanoNode(i, (rng.uniform(0, spread), rng.uniform(0, spread), rng.uniform(0, 1))) for i in ids]
    edges = set()
    if connected:
        order = rng.permutation(ids).tolist()
        for a, b in zip(order[:-1], order[1:]):
            edges.add((min(a, b), max(a, b)))
    for a in range(n):
        for b in range(a + 1, n):
            if rng.uniform() < p:
                i, j = ids[a], ids[b]
                edges.add((min(i, j), max(i, j)))
    return NavGraph(nodes, sorted(edges))


def grid_graph(width: int, height: int, spacing: float = 2.0) -> NavGraph:
    """Lattice graph with exact integer-multiple edge lengths (plenty of ties)."""
    nodes = [PanoNode(r * width + c, (c * spacing, r * spacing, 0.0)) for r in range(height) for c in range(width)]
    edges = []
    for r in range(height):
        for c in range(width):
            k = r * width + c
            if c + 1 < width:
                edges.append((k, k + 1))
            if r + 1 < height:
                edges.append((k, k + width))
    return NavGraph(nodes, edges)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_suite():
    """Three generated environments with 32-d features, shared across tests."""
    envs = generate_suite(3, 7)
    sims = {e.id: Simulator(e.reference_graph, generate_features(e, 1, 32), e.id) for e in envs}
    return envs, sims


@pytest.fixture(scope="session")
def env20():
    return generate_suite(20, 2024)


def heading_deg(theta):
    return math.degrees(theta) % 360.0


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
