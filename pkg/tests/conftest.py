import numpy as np
import pytest
import torch

from srcloc.graph import Graph, derive_operators, generate_graph


# (number, verdict, detail) lines recorded by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training experiments")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def path_graph(n: int) -> Graph:
    return Graph.from_edges(n, [(i, i + 1) for i in range(n - 1)])


def star_graph(leaves: int) -> Graph:
    return Graph.from_edges(leaves + 1, [(0, i) for i in range(1, leaves + 1)])


def random_connected(n: int, seed: int, p: float | None = None) -> Graph:
    """Erdos-Renyi draw plus a random spanning path, so every node is present and connected."""
    rng = np.random.default_rng(seed)
    p = p if p is not None else min(1.0, 3.0 / n)
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    order = rng.permutation(n)
    edges += list(zip(order[:-1], order[1:]))
    return Graph.from_edges(n, edges)


@pytest.fixture
def small_graph():
    g = generate_graph("watts-strogatz", seed=3, n=12, k=4, p=0.3)
    return g, derive_operators(g)
