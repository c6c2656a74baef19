import numpy as np
import pytest

from sgfusion.label_stats import ZoneDistanceGraph


def make_graph(D, ids=None) -> ZoneDistanceGraph:
    D = np.asarray(D, dtype=float)
    n = len(D)
    ids = ids or [f"z{i}" for i in range(n)]
    return ZoneDistanceGraph(tuple(ids), D, "euclidean")


def random_graph(n: int, seed: int = 0, scale: float = 1.0) -> ZoneDistanceGraph:
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, 3)) * scale
    D = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
    return make_graph(D)


@pytest.fixture
def graph4():
    return random_graph(4, seed=3)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
