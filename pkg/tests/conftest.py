import os

# single-threaded BLAS keeps reductions, and therefore results, bit-reproducible
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from msgwtcn.graph import build_graph  # noqa: E402


def random_connected_edges(rng, n, extra=0.15):
    """Random spanning tree plus extra random edges, as string ids."""
    names = [f"v{i:03d}" for i in range(n)]
    perm = rng.permutation(n)
    edges = [(names[perm[i]], names[perm[rng.integers(i)]]) for i in range(1, n)]
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < extra:
                edges.append((names[i], names[j]))
    return edges


def random_graph(rng, n, extra=0.15):
    return build_graph(random_connected_edges(rng, n, extra))


def grid_graph(w, h):
    from msgwtcn.data import grid_edges

    return build_graph(grid_edges(w, h))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def p2():
    return build_graph([("a", "b")])


@pytest.fixture
def p3():
    return build_graph([("a", "b"), ("b", "c")])


# acceptance criteria report one line each; the lines are repeated at the
# end of the session so they are visible without -s
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report(capsys):
    def emit(number: int, ok: bool, detail: str):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
