import numpy as np
import pytest

from ccexpand.model import FactorGraph


def cycle_graph(n, seed, cards=2, pendant=False):
    """n-cycle with unary factors; optional pendant chain of two variables."""
    rng = np.random.default_rng(seed)
    k = n + (2 if pendant else 0)
    factors = [((i,), np.exp(0.3 * rng.standard_normal(cards))) for i in range(k)]
    edges = [(i, (i + 1) % n) for i in range(n)]
    if pendant:
        edges += [(0, n), (n, n + 1)]
    factors += [(e, np.exp(0.8 * rng.standard_normal((cards, cards)))) for e in edges]
    return FactorGraph([cards] * k, factors)


def two_loop_graph(seed):
    """Two triangles sharing variable 0: 5 variables, 6 pairwise factors."""
    rng = np.random.default_rng(seed)
    edges = [(0, 1), (1, 2), (0, 2), (0, 3), (3, 4), (0, 4)]
    factors = [(e, np.exp(0.8 * rng.standard_normal((2, 2)))) for e in edges]
    return FactorGraph([2] * 5, factors)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def report(request):
    """Record one acceptance line; all lines are repeated in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def _report(criterion: int, ok: bool, detail: str) -> None:
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)

    return _report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance")
        for line in sorted(lines):
            terminalreporter.write_line(line)
