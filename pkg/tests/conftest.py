import numpy as np
import pytest

from htn import _backend
from htn.htmm import HtmmParameters
from htn.trees import LabeledTree, SkeletonSpec, sample_skeleton


def random_tree(rng, max_nodes=8, L=3, V=3, min_nodes=1):
    kids = sample_skeleton(SkeletonSpec(min_nodes, max_nodes, L), rng)
    return LabeledTree(rng.integers(0, V, len(kids)), kids)


def random_params(rng, C, L, V, std=1.0):
    return HtmmParameters.random(C, L, V, rng, std=std)


def random_instance(rng, max_nodes=8, C_max=3, V_max=3, L_max=3, std=1.0):
    C = int(rng.integers(1, C_max + 1))
    V = int(rng.integers(1, V_max + 1))
    L = int(rng.integers(1, L_max + 1))
    return random_params(rng, C, L, V, std), random_tree(rng, max_nodes, L, V)


@pytest.fixture(params=_backend.available())
def backend(request):
    with _backend.use_backend(request.param):
        yield request.param


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda s: int(s.split()[0])):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
