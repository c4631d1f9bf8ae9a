import pytest

from sepmatch.core import Margins, TypeSpace
from sepmatch.entropy import NestedLogitSpec
from sepmatch.montecarlo import geometric_margins, design_bases
from sepmatch.solvers import ipfp_choo_siow, ipfp_nested_logit

from oracles import design_surplus

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def design_space():
    return TypeSpace(20, 20)


@pytest.fixture(scope="session")
def design_phi(design_space):
    return design_bases(design_space)


@pytest.fixture(scope="session")
def design_Phi():
    return design_surplus()


@pytest.fixture(scope="session")
def design_margins():
    return geometric_margins(20, 0.8)


@pytest.fixture(scope="session")
def cs_solution(design_Phi, design_margins):
    return ipfp_choo_siow(design_Phi, design_margins, tol=1e-12)


@pytest.fixture(scope="session")
def design_nests():
    nests = (tuple(range(1, 11)), tuple(range(11, 21)))
    return NestedLogitSpec(nests, nests, (0.5, 0.5), (0.5, 0.5))


@pytest.fixture(scope="session")
def nested_solution(design_Phi, design_margins, design_nests):
    return ipfp_nested_logit(design_Phi, design_nests, design_margins, tol=1e-12)


def random_interior(rng, X, Y):
    """Random interior matching with margins; singles get at least 10% of each side."""
    muxy = rng.uniform(0.05, 1.0, (X, Y))
    n = muxy.sum(1) * rng.uniform(1.1, 2.0, X)
    m = muxy.sum(0) * rng.uniform(1.1, 2.0, Y)
    return muxy, Margins(n, m)
