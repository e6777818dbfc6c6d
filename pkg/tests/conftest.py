import os
import sys

import pytest

from gasket_plap.solver import SolveOptions, two_solutions
from gasket_plap.validation import canonical_problem


@pytest.fixture(scope="session", autouse=True)
def rp_cache(tmp_path_factory):
    """Keep the r_p sidecar cache out of the home directory."""
    path = tmp_path_factory.mktemp("rp") / "rp_cache.json"
    old = os.environ.get("GASKET_PLAP_CACHE")
    os.environ["GASKET_PLAP_CACHE"] = str(path)
    yield path
    if old is None:
        os.environ.pop("GASKET_PLAP_CACHE", None)
    else:
        os.environ["GASKET_PLAP_CACHE"] = old


@pytest.fixture(scope="session")
def problem5():
    return canonical_problem(5)


@pytest.fixture(scope="session")
def problem4():
    return canonical_problem(4)


@pytest.fixture(scope="session")
def report5(problem5):
    spec, g, em, th, emb = problem5
    return two_solutions(spec, g, em, SolveOptions(), emb)


@pytest.fixture(scope="session")
def report4(problem4):
    spec, g, em, th, emb = problem4
    return two_solutions(spec, g, em, SolveOptions(), emb)



def pytest_terminal_summary(terminalreporter):
    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    results = getattr(mod, "RESULTS", [])
    if results:
        terminalreporter.section("acceptance criteria")
        for r in sorted(results, key=lambda r: r.number):
            terminalreporter.write_line(r.line())
