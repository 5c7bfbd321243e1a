import numpy as np
import pytest

from gridppo.dataset import generate_scenarios, label_scenarios
from gridppo.grid_model import case14, modified_case14


@pytest.fixture(scope="session")
def case():
    return case14()


@pytest.fixture(scope="session")
def mod_case():
    return modified_case14()


@pytest.fixture(scope="session")
def small_dataset(mod_case):
    """A few dozen oracle-labeled scenarios on the modified case."""
    return label_scenarios(mod_case, generate_scenarios(mod_case, 40, seed=11), seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_VERDICTS = []


@pytest.fixture
def verdict():
    """Record one acceptance line: ``verdict(number, passed, detail)``."""
    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        _VERDICTS.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
