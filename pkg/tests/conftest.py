import numpy as np
import pytest
from hypothesis import settings

from cascadeseg.cascade import init_params, tiny_config
from cascadeseg.synth import DatasetSpec, generate_dataset

settings.register_profile("repo", max_examples=60, deadline=None)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_params(tiny):
    return init_params(tiny, 0)


@pytest.fixture(scope="session")
def small_scenes():
    return generate_dataset(DatasetSpec(num_scenes=6, seed=3))


ACCEPTANCE_LINES = []


def record_acceptance(name, passed, detail=""):
    line = f"[{'PASS' if passed else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
