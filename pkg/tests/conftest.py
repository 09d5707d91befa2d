import numpy as np
import pytest

from cbire.config import load_config
from cbire.model import model_from_config

EXAMPLES = ("theorem_example", "infinite_activity", "catastrophe_heavy")


def shipped(name):
    return model_from_config(load_config(name)["model"])


def make_model(**kw):
    base = dict(alpha=1.0, b=0.0, sigma=0.0)
    base.update(kw)
    return model_from_config(base)


EXP_MU = {"family": "exponential", "c": 1.0, "beta": 1.0}


@pytest.fixture(scope="session")
def theorem_model():
    return shipped("theorem_example")


@pytest.fixture(scope="session")
def example_models():
    return {name: shipped(name) for name in EXAMPLES}


@pytest.fixture(scope="session")
def theorem_cert(theorem_model):
    from cbire.certify import certify
    return certify(theorem_model, 0.9)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance reporting: one line per criterion in the terminal summary
_ACCEPTANCE: list[tuple[int, bool, str]] = []


@pytest.fixture
def record_criterion():
    def record(number: int, ok: bool, detail: str) -> bool:
        _ACCEPTANCE.append((number, bool(ok), detail))
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")
