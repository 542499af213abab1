import numpy as np
import pytest
import torch
from hypothesis import settings

from unidwm import numerics
from unidwm.config import RunConfig

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _float32_default():
    numerics.set_precision("float32")
    torch.set_num_threads(1)
    yield
    numerics.set_precision("float32")


@pytest.fixture
def f64():
    with numerics.precision("float64"):
        yield


@pytest.fixture(scope="session")
def cfg():
    return RunConfig()


@pytest.fixture(scope="session")
def sample(cfg):
    from unidwm.toyworld import build_sample
    return build_sample(5, cfg.world)


def rng(seed=0):
    return np.random.default_rng(seed)



_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """record(name, ok, detail): one pass/fail line per acceptance criterion."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
