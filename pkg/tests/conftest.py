import numpy as np
import pytest

from bdlab.model import DenoiserModel, ModelConfig

import toy

_ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance_log(request):
    """Collects one ``[PASS]``/``[FAIL]`` line per criterion for the summary."""
    lines = request.config.stash[_ACCEPTANCE_KEY]

    def log(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] {number}: {title} -- {detail}"
        print(line)
        lines.append(line)
        return ok

    return log


@pytest.fixture
def tiny_model():
    return DenoiserModel.build(ModelConfig(dim=2, hidden=8, blocks=1, n_labels=3, time_dim=4), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def ring_pretrained():
    return toy.pretrained("ring")


@pytest.fixture(scope="session")
def raster_pretrained():
    return toy.pretrained("raster")
