import numpy as np
import pytest
from hypothesis import settings

from unvp.config import RunConfig

settings.register_profile("default", max_examples=40, deadline=None, derandomize=True)
settings.load_profile("default")


def small_config(**kw) -> RunConfig:
    """A blob run small enough for unit tests (a few seconds)."""
    base = dict(
        dataset="blobs",
        n_per_class=30,
        epochs=3,
        pretrain_epochs=1,
        flow_blocks=2,
        flow_hidden=16,
        flow_res_blocks=1,
        batch=32,
        lr=1e-3,
        T_max=3,
    )
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def digit_corpus(tmp_path_factory):
    from unvp.data import build_digit_corpus

    return build_digit_corpus(tmp_path_factory.mktemp("corpus") / "digits.unvpd")


# PASS/FAIL lines appended by the acceptance suite
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
