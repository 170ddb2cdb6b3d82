import numpy as np
import pytest

from privatar.corpus import CorpusSpec, dataset_mean, generate
from privatar.frequency import block_dct, energy_rank, make_plan
from privatar.pipeline import train_system

SMALL_SPEC = CorpusSpec(height=32, width=32, classes=12, frames_per_class=4, seed=3)


@pytest.fixture(scope="session")
def small_corpus():
    return generate(SMALL_SPEC)


@pytest.fixture(scope="session")
def small_system(small_corpus):
    mean = dataset_mean(small_corpus)
    ranking = energy_rank([block_dct(t, mean) for t in small_corpus.textures])
    plan = make_plan(ranking, 12)
    return train_system(small_corpus.textures, mean, plan, latent_dim=32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
