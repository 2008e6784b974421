import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rgbd_curriculum.numerics import precision

settings.register_profile(
    "default",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")


@pytest.fixture
def f64():
    with precision("float64"):
        yield


@pytest.fixture(scope="session")
def small_dataset():
    from rgbd_curriculum.data import synthetic_dataset

    return synthetic_dataset(40, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_SEEDS = (0, 1, 2)


class DeskBench:
    """The default 625-sample benchmark plus a run cache shared by every slow test."""

    def __init__(self):
        from rgbd_curriculum.cli import load_data
        from rgbd_curriculum.config import CurriculumConfig
        from rgbd_curriculum.eval import PipelineCache

        self.cfg = CurriculumConfig()
        self.dataset = load_data(self.cfg)
        self.cache = PipelineCache()
        self.reports = {}

    def run(self, seed, **changes):
        import dataclasses

        from rgbd_curriculum.eval import run_pipeline

        return run_pipeline(dataclasses.replace(self.cfg, seed=seed, **changes), self.dataset, self.cache)

    def report(self, name, fn):
        if name not in self.reports:
            self.reports[name] = fn(self.cfg, self.dataset, seeds=ACCEPTANCE_SEEDS, cache=self.cache)
        return self.reports[name]


@pytest.fixture(scope="session")
def desk():
    return DeskBench()


@pytest.fixture(scope="session")
def default_runs(desk):
    return {s: desk.run(s) for s in ACCEPTANCE_SEEDS}


def pytest_terminal_summary(terminalreporter):
    from tests.verdicts import RESULTS, line

    if RESULTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(line(n))
