import sys

import numpy as np
import pytest
from hypothesis import settings

from tephra_abc.metric_learning import TrainingSet, make_split
from tephra_abc.model import PriorBox, SimulatorConfig, SurrogateSimulator, default_locations
from tephra_abc.seeding import make_rng

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

PAPER_PRIOR = PriorBox((100.0, 30.0), (300.0, 100.0))


@pytest.fixture
def prior():
    return PAPER_PRIOR


@pytest.fixture
def surrogate():
    return SurrogateSimulator(SimulatorConfig(noise_scale=0.1), default_locations())


def surrogate_training_set(n=80, seed=0, noise=0.1, train_fraction=0.75):
    sim = SurrogateSimulator(SimulatorConfig(noise_scale=noise), default_locations())
    thetas = PAPER_PRIOR.sample(make_rng(seed, "fixture"), n)
    xs = np.array([sim(t, i) for i, t in enumerate(thetas)])
    train, test = make_split(n, train_fraction, seed)
    return TrainingSet(thetas, xs, train, test)


@pytest.fixture(scope="session")
def small_ts():
    return surrogate_training_set()


def pytest_terminal_summary(terminalreporter):
    verdicts = getattr(sys.modules.get("test_acceptance"), "VERDICTS", None)
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for key in sorted(verdicts):
            terminalreporter.write_line(verdicts[key])
