import pytest

from clusterlab.datahub import synthetic_blobs
from clusterlab.trainer import TrainPlan, train

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def small_data():
    return (
        synthetic_blobs(4, 16, 60, seed=3, split="train"),
        synthetic_blobs(4, 16, 20, seed=3, split="test"),
    )


@pytest.fixture(scope="session")
def small_plan():
    return TrainPlan(dims=[16, 12, 8, 4], k=2, epochs=10, batch_size=16, lr=1e-2, eval_every=5, seed=1)


@pytest.fixture(scope="session")
def small_run(small_data, small_plan):
    return train(small_plan, *small_data)


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
