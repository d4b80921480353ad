import numpy as np
import pytest

from shapeadapt.data import SynthConfig, generate_synthetic, split_train_eval

# filled by test_acceptance; printed once at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: s.split("criterion ")[1][:1]):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_task():
    cfg = SynthConfig(dim=16, num_classes=4, num_bins=2, samples_per_class_per_bin=40, seed=3)
    task = generate_synthetic(cfg)
    train, evaluate = split_train_eval(task.dataset, 0.75, 3, task.partition)
    return task, train, evaluate
