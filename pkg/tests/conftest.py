import numpy as np
import pytest

from fedbound.config import ExperimentConfig
from fedbound.model import init_model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_model(rng):
    model = init_model([6, 5, 4, 3], rng)
    for b in model.biases:
        b += rng.normal(0, 0.1, size=b.shape)
    return model


def tiny_config(**sections) -> ExperimentConfig:
    """A few-second scenario for engine and CLI tests."""
    base = ExperimentConfig().replace(
        data={"n_classes": 4, "per_class": 40, "test_per_class": 20, "grid": 8, "syn_per_class": 20},
        fl={"n_clients": 4, "rounds": 2, "local_epochs": 1, "lr_local": 0.05, "lr_distill": 0.01, "pretrain_epochs": 2},
        model={"prototypes": [[16, 8]]},
        defense={"lr_bounds": 0.05, "bound_init": "activation_max"},
    )
    return base.replace(**sections) if sections else base


# lines recorded by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
