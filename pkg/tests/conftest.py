import pytest

from spectraflow.config import Config
from spectraflow.synth import make_benchmark

# one line per acceptance criterion, printed in the terminal summary
CRITERIA: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])


@pytest.fixture(scope="session")
def tiny_cfg():
    """Seconds-scale configuration for pipeline smoke tests."""
    return Config().replace(
        data={"image_size": 32, "n_train": 12, "n_val": 6},
        stage1={"epochs": 2, "batch_size": 4},
        stage2={"epochs": 2, "batch_size": 4, "patience": 5},
        ablation={"seeds": (1,), "lambdas": (0.0, 0.4), "fractions": (0.5, 1.0)},
    )


@pytest.fixture(scope="session")
def tiny_bench(tiny_cfg):
    d = tiny_cfg.data
    return make_benchmark(d.seed, d.n_train, d.n_val, d.image_size, d.difficulty)
