import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cbire import BranchingMechanism, EnvSpec, ImmigrationMechanism, JumpMeasure2D, ModelSpec  # noqa: E402

ACCEPTANCE_LINES: list[str] = []
MODELS_DIR = Path(__file__).resolve().parent.parent / "models"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def symmetric_model():
    return ModelSpec(BranchingMechanism(b=[[2, -1], [-1, 2]]), ImmigrationMechanism(), EnvSpec(a=-3.0))


@pytest.fixture
def full_model():
    return ModelSpec(
        BranchingMechanism(b=[[2, -0.5], [-0.5, 3]], c=[0.5, 0.3],
                           m1=JumpMeasure2D.exponential([2, 3], 0.5), m2=JumpMeasure2D.atom([0.2, 0.4], 0.7)),
        ImmigrationMechanism(h=[0.3, 0.2], n=JumpMeasure2D.exponential([1, 2], 0.4)),
        EnvSpec(a=-0.2, sigma=0.3, jump_sizes=[0.5, -1.5], jump_rates=[0.5, 0.3]),
    )
