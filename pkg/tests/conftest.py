import numpy as np
import pytest

from trajflow.model import Architecture, TrainConfig, VectorFieldModel, prepare
from trajflow.synth import make_world, sample_dataset

TINY = dict(K=6, width=16, blocks=2, control_dim=8, batch_size=16, lr=1e-3)


@pytest.fixture(scope="session")
def world():
    return make_world(0, "urban", rows=4, cols=4)


@pytest.fixture(scope="session")
def small_trajs(world):
    return sample_dataset(world, 60, np.random.default_rng([0, 1]))


@pytest.fixture(scope="session")
def small_data(world, small_trajs):
    return prepare(small_trajs, TINY["K"], world.grid)


def tiny_model(n_zones=16, seed=0, **over):
    cfg = TrainConfig(**{**TINY, **over})
    arch = Architecture(cfg.K, cfg.width, cfg.blocks, cfg.control_dim, n_zones, cond_hidden=12)
    return VectorFieldModel(arch, np.random.default_rng(seed)), cfg


# acceptance verdicts, filled by test_acceptance.py and printed after the run
VERDICTS = {}


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[n])
