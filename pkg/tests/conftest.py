import sys

import numpy as np
import pytest

from nhnn.dataio import SyntheticSpec, generate_synthetic
from nhnn.dcnn import Architecture
from nhnn.training import TrainingConfig


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_spec():
    return SyntheticSpec(n_groups=2, n_speakers_per_group=2, utterances_per_speaker=30,
                         d_s=6, n_mel=5, T_range=(6, 10), label_map_mode="group_flipped",
                         signal_strength=3.0, seed=3)


@pytest.fixture(scope="session")
def tiny_corpus(tiny_spec):
    return generate_synthetic(tiny_spec)


@pytest.fixture(scope="session")
def tiny_arch():
    return Architecture(n_mel=5, channels=4, kernel_size=3, dilations=(1, 2), hidden=5)


@pytest.fixture(scope="session")
def fast_config():
    return TrainingConfig(batch_size=16, learning_rate=1e-2, max_epochs=4, patience=2)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance.format_results():
        terminalreporter.write_line(line)
