import os
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile("bench", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("bench")

_LOCAL_DATA = Path("/root/data")
if "VICIOUSBENCH_DATA" not in os.environ and (_LOCAL_DATA / "mnist").is_dir():
    os.environ["VICIOUSBENCH_DATA"] = str(_LOCAL_DATA)

torch.set_num_threads(max(1, torch.get_num_threads()))

ACCEPTANCE_LINES: list[str] = []


def mnist_available() -> bool:
    root = os.environ.get("VICIOUSBENCH_DATA")
    return bool(root) and (Path(root) / "mnist").is_dir()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_categorical():
    from viciousbench.datahub import load_dataset
    return load_dataset("synthetic-categorical", (8, 8), seed=3, n_outputs=4, n_train=300, n_test=80)


@pytest.fixture(scope="session")
def tiny_binary():
    from viciousbench.datahub import load_dataset
    return load_dataset("synthetic-binary", (8, 8), seed=3, n_outputs=4, n_train=300, n_test=80)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
