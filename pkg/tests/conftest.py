import os

import pytest
import torch

from pedgan.config import TrainConfig
from pedgan.data import SyntheticSpec, TrainData, make_synthetic_dataset

torch.set_num_threads(1)

SLOW = os.environ.get("PEDGAN_SLOW") == "1"


def pytest_collection_modifyitems(config, items):
    if SLOW:
        return
    skip = pytest.mark.skip(reason="slow; set PEDGAN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def synthetic_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synthetic")
    make_synthetic_dataset(str(out), SyntheticSpec(count=64, resolution=32), seed=7)
    return out


@pytest.fixture(scope="session")
def manifest_path(synthetic_dir):
    return str(synthetic_dir / "manifest.json")


@pytest.fixture(scope="session")
def tiny_data(manifest_path):
    from pedgan.data import ingest_dataset
    cfg = TrainConfig(profile="tiny")
    return TrainData.from_manifest(ingest_dataset(manifest_path), cfg.model.final_res, cfg.model.max_len)


@pytest.fixture
def tiny_config():
    return TrainConfig(profile="tiny", matching_steps=10, batch_size=8)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if not RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in range(1, 10):
        line = RESULTS.get(n)
        if line is None:
            line = f"criterion {n} NOT RUN" + (" (slow; set PEDGAN_SLOW=1)" if n == 9 else "")
        terminalreporter.write_line(line)
