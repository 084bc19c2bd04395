import numpy as np
import pytest
import torch

from cclh.simgen import ScenarioConfig, generate_dataset


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def small_cfg():
    # 12 instances, 5 types, one case per pair, 10 snapshots per case
    return ScenarioConfig(cases_per_pair=1, window=300, seed=3)


@pytest.fixture(scope="session")
def small_cases(small_cfg):
    return generate_dataset(small_cfg)


@pytest.fixture(scope="session")
def small_dir(small_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("small")
    generate_dataset(small_cfg, out)
    return out



def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
