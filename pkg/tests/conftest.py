import pytest
import torch

from helpers import tiny_spec


@pytest.fixture(autouse=True)
def _single_thread():
    # deterministic, and avoids oversubscription on small CI boxes
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    from cct.datasynth import generate_dataset
    root = tmp_path_factory.mktemp("tiny")
    generate_dataset(tiny_spec(), root)
    return root


@pytest.fixture(scope="session")
def tiny_weak_data(tmp_path_factory):
    from cct.datasynth import generate_dataset
    root = tmp_path_factory.mktemp("tiny_weak")
    generate_dataset(tiny_spec(n_weak=6), root)
    return root


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
