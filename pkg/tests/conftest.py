import os

import numpy as np
import pytest
import torch

from mothernet.encoder import PRESETS, MotherNet
from mothernet.prior import PriorConfig, gen_blobs, sample_valid_task

torch.set_num_threads(1)

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DESK_CHECKPOINT = os.path.join(ROOT, "artifacts", "desk", "latest.mnck")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_model():
    torch.manual_seed(0)
    return MotherNet(PRESETS["tiny"]).eval()


@pytest.fixture(scope="session")
def desk_model():
    """Randomly initialized desk-size model (for shape and contract tests)."""
    torch.manual_seed(0)
    return MotherNet(PRESETS["desk"]).eval()


@pytest.fixture(scope="session")
def small_tasks():
    rng = np.random.default_rng(99)
    return [sample_valid_task(PriorConfig(), rng) for _ in range(5)]


@pytest.fixture
def blobs(rng):
    return gen_blobs(80, rng, n_features=2)


def write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(str(v) for v in r) + "\n")
    return str(path)


# --------------------------------------------------------------------------
# acceptance report: one line per criterion at the end of the run

ACCEPTANCE = {}


def record_acceptance(number, title, passed, detail):
    ACCEPTANCE[number] = (title, bool(passed), detail)
    print(f"[criterion {number:2d}] {'PASS' if passed else 'FAIL'}  {title}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}  {'PASS' if passed else 'FAIL'}  {title}: {detail}")
