import numpy as np
import pytest

from ucam import data as D
from ucam.model import ModelConfig, init_params
from ucam.numerics import RngStream


@pytest.fixture
def small_cfg():
    return ModelConfig(grid=3, image_dim=4, question_dim=4, key_dim=3, feature_dim=4, hidden=5,
                       dropout=0.3)


@pytest.fixture
def small_batch():
    recs = D.generate_records(11, "train", 6, D.GenerationParams(grid=3, min_distractor_objects=1,
                                                                 max_distractor_objects=3))
    return D.encode_records(recs)


@pytest.fixture
def small_params(small_cfg):
    return init_params(small_cfg, RngStream(3))


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    D.generate_dataset(out, 5, {"train": 96, "val": 32, "test": 32})
    return out


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


# criterion number -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
