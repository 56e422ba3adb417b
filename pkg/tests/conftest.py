import os
import sys

import pytest
import torch
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

torch.set_num_threads(1)
settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def micro_cfg():
    from zsadmoe.config import micro_config

    return micro_config()


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Micro-sized (32x32) benchmark, 8 images per class."""
    from zsadmoe.config import micro_config
    from zsadmoe.data import generate_synthetic_dataset

    cfg = micro_config()
    out = tmp_path_factory.mktemp("tiny")
    generate_synthetic_dataset(cfg.data.classes, 8, 0, out, splits={"train": ["A", "B", "C"], "test": ["D", "E"]},
                               image_size=cfg.encoder.image_size)
    return out


@pytest.fixture(scope="session")
def desk_data(tmp_path_factory):
    """Default desk-scale benchmark (64x64, default images per class)."""
    from zsadmoe.config import RunConfig
    from zsadmoe.data import generate_synthetic_dataset

    cfg = RunConfig()
    out = tmp_path_factory.mktemp("desk")
    generate_synthetic_dataset(cfg.data.classes, cfg.data.n_per_class, cfg.data.seed, out,
                               splits={"train": cfg.data.train_classes, "test": cfg.data.test_classes})
    return out


# one PASS/FAIL line per acceptance criterion, printed after the run
_CRITERIA = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        number = int(report.nodeid.split("test_criterion_")[1].split("_")[0])
        detail = dict(report.user_properties).get("detail", "")
        _CRITERIA[number] = ("PASS" if report.passed else "FAIL", report.nodeid.split("::")[-1], detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, name, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {name}  {detail}")
