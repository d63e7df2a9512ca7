import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from imachsr import datagen  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "desk.imhs"
    datagen.write(datagen.generate(datagen.desk_spec(7)), path)
    return str(path)


@pytest.fixture(scope="session")
def small_file(tmp_path_factory):
    """48 samples of 16x16, K=4: enough for fast CLI and ablation runs."""
    path = tmp_path_factory.mktemp("data") / "small.imhs"
    spec = datagen.GenSpec(count=48, height=16, width=16, num_classes=4, noise=0.05, texture=0.03, seed=11)
    datagen.write(datagen.generate(spec), path)
    return str(path)


def pytest_terminal_summary(terminalreporter):
    import acceptance_report

    if not acceptance_report.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(acceptance_report.LINES, key=lambda s: int(s.split()[1])):
        terminalreporter.write_line(line)
    for table in acceptance_report.TABLES:
        terminalreporter.write_line("")
        terminalreporter.write_line(table)
