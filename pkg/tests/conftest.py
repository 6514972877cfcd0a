from __future__ import annotations

from importlib import resources

import numpy as np
import pytest

from gdwols import PanelDataset, TreatmentCoding


def make_panel(levels, outcome, covariates=None, names=(), categories=("0", "1"), subject_ids=None, stages=None):
    levels = np.asarray(levels)
    n = len(levels)
    if covariates is None:
        covariates = np.empty((n, 0))
    if subject_ids is None:
        subject_ids = np.arange(n).astype(str)
    if stages is None:
        stages = np.zeros(n, dtype=int)
    return PanelDataset(TreatmentCoding(tuple(categories)), subject_ids, stages, levels, outcome,
                        np.asarray(covariates, dtype=float).reshape(n, len(names)), tuple(names))


def fixture_path(name: str):
    return resources.files("gdwols") / "fixtures" / name


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[k])
