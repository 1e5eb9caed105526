import os
import re
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

_CRITERIA = {}


@pytest.fixture(scope="session")
def trained_pair_net():
    """Pair score network trained once per session with the default
    (full-size) hyperparameters on the xi = 0.9 pairwise prior."""
    from scvamp.dsm import DsmConfig, train_dsm
    from scvamp.score_models import PairwiseGaussianPrior

    prior = PairwiseGaussianPrior(1.0, 0.9)
    net, report = train_dsm(lambda r, c: prior.sample_prior(r, (c, 2)), DsmConfig(seed=0))
    return prior, net, report


def pytest_runtest_logreport(report):
    match = re.search(r"test_acceptance\.py::test_criterion_(\d+)", report.nodeid)
    if not match:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _CRITERIA[int(match.group(1))] = report


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        rep = _CRITERIA[k]
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        detail = dict(rep.user_properties).get("detail", "")
        terminalreporter.write_line(f"criterion {k:2d}: {status}  {detail}")
