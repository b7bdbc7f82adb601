"""Shared fixtures plus a terminal summary of the acceptance checklist.

The checklist tests live in test_acceptance.py and are named
``test_criterion_<n>_*``. A hook below records their outcomes and prints
one PASS/FAIL line per criterion at the end of the run; a criterion whose
test never ran (collection error, interrupted session) is reported as a
failure rather than silently omitted.
"""

import re

import pytest

from minet import data
from minet.train import TrainConfig

CRITERIA = {
    1: "gradient suite: all ops and composites under tolerance, in budget",
    2: "full and no_int outputs bit-identical at init; G equals F_L",
    3: "affinity matrix matches the brute-force oracle",
    4: "pixel-shuffle and serialization round trips bit-exact (100 cases)",
    5: "desk-scale training beats bicubic by the required margins, in budget",
    6: "full variant outscores no_int and no_aux on most seeds",
    7: "metric self-consistency identities",
    8: "identical seeds reproduce the training checkpoint byte-for-byte",
}

_outcomes = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    result = yield
    report = result.get_result()
    match = re.match(r"test_criterion_(\d+)", item.name)
    if match:
        n = int(match.group(1))
        if report.when == "call":
            _outcomes[n] = report.outcome == "passed"
        elif report.outcome != "passed" and n not in _outcomes:
            # setup/teardown error: the criterion did not get a clean run
            _outcomes[n] = False


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _outcomes:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(CRITERIA):
        if n in _outcomes:
            status = "PASS" if _outcomes[n] else "FAIL"
        else:
            status = "FAIL (did not run)"
        terminalreporter.write_line("criterion %d: %s -- %s"
                                    % (n, status, CRITERIA[n]))


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Twelve 16x16 phantom pairs at r=2: just enough for a fast train run."""
    root = tmp_path_factory.mktemp("tinyds")
    data.build_dataset(str(root), count=12, size=16, r=2, seed=5)
    return str(root)


@pytest.fixture
def tiny_config(tiny_dataset):
    """One-epoch toy model over the tiny dataset."""
    return TrainConfig(epochs=1, batch_size=4, lr=1e-3, seed=0, r=2,
                       dataset_root=tiny_dataset, L=1, C=8, B=1, reduction=4)
