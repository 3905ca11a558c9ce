import re

import numpy as np
import pytest

from mmdnn.synth_cohort import CohortSpec, make_template


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_spec():
    return CohortSpec(dims=(16, 16, 16), n_rois=6,
                      group_counts={"sNC": 4, "sMCI": 2, "pNC": 2, "pMCI": 2, "sAD": 4}, seed=3)


@pytest.fixture(scope="session")
def small_template(small_spec):
    return make_template(small_spec)


# one summary line per acceptance criterion, echoed after the test run
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = re.match(r"test_criterion_(\d+)_", item.name)
    if m and rep.failed and int(m.group(1)) not in ACCEPTANCE_LINES:
        reason = call.excinfo.exconly().splitlines()[0] if call.excinfo else rep.when
        ACCEPTANCE_LINES[int(m.group(1))] = f"criterion {int(m.group(1)):>2}: FAIL  {reason}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
