"""Shared fixtures and the acceptance-criterion reporting plugin.

Acceptance tests record one result per criterion through the ``criterion``
fixture; a terminal summary section prints one line per criterion so the
overall verdict is readable without scrolling through the test log.
"""

import re

import numpy as np
import pandas as pd
import pytest

_RESULTS = []
_EXPECTED = set()


def pytest_collection_modifyitems(config, items):
    for item in items:
        m = re.match(r"test_criterion_(\d+)", item.name)
        if m and "test_acceptance" in str(item.fspath):
            _EXPECTED.add(int(m.group(1)))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _RESULTS and not _EXPECTED:
        return
    recorded = {number for number, _, _ in _RESULTS}
    lines = list(_RESULTS)
    for number in sorted(_EXPECTED - recorded):
        lines.append((number, "FAIL", "no result recorded (test errored early)"))
    terminalreporter.section("acceptance criteria")
    for number, status, detail in sorted(lines, key=lambda r: r[0]):
        suffix = f" - {detail}" if detail else ""
        terminalreporter.write_line(f"[criterion {number}] {status}{suffix}")


@pytest.fixture
def criterion():
    """Record one acceptance-criterion outcome; record before asserting."""

    def _record(number: int, passed: bool, detail: str = ""):
        status = "PASS" if passed else "FAIL"
        _RESULTS.append((number, status, detail))
        print(f"[criterion {number}] {status} - {detail}")

    return _record


@pytest.fixture
def criterion_skip():
    """Record a criterion as skipped, then skip the test."""

    def _skip(number: int, detail: str):
        _RESULTS.append((number, "SKIP", detail))
        print(f"[criterion {number}] SKIP - {detail}")
        pytest.skip(detail)

    return _skip


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def linear_xy():
    """Small linear-Gaussian dataset adequate for structured fits."""
    gen = np.random.default_rng(7)
    n = 120
    X = pd.DataFrame(
        {"x1": gen.uniform(-1, 1, n), "x2": gen.uniform(-1, 1, n)}
    )
    y = 1.0 + 2.0 * X["x1"].to_numpy() - X["x2"].to_numpy() + gen.standard_normal(n)
    return X, y


@pytest.fixture(scope="session")
def diabetes_csv(tmp_path_factory):
    """Materialize the bundled diabetes table as a benchmark-schema CSV."""
    datasets = pytest.importorskip("sklearn.datasets")
    frame = datasets.load_diabetes(as_frame=True).frame
    path = tmp_path_factory.mktemp("bench") / "diabetes.csv"
    frame.to_csv(path, index=False)
    return str(path)
