import numpy as np
import pytest

from rbbin.background import observe_fits

MONOTONE_SLACK = 1e-9


class FitAudit:
    """Session-wide record of every coordinate solve made by any test."""

    def __init__(self):
        self.events = 0
        self.violations = []

    def __call__(self, ev):
        self.events += 1
        if ev.f_after > ev.f_before + MONOTONE_SLACK:
            self.violations.append(("monotone", ev))
        if not (ev.w_min > 0.0 and ev.w_max <= 1.0):
            self.violations.append(("weights", ev))


AUDIT = FitAudit()
ACCEPTANCE_LINES = []


@pytest.fixture(autouse=True)
def audit_fits():
    """Every fit in every test is checked for IRLS monotonicity and weight range."""
    before = len(AUDIT.violations)
    with observe_fits(AUDIT):
        yield AUDIT
    new = AUDIT.violations[before:]
    assert not new, f"{len(new)} IRLS audit violations, first: {new[0]}"


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_collection_modifyitems(items):
    # the session-wide audit check must see every other fit first
    last = [it for it in items if it.get_closest_marker("after_all")]
    items[:] = [it for it in items if not it.get_closest_marker("after_all")] + last


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
    terminalreporter.write_line(
        f"IRLS audit: {AUDIT.events} coordinate solves checked, {len(AUDIT.violations)} violations")
