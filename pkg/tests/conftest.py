import time

import numpy as np
import pytest
from hypothesis import settings

from cavesim.geom import ScreenRect
from cavesim.rig import cave

settings.register_profile("default", deadline=None, max_examples=200)
settings.load_profile("default")


@pytest.fixture(scope="session")
def rig():
    return cave()


@pytest.fixture(scope="session")
def front():
    return ScreenRect((-1.5, 0, -1.5), (1.5, 0, -1.5), (-1.5, 3, -1.5), 1024, 1024, "front")


def oracle_uv(eye, s, p):
    """Screen coordinates of the eye->p line crossing the plane of ``s``.

    Solves eye + t (p - eye) = LL + u R + v U directly from the corners,
    without going through the screen basis.
    """
    e1 = s.lower_right - s.lower_left
    e2 = s.upper_left - s.lower_left
    r, up = e1 / np.linalg.norm(e1), e2 / np.linalg.norm(e2)
    eye, p = np.asarray(eye, float), np.asarray(p, float)
    m = np.column_stack([p - eye, -r, -up])
    t, u, v = np.linalg.solve(m, s.lower_left - eye)
    return np.array([u, v])


@pytest.fixture(scope="session")
def clean_report(rig):
    from cavesim.diagnostics import run_suite
    from cavesim.rig import FaultSet
    return run_suite(rig, FaultSet(), seed=0)


@pytest.fixture(scope="session")
def matrix_run(rig):
    """Full-suite report for every canonical single fault, run once per session,
    with the wall time of the whole matrix."""
    from cavesim.catalog import CANONICAL_FAULTS
    from cavesim.diagnostics import run_suite
    t0 = time.perf_counter()
    reports = {cf.name: run_suite(rig, cf.make(), seed=0) for cf in CANONICAL_FAULTS}
    return reports, time.perf_counter() - t0


@pytest.fixture(scope="session")
def matrix_reports(matrix_run):
    return matrix_run[0]


def isolation_problems(cf, report):
    """Ways ``report`` breaks the isolation contract for canonical fault ``cf``."""
    problems = []
    designated = [f for f in report.findings if f.test_name == cf.designated
                  and (cf.screen is None or f.screen == cf.screen)]
    if len(designated) != 1:
        return [f"{len(designated)} designated findings"]
    d = designated[0]
    if d.status != "fail":
        problems.append(f"{cf.designated} status {d.status}")
    if cf.estimate not in d.estimates:
        problems.append(f"missing estimate {cf.estimate}")
    else:
        m = cf.magnitude(d)
        if not abs(m - cf.expected) <= cf.tolerance:
            problems.append(f"{cf.estimate}={m!r}, want {cf.expected} +/- {cf.tolerance}")
    for f in report.findings:
        if f is d or f.test_name in cf.also_sensitive:
            continue
        if f.status == "fail":
            problems.append(f"unexpected fail: {f.test_name}[{f.screen}]")
    return problems


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
