import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ddpoison.benchmarks import flex_dataset, flex_problem, step_input
from ddpoison.optim import make_rng

settings.register_profile(
    "ddpoison", max_examples=30, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("ddpoison")


@pytest.fixture(scope="session")
def base_problem():
    return flex_problem()


@pytest.fixture(scope="session")
def step_problem(base_problem):
    return base_problem.with_dataset(flex_dataset(step_input(512)))


def white_noise_problem(base, N, seed):
    return base.with_dataset(flex_dataset(make_rng(seed).standard_normal(N)))


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def report(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
