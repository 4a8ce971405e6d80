import pytest
from hypothesis import HealthCheck, settings

from clora.config import ExperimentConfig

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: full-size acceptance criteria (minutes of CPU)")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0].strip("[#]"))):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict():
    """Record (and print) one pass/fail line, then assert it."""

    def check(number: int, title: str, ok: bool, detail: str = ""):
        line = f"[#{number}] {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return check


def tiny(**kw) -> ExperimentConfig:
    """A run small enough for unit tests (seconds, not minutes)."""
    base = dict(n_tasks=2, steps_per_task=10, pretrain_steps=30, base_concepts=4,
                samples_per_snapshot=20, batch_size=16)
    if kw.get("workload") == "classification":
        base.update(classes_per_task=2, pretrain_steps=30)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny
