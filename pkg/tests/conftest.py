import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "pvcast",
    max_examples=30,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("pvcast")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def uniform(rng, *shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


# -- acceptance summary: one line per criterion ------------------------------------
def _criterion_reports(terminalreporter):
    seen = {}
    for outcome in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid:
                continue
            if rep.when == "call" or outcome in ("error", "skipped"):
                name = nodeid.split("::")[-1]
                if outcome in ("failed", "error") or name not in seen:
                    seen[name] = (outcome, getattr(rep, "duration", 0.0))
    return seen


def pytest_terminal_summary(terminalreporter):
    seen = _criterion_reports(terminalreporter)
    if not seen:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(seen):
        outcome, dur = seen[name]
        num, _, label = name[len("test_criterion_"):].partition("_")
        verdict = {"passed": "PASS", "skipped": "SKIP"}.get(outcome, "FAIL")
        terminalreporter.write_line(f"criterion {int(num):2d} {label.replace('_', ' '):<28} {verdict}  ({dur:.1f} s)")
