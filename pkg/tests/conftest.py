import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("invlearn", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("invlearn")


@pytest.fixture
def gen():
    return np.random.default_rng(20240917)


def random_spd(gen, dim, cond=1e3):
    q, _ = np.linalg.qr(gen.standard_normal((dim, dim)))
    lam = np.geomspace(1.0, 1.0 / cond, dim)
    return (q * lam) @ q.T


_ACCEPTANCE = []


@pytest.fixture
def verdict():
    """Record and print one PASS/FAIL line per acceptance criterion, then assert it."""
    def _verdict(number, name, ok, detail=""):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        _ACCEPTANCE.append((number, line))
        print(line)
        assert ok, line
    return _verdict


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
