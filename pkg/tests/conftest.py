import numpy as np
import pytest
from hypothesis import settings
from hypothesis import strategies as st

from lampe.pe_map import MappingConfig

# first calls may trigger numba compilation
settings.register_profile("lampe", deadline=None, max_examples=60)
settings.load_profile("lampe")

TEN_TOKEN = MappingConfig(l=10, m=7, s1=3, s2=3)


@pytest.fixture
def ten_token():
    return TEN_TOKEN


@st.composite
def mapping_configs(draw, min_l=2, max_l=64):
    """Valid configs with a non-empty middle region; ``m == l`` is included."""
    l = draw(st.integers(min_l, max_l))
    s1 = draw(st.integers(0, l - 2))
    s2 = draw(st.integers(0, l - 2 - s1))
    m = draw(st.integers(s1 + s2 + 1, l))
    return MappingConfig(l, m, s1, s2)


def random_config(rng, l):
    """Uniformly pick a valid compressing config of length ``l`` (needs l >= 3)."""
    s1 = int(rng.integers(0, l - 1))
    s2 = int(rng.integers(0, l - 1 - s1))
    m = int(rng.integers(s1 + s2 + 1, l + 1))
    return MappingConfig(l, m, s1, s2)


def all_configs(l):
    """Every valid (m, s1, s2) for length ``l``."""
    for s1 in range(l - 1):
        for s2 in range(l - 1 - s1):
            for m in range(s1 + s2 + 1, l + 1):
                yield MappingConfig(l, m, s1, s2)
    # identity configs whose regions would otherwise be degenerate
    for s1 in range(l):
        for s2 in range(l - s1):
            if s1 + s2 >= l - 1 and s1 + s2 < l:
                yield MappingConfig(l, l, s1, s2)


@pytest.fixture
def rng():
    return np.random.default_rng(20260214)


# ---------------------------------------------------------------------------
# per-criterion PASS/FAIL summary
# ---------------------------------------------------------------------------

_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        k, title = marker.args
        entry = _criteria.setdefault(k, {"title": title, "ok": True, "seconds": 0.0, "tests": 0})
        entry["ok"] &= report.passed
        entry["seconds"] += report.duration
        entry["tests"] += 1


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_criteria):
        e = _criteria[k]
        status = "PASS" if e["ok"] else "FAIL"
        terminalreporter.write_line(
            f"criterion {k:>2}: {status}  {e['title']}  [{e['tests']} test(s), {e['seconds']:.1f}s]"
        )
