import numpy as np
import pytest

from nprkit import _parallel, geo
from nprkit.corpus import Corpus, Role, make_record

TOKYO = (35.6762, 139.6503)


def rec(rid, lat=TOKYO[0], lon=TOKYO[1], role=Role.QUERY, **kw):
    return make_record(rid, f"{rid}.png", lat, lon, role, **kw)


def utm_rec(rid, east, north, role=Role.DATABASE, zone=54, northern=True, **kw):
    """A record placed directly in UTM coordinates."""
    lat, lon = geo.utm_to_latlon(east, north, zone, northern)
    return make_record(rid, f"{rid}.png", lat, lon, role, utm_east=east, utm_north=north,
                       utm_zone=f"{zone}{'N' if northern else 'S'}", **kw)


def corpus(*records, name="test"):
    return Corpus(tuple(records), name)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _restore_threads():
    before = _parallel.get_threads()
    yield
    _parallel.set_threads(before)


# --- acceptance verdicts: one PASS/FAIL line per criterion in the summary ---

_VERDICTS = {}


@pytest.fixture
def detail():
    """Tests append short measurements here; they are echoed beside the verdict."""
    return []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    number, title = marker.args
    notes = item.funcargs.get("detail") or []
    _VERDICTS[number] = (title, "PASS" if report.passed else "FAIL", "; ".join(notes))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        title, verdict, notes = _VERDICTS[number]
        terminalreporter.write_line(f"CRITERION {number} {verdict}  {title}" + (f"  [{notes}]" if notes else ""))
