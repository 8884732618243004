import numpy as np
import pytest

from trackmill.core import Dataset, make_tracklet

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    entry = _ACCEPTANCE.setdefault(number, {"title": title, "passed": True, "detail": ""})
    if report.when == "call" or report.failed:
        entry["passed"] = entry["passed"] and report.passed
    detail = getattr(item, "acceptance_detail", None)
    if detail:
        entry["detail"] = detail


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        e = _ACCEPTANCE[number]
        status = "PASS" if e["passed"] else "FAIL"
        line = f"[{status}] criterion {number}: {e['title']}"
        if e["detail"]:
            line += f" ({e['detail']})"
        terminalreporter.write_line(line)


@pytest.fixture
def detail(request):
    """Attach a one-line measurement summary to the acceptance report line."""

    def record(text):
        request.node.acceptance_detail = text

    return record


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def labelled_dataset(spec):
    """Build a dataset from ``[(tid, cam, [pid, ...]), ...]`` without embeddings."""
    return Dataset(tuple(make_tracklet(tid, cam, pids) for tid, cam, pids in spec))


def blob_points(rng, n, d, n_blobs, spread):
    """Unit rows scattered around ``n_blobs`` random directions."""
    centres = unit_rows(rng, n_blobs, d)
    x = centres[rng.integers(0, n_blobs, size=n)] + spread * rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)
