import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_RESULTS: dict[str, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(cid, title): acceptance criterion covered by the test")


def pytest_runtest_logreport(report):
    cid = dict(report.user_properties).get("criterion")
    if cid is None:
        return
    entry = _RESULTS.setdefault(cid, {"title": dict(report.user_properties)["title"], "status": "PASS",
                                      "details": []})
    if report.when == "call" or report.outcome != "passed":
        if report.skipped:
            if entry["status"] == "PASS":
                entry["status"] = "SKIP"
        elif report.failed:
            entry["status"] = "FAIL"
    detail = dict(report.user_properties).get("detail")
    if report.when == "call" and detail and detail not in entry["details"]:
        entry["details"].append(detail)


@pytest.fixture(autouse=True)
def _criterion_props(request, record_property):
    mark = request.node.get_closest_marker("criterion")
    if mark is not None:
        record_property("criterion", mark.args[0])
        record_property("title", mark.args[1])


@pytest.fixture
def detail(request):
    """Attach a measured value to the acceptance summary line."""

    def add(text: str):
        props = request.node.user_properties
        props[:] = [p for p in props if p[0] != "detail"]
        prev = getattr(request.node, "_detail", "")
        request.node._detail = f"{prev}; {text}" if prev else text
        props.append(("detail", request.node._detail))

    return add


def _key(cid: str):
    head = cid.rstrip("abcdefghijklmnopqrstuvwxyz")
    return (int(head) if head.isdigit() else 99, cid)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_RESULTS, key=_key):
        r = _RESULTS[cid]
        line = f"[{r['status']}] {cid}: {r['title']}"
        if r["details"]:
            line += " | " + " | ".join(r["details"])
        terminalreporter.write_line(line)
