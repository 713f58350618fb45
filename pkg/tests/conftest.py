import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_RESULTS: dict[str, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id, title): acceptance criterion checked by this test")


@pytest.fixture
def measured(request):
    """Dict whose entries are echoed next to the criterion's pass/fail line."""
    values: dict = {}
    request.node.user_properties.append(("measured", values))
    return values


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    cid, title = mark.args
    entry = _RESULTS.setdefault(cid, {"title": title, "ok": True, "ran": False, "measured": {}})
    if rep.when == "call":
        entry["ran"] = True
    if rep.failed:
        entry["ok"] = False
    for name, val in item.user_properties:
        if name == "measured":
            entry["measured"].update(val)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")

    def order(cid):
        return int(cid[1:])

    for cid in sorted(_RESULTS, key=order):
        e = _RESULTS[cid]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        detail = ", ".join(f"{k}={_fmt(v)}" for k, v in e["measured"].items())
        tr.write_line(f"{cid:>4} {status}  {e['title']}" + (f"  [{detail}]" if detail else ""))


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)
