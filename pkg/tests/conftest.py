import socket
from collections import OrderedDict

import numpy as np
import pytest

from edgecsr.elements import EDGE

# criterion number -> {"title": str, "outcomes": [bool], "details": [str]}
_CRITERIA = OrderedDict()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, title): acceptance criterion covered by a test")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when != "call":
        return
    num, title = mark.args
    entry = _CRITERIA.setdefault(num, {"title": title, "outcomes": [], "details": []})
    entry["outcomes"].append(call.excinfo is None)
    detail = item.stash.get(_detail_key, None)
    if detail:
        entry["details"].append(detail)


_detail_key = pytest.StashKey[str]()


@pytest.fixture
def acceptance_detail(request):
    """Attach a one-line measurement to the acceptance summary."""
    def note(text):
        prev = request.node.stash.get(_detail_key, "")
        request.node.stash[_detail_key] = f"{prev}; {text}" if prev else text
    return note


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        e = _CRITERIA[num]
        ok = all(e["outcomes"]) and e["outcomes"]
        detail = " | ".join(e["details"])
        line = f"criterion {num} ({e['title']}): {'PASS' if ok else 'FAIL'}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)


def free_ports(n):
    socks = []
    for _ in range(n):
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        socks.append(s)
    ports = [s.getsockname()[1] for s in socks]
    for s in socks:
        s.close()
    return ports


def edges_of(pairs):
    return np.array([tuple(p) for p in pairs], dtype=EDGE.dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
