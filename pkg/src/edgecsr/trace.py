"""Send/receive event tracing and the interleaving report."""

import json
import threading
import time
from collections import defaultdict

_local = threading.local()


def set_stage(name):
    _local.stage = name


def current_stage():
    return getattr(_local, "stage", threading.current_thread().name)


def _channel_str(ch):
    from .transport.core import channel_name
    return channel_name(int(ch))


class Tracer:
    """Collects events in memory; ``dump`` writes them as JSONL."""

    def __init__(self):
        self._lock = threading.Lock()
        self.events = []
        self._last_send = {}

    def event(self, box, stage, ev, channel, peer, count):
        ch = _channel_str(channel)
        with self._lock:
            ts = time.monotonic_ns()
            if ev == "send":
                key = (box, ch, peer)
                prev = self._last_send.get(key)
                if prev is not None and ts <= prev:
                    ts = prev + 1
                self._last_send[key] = ts
            self.events.append({"ts": ts, "box": box, "stage": stage, "ev": ev,
                                "ch": ch, "peer": int(peer), "count": int(count)})

    def dump(self, path):
        with self._lock:
            events = sorted(self.events, key=lambda e: e["ts"])
        with open(path, "w") as f:
            for e in events:
                f.write(json.dumps(e) + "\n")


class TraceFormatError(ValueError):
    def __init__(self, lineno, msg):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


_FIELDS = {"ts": int, "box": int, "stage": str, "ev": str, "ch": str, "peer": int, "count": int}


def read_trace(path):
    events = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                e = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(lineno, f"not JSON ({exc.msg})") from None
            if not isinstance(e, dict):
                raise TraceFormatError(lineno, "not an object")
            for name, typ in _FIELDS.items():
                if not isinstance(e.get(name), typ) or isinstance(e.get(name), bool):
                    raise TraceFormatError(lineno, f"field {name!r} missing or not {typ.__name__}")
            if e["ev"] not in ("send", "recv"):
                raise TraceFormatError(lineno, f"bad event {e['ev']!r}")
            events.append(e)
    return events


def summarize(events):
    """Per-channel counts and time span, plus the interleaving verdict.

    The verdict is "interleaved" when some EDGE_SCATTER send happens before
    the last IDMAP_BCAST_SRC receive, "sequential" when none does, and "N/A"
    when either kind of event is absent.
    """
    per = defaultdict(lambda: {"send": 0, "recv": 0, "first": None, "last": None})
    for e in events:
        c = per[e["ch"]]
        c[e["ev"]] += 1
        c["first"] = e["ts"] if c["first"] is None else min(c["first"], e["ts"])
        c["last"] = e["ts"] if c["last"] is None else max(c["last"], e["ts"])
    verdict = "N/A"
    idmap_recvs = [e["ts"] for e in events if e["ch"] == "IDMAP_BCAST_SRC" and e["ev"] == "recv"]
    edge_sends = [e["ts"] for e in events if e["ch"] == "EDGE_SCATTER" and e["ev"] == "send"]
    if idmap_recvs and edge_sends:
        verdict = "interleaved" if min(edge_sends) < max(idmap_recvs) else "sequential"
    return {"channels": dict(per), "events": len(events), "verdict": verdict}


def interleaving_by_box(events):
    """Verdict computed separately on each box's own events."""
    boxes = sorted({e["box"] for e in events})
    return {b: summarize([e for e in events if e["box"] == b])["verdict"] for b in boxes}
