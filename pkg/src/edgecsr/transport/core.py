"""Messages, channels, mailboxes and the in-process backend."""

import enum
import threading
import time
from collections import deque
from contextlib import contextmanager, nullcontext
from dataclasses import dataclass

from ..elements import EDGE, IDMAP, LABEL
from ..instrument import METER, Holding
from ..trace import current_stage

ANY = -1


class ChannelId(enum.IntEnum):
    CONTROL = 0
    LABEL_SCATTER = 1
    IDMAP_BCAST_DEST = 2
    IDMAP_BCAST_SRC = 3
    EDGE_SCATTER = 4


def channel_name(ch):
    try:
        return ChannelId(ch).name
    except ValueError:
        return str(ch)


CHANNEL_KIND = {
    ChannelId.LABEL_SCATTER: LABEL,
    ChannelId.IDMAP_BCAST_DEST: IDMAP,
    ChannelId.IDMAP_BCAST_SRC: IDMAP,
    ChannelId.EDGE_SCATTER: EDGE,
}


class TransportError(RuntimeError):
    pass


class EndOfChannel(TransportError):
    pass


class TransportAborted(TransportError):
    pass


class DeadlockError(TransportError):
    def __init__(self, diagnostic):
        super().__init__("deadlock detected\n" + diagnostic)
        self.diagnostic = diagnostic


@dataclass
class TransportConfig:
    backend: str = "inproc"
    rendezvous: bool = False
    serialize_comm: bool = False
    watchdog_timeout: float = 10.0
    buffered_reader: bool = True
    link_capacity: int = 4

    def __post_init__(self):
        if self.backend not in ("inproc", "tcp"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.rendezvous and self.backend != "inproc":
            raise ValueError("rendezvous is only available on the inproc backend")


class Message:
    """A block of ``blk_sz`` bytes holding ``count`` elements."""

    __slots__ = ("channel", "sender", "count", "nbytes", "buf", "_holding")

    def __init__(self, blk_sz, channel=0):
        self.channel = channel
        self.sender = None
        self.count = 0
        self.nbytes = 0
        self.buf = bytearray(blk_sz)
        self._holding = Holding(METER, blk_sz, "message")

    @property
    def payload(self):
        return memoryview(self.buf)[:self.nbytes]

    def fill(self, sender, channel, count, data):
        n = len(data)
        if n > len(self.buf):
            raise TransportError(f"payload of {n} bytes exceeds block size {len(self.buf)}")
        self.buf[:n] = data
        self.sender = sender
        self.channel = channel
        self.count = count
        self.nbytes = n
        return self

    def free(self):
        self._holding.release()


class Watchdog:
    """Declares deadlock when every registered thread has been blocked,
    with no transport progress, for ``timeout`` seconds."""

    def __init__(self, timeout, on_fire, interval=0.05):
        self.timeout = timeout
        self.on_fire = on_fire
        self.interval = interval
        self._lock = threading.Lock()
        self._participants = set()
        self._blocked = {}
        self._progress = 0
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, name="watchdog", daemon=True)
        self._thread.start()

    @contextmanager
    def participant(self):
        me = threading.current_thread()
        with self._lock:
            self._participants.add(me)
            self._progress += 1
        try:
            yield
        finally:
            with self._lock:
                self._participants.discard(me)
                self._blocked.pop(me, None)
                self._progress += 1

    @contextmanager
    def blocked(self, desc):
        me = threading.current_thread()
        with self._lock:
            self._blocked[me] = desc
        try:
            yield
        finally:
            with self._lock:
                self._blocked.pop(me, None)

    def progress(self):
        with self._lock:
            self._progress += 1

    def _loop(self):
        seen, since = None, time.monotonic()
        while not self._stop.wait(self.interval):
            with self._lock:
                parts = {t for t in self._participants if t.is_alive()}
                stuck = bool(parts) and all(t in self._blocked for t in parts)
                prog = self._progress
                waits = sorted(f"{t.name}: {self._blocked[t]}" for t in parts if t in self._blocked)
            now = time.monotonic()
            if not stuck or prog != seen:
                seen, since = prog, now
                continue
            if now - since >= self.timeout:
                self.on_fire(DeadlockError("wait-for:\n  " + "\n  ".join(waits)))
                return

    def stop(self):
        self._stop.set()


class Mailbox:
    """Per-(receiver, channel) queues, one FIFO per sender.

    ``capacity`` bounds each sender's queue (None = unbounded); under
    rendezvous a put returns only once its message has been taken.
    """

    def __init__(self, owner, channel, nb, capacity=None, rendezvous=False, watchdog=None):
        self.owner = owner
        self.channel = channel
        self.cond = threading.Condition()
        self.queues = [deque() for _ in range(nb)]
        self.closed = set()
        self.capacity = capacity
        self.rendezvous = rendezvous
        self.watchdog = watchdog
        self.failure = None
        self._seq = 0

    def _wait(self, desc):
        if self.failure is not None:
            raise self.failure
        if self.watchdog is None:
            self.cond.wait()
        else:
            with self.watchdog.blocked(desc):
                self.cond.wait()
        if self.failure is not None:
            raise self.failure

    def _has_room(self, sender):
        return self.capacity is None or len(self.queues[sender]) < max(self.capacity, 1)

    def put(self, sender, count, data, gate=nullcontext()):
        desc = f"send(receiver={self.owner}, ch={channel_name(self.channel)})"
        while True:
            with self.cond:
                while not self._has_room(sender):
                    self._wait(desc)
            with gate, self.cond:
                if self.failure is not None:
                    raise self.failure
                if not self._has_room(sender):
                    continue
                self._seq += 1
                entry = [self._seq, count, data, False]
                self.queues[sender].append(entry)
                self.cond.notify_all()
                break
        if self.rendezvous:
            with self.cond:
                while not entry[3]:
                    self._wait(desc)
        if self.watchdog is not None:
            self.watchdog.progress()

    def _candidate(self, sender):
        """Index of the sender whose head message should be taken, or None."""
        if sender == ANY:
            best = None
            for i, q in enumerate(self.queues):
                if q and (best is None or q[0][0] < self.queues[best][0][0]):
                    best = i
            return best
        return sender if self.queues[sender] else None

    def _ended(self, sender):
        if sender == ANY:
            return len(self.closed) == len(self.queues)
        return sender in self.closed

    def take(self, sender, gate=nullcontext()):
        """Returns ``(sender, count, data)``."""
        src = "ANY" if sender == ANY else sender
        desc = f"recv(sender={src}, ch={channel_name(self.channel)}) on box {self.owner}"
        while True:
            with self.cond:
                while self._candidate(sender) is None:
                    if self._ended(sender):
                        raise EndOfChannel(f"box {self.owner} channel {self.channel}: no sender left")
                    self._wait(desc)
            with gate, self.cond:
                if self.failure is not None:
                    raise self.failure
                src_rank = self._candidate(sender)
                if src_rank is None:
                    continue
                entry = self.queues[src_rank].popleft()
                entry[3] = True
                self.cond.notify_all()
                break
        if self.watchdog is not None:
            self.watchdog.progress()
        return src_rank, entry[1], entry[2]

    def push_scripted(self, sender, count, data):
        """Test hook: enqueue ignoring capacity and rendezvous."""
        with self.cond:
            self._seq += 1
            self.queues[sender].append([self._seq, count, data, False])
            self.cond.notify_all()

    def close_sender(self, sender):
        with self.cond:
            self.closed.add(sender)
            self.cond.notify_all()

    def fail(self, exc):
        with self.cond:
            if self.failure is None:
                self.failure = exc
            self.cond.notify_all()


class Endpoint:
    """One box's view of the transport."""

    def __init__(self, rank, nb, cfg, tracer=None):
        self.rank = rank
        self.nb = nb
        self.cfg = cfg
        self.tracer = tracer
        self._gate = threading.Lock() if cfg.serialize_comm else nullcontext()
        self._mailboxes = {}
        self._mb_lock = threading.Lock()

    def _mailbox(self, channel):
        raise NotImplementedError

    def _deliver(self, receiver, channel, count, data):
        raise NotImplementedError

    def _check_peer(self, r):
        if not 0 <= r < self.nb:
            raise TransportError(f"box {r} out of range [0, {self.nb})")

    def send(self, msg, receiver, channel):
        self._check_peer(receiver)
        self._deliver(receiver, int(channel), msg.count, bytes(msg.payload))
        if self.tracer is not None:
            self.tracer.event(self.rank, current_stage(), "send", channel, receiver, msg.count)

    def recv(self, sender, channel, into=None):
        if sender != ANY:
            self._check_peer(sender)
        src, count, data = self._mailbox(int(channel)).take(sender, self._gate)
        if into is None:
            into = Message(max(len(data), 1), channel)
        into.fill(src, channel, count, data)
        if self.tracer is not None:
            self.tracer.event(self.rank, current_stage(), "recv", channel, src, count)
        return into

    def close(self):
        pass

    def abort(self, reason):
        pass


class InprocNetwork:
    """All boxes in one process, connected by bounded in-memory links."""

    def __init__(self, nb, cfg=None, tracer=None):
        self.nb = nb
        self.cfg = cfg or TransportConfig()
        self.tracer = tracer
        self.failure = None
        self._lock = threading.Lock()
        self._mailboxes = []
        self.watchdog = Watchdog(self.cfg.watchdog_timeout, self.fail) if self.cfg.watchdog_timeout else None
        self.endpoints = [InprocEndpoint(self, r) for r in range(nb)]

    def endpoint(self, rank):
        return self.endpoints[rank]

    def mailbox(self, receiver, channel):
        ep = self.endpoints[receiver]
        with ep._mb_lock:
            mb = ep._mailboxes.get(channel)
            if mb is None:
                cap = 0 if self.cfg.rendezvous else self.cfg.link_capacity
                mb = Mailbox(receiver, channel, self.nb, cap, self.cfg.rendezvous, self.watchdog)
                if self.failure is not None:
                    mb.failure = self.failure
                ep._mailboxes[channel] = mb
                with self._lock:
                    self._mailboxes.append(mb)
        return mb

    def script_arrivals(self, receiver, channel, arrivals):
        """Deterministic-scheduling hook: ``arrivals`` is a list of
        ``(sender, count, payload_bytes)`` placed in exactly this order."""
        mb = self.mailbox(receiver, int(channel))
        for sender, count, data in arrivals:
            mb.push_scripted(sender, count, bytes(data))

    def fail(self, exc):
        with self._lock:
            if self.failure is None:
                self.failure = exc
            boxes = list(self._mailboxes)
        for mb in boxes:
            mb.fail(self.failure)

    def participant(self):
        return self.watchdog.participant() if self.watchdog else nullcontext()

    def blocked(self, desc):
        return self.watchdog.blocked(desc) if self.watchdog else nullcontext()

    def shutdown(self):
        if self.watchdog is not None:
            self.watchdog.stop()


class InprocEndpoint(Endpoint):
    def __init__(self, net, rank):
        super().__init__(rank, net.nb, net.cfg, net.tracer)
        self.net = net

    def _mailbox(self, channel):
        return self.net.mailbox(self.rank, channel)

    def _deliver(self, receiver, channel, count, data):
        self.net.mailbox(receiver, channel).put(self.rank, count, data, self._gate)

    def close(self, channels=None):
        """Mark this box as finished sending on ``channels`` (default all)."""
        for ch in channels or list(CHANNEL_KIND):
            for r in range(self.nb):
                self.net.mailbox(r, int(ch)).close_sender(self.rank)

    def abort(self, reason):
        self.net.fail(reason if isinstance(reason, TransportError) else TransportAborted(str(reason)))
