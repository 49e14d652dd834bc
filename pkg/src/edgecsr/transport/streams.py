"""Readers, in-network stream iterators, broadcast_stream and scatter_stream.

A stream session from one sender to one receiver on one channel is a run of
full messages closed by a single short one (fewer than ``blk_sz / S``
elements, possibly zero).
"""

from collections import deque

import numpy as np

from ..iterators import ElementIterator
from .core import ANY, CHANNEL_KIND, EndOfChannel, Message, TransportError


class ProtocolError(TransportError):
    pass


class BufferedReader:
    """Reads on behalf of every in-network stream of one channel on a box.

    A request for sender ``s`` is served from s's queue if possible;
    otherwise messages are received from ANY sender until one from ``s``
    arrives, and the others are queued under their own sender.
    """

    def __init__(self, endpoint, channel, blk_sz):
        self.endpoint = endpoint
        self.channel = channel
        self.blk_sz = blk_sz
        nb = endpoint.nb
        self.msg_queues = [deque() for _ in range(nb)]
        self.pool = []
        self.allocated = [None] * nb
        self.network_reads = 0

    def read(self, sender):
        old = self.allocated[sender]
        if old is not None:
            self.pool.append(old)
            self.allocated[sender] = None
        if self.msg_queues[sender]:
            msg = self.msg_queues[sender].popleft()
            self.allocated[sender] = msg
            return msg
        while True:
            msg = self.pool.pop() if self.pool else Message(self.blk_sz, self.channel)
            try:
                self.endpoint.recv(ANY, self.channel, into=msg)
            except EndOfChannel:
                self.pool.append(msg)
                raise ProtocolError(f"channel {self.channel} ended while sender {sender}'s stream was open")
            self.network_reads += 1
            if msg.sender == sender:
                self.allocated[sender] = msg
                return msg
            self.msg_queues[msg.sender].append(msg)

    def close(self):
        for q in self.msg_queues:
            for m in q:
                m.free()
            q.clear()
        for m in self.pool:
            m.free()
        self.pool = []
        for i, m in enumerate(self.allocated):
            if m is not None:
                m.free()
                self.allocated[i] = None


class PlainReader:
    """Naive reader: blocks on a receive from exactly the requested sender."""

    def __init__(self, endpoint, channel, blk_sz):
        self.endpoint = endpoint
        self.channel = channel
        self.blk_sz = blk_sz
        self._bufs = {}

    def read(self, sender):
        msg = self._bufs.get(sender)
        if msg is None:
            msg = self._bufs[sender] = Message(self.blk_sz, self.channel)
        try:
            return self.endpoint.recv(sender, self.channel, into=msg)
        except EndOfChannel:
            raise ProtocolError(f"sender {sender} closed channel {self.channel} mid-stream")

    def close(self):
        for m in self._bufs.values():
            m.free()
        self._bufs.clear()


def make_reader(endpoint, channel, blk_sz, buffered=True):
    cls = BufferedReader if buffered else PlainReader
    return cls(endpoint, channel, blk_sz)


class InNetworkIter(ElementIterator):
    def __init__(self, channel, sender, reader, kind=None):
        super().__init__(kind or CHANNEL_KIND[channel])
        self.channel = channel
        self.sender = sender
        self.reader = reader
        self.capacity = reader.blk_sz // self.kind.size
        self.messages = 0
        self.last_count = None
        self._finished = False

    def _pull(self):
        while not self._finished:
            msg = self.reader.read(self.sender)
            self.messages += 1
            count = msg.count
            if count > self.capacity or msg.nbytes != count * self.kind.size:
                raise ProtocolError(f"malformed message from {self.sender}: count {count}, {msg.nbytes} bytes")
            self.last_count = count
            if count < self.capacity:
                self._finished = True
            if count:
                return np.frombuffer(msg.buf, dtype=self.kind.dtype, count=count).copy()
        return None

    def clean(self):
        if self._cleaned:
            return
        while not self._finished:
            self._pull()
        super().clean()


def in_network_iter(channel, sender, reader, kind=None):
    return InNetworkIter(channel, sender, reader, kind)


class _Outbox:
    """A message being filled, viewed as an element array."""

    def __init__(self, blk_sz, channel, kind):
        self.msg = Message(blk_sz, channel)
        self.kind = kind
        self.cap = blk_sz // kind.size
        self.view = np.frombuffer(self.msg.buf, dtype=kind.dtype, count=self.cap)
        self.fill = 0

    def add(self, elems):
        """Copy as many of ``elems`` as fit; returns how many were taken."""
        n = min(self.cap - self.fill, len(elems))
        self.view[self.fill:self.fill + n] = elems[:n]
        self.fill += n
        return n

    def full(self):
        return self.fill == self.cap

    def seal(self):
        self.msg.count = self.fill
        self.msg.nbytes = self.fill * self.kind.size
        return self.msg

    def reset(self):
        self.fill = 0


def _check_blk(blk_sz, kind):
    if blk_sz <= 0 or blk_sz % kind.size:
        raise ValueError(f"blk_sz {blk_sz} not a positive multiple of {kind.size}")


def broadcast_stream(it, channel, endpoint, blk_sz):
    """Send the full scan of ``it`` to every box (self included)."""
    _check_blk(blk_sz, it.kind)
    out = _Outbox(blk_sz, channel, it.kind)
    nb = endpoint.nb
    sent = 0
    try:
        for blk in it.blocks():
            while len(blk):
                k = out.add(blk)
                blk = blk[k:]
                if out.full():
                    msg = out.seal()
                    for r in range(nb):
                        endpoint.send(msg, r, channel)
                    sent += out.fill
                    out.reset()
        msg = out.seal()
        for r in range(nb):
            endpoint.send(msg, r, channel)
        sent += out.fill
    finally:
        out.msg.free()
        it.clean()
    return sent


def scatter_stream(it, map_fn, channel, endpoint, blk_sz):
    """Route each element to box ``map_fn(element)``; order is preserved per
    destination.  ``map_fn`` works on whole blocks.  Returns per-box counts."""
    _check_blk(blk_sz, it.kind)
    nb = endpoint.nb
    outs = [_Outbox(blk_sz, channel, it.kind) for _ in range(nb)]
    counts = [0] * nb
    try:
        for blk in it.blocks():
            dest = np.asarray(map_fn(blk), dtype=np.int64)
            if len(dest) != len(blk):
                raise ValueError("map_fn must return one box per element")
            bad = (dest < 0) | (dest >= nb)
            if np.any(bad):
                raise ValueError(f"map_fn sent an element to box {int(dest[np.argmax(bad)])}, outside [0, {nb})")
            order = np.argsort(dest, kind="stable")
            grouped = blk[order]
            bounds = np.searchsorted(dest[order], np.arange(nb + 1))
            for o in range(nb):
                seg = grouped[bounds[o]:bounds[o + 1]]
                counts[o] += len(seg)
                box = outs[o]
                while len(seg):
                    k = box.add(seg)
                    seg = seg[k:]
                    if box.full():
                        endpoint.send(box.seal(), o, channel)
                        box.reset()
        for o in range(nb):
            endpoint.send(outs[o].seal(), o, channel)
    finally:
        for box in outs:
            box.msg.free()
        it.clean()
    return counts
