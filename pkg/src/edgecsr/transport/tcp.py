"""TCP backend: one long-lived connection per ordered pair of boxes.

Frame = 24-byte little-endian header (channel u32, sender u32, count u64,
payload length u64) followed by the payload.  A connection opens with a
hello frame on the control channel whose sender field names the dialing box.
Channel 0 also carries abort notices (payload = utf-8 reason).
"""

import logging
import socket
import struct
import threading
import time

from .core import (CHANNEL_KIND, Endpoint, Mailbox, TransportAborted, TransportConfig,
                   TransportError)

log = logging.getLogger(__name__)

HEADER = struct.Struct("<IIQQ")
HELLO = b"edgecsr-hello"
CONTROL = 0


def encode_frame(channel, sender, count, payload=b""):
    return HEADER.pack(channel, sender, count, len(payload)) + bytes(payload)


def _recv_exact(sock, n):
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:])
        if k == 0:
            if got == 0:
                return None
            raise TransportError("connection closed mid-frame")
        got += k
    return bytes(buf)


def read_frame(sock):
    """Returns ``(channel, sender, count, payload)`` or None on clean EOF."""
    head = _recv_exact(sock, HEADER.size)
    if head is None:
        return None
    channel, sender, count, length = HEADER.unpack(head)
    payload = _recv_exact(sock, length) if length else b""
    if length and payload is None:
        raise TransportError("connection closed mid-frame")
    return channel, sender, count, payload


def parse_peers(spec):
    peers = []
    for item in spec.split(","):
        host, _, port = item.strip().rpartition(":")
        peers.append((host or "127.0.0.1", int(port)))
    return peers


class TcpEndpoint(Endpoint):
    """Box ``rank`` of a TCP mesh described by ``peers`` (one address per rank)."""

    def __init__(self, rank, peers, cfg=None, tracer=None, connect_timeout=30.0):
        cfg = cfg or TransportConfig(backend="tcp")
        super().__init__(rank, len(peers), cfg, tracer)
        self.peers = peers
        self.failure = None
        self._out = {}
        self._out_locks = {r: threading.Lock() for r in range(self.nb)}
        self._readers = []
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind(peers[rank])
        self._listener.listen(self.nb)
        self._accepted = threading.Event()
        acceptor = threading.Thread(target=self._accept_all, name=f"tcp{rank}-accept", daemon=True)
        acceptor.start()
        self._dial_all(connect_timeout)
        if not self._accepted.wait(connect_timeout):
            raise TransportError(f"box {rank}: peers did not connect within {connect_timeout}s")

    # connection setup
    def _accept_all(self):
        for _ in range(self.nb - 1):
            conn, _ = self._listener.accept()
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            frame = read_frame(conn)
            if frame is None or frame[0] != CONTROL or frame[3] != HELLO:
                conn.close()
                raise TransportError("bad hello")
            peer = frame[1]
            t = threading.Thread(target=self._pump, args=(conn, peer),
                                 name=f"tcp{self.rank}-from{peer}", daemon=True)
            self._readers.append((t, conn))
            t.start()
        self._accepted.set()

    def _dial_all(self, timeout):
        deadline = time.monotonic() + timeout
        for r, addr in enumerate(self.peers):
            if r == self.rank:
                continue
            while True:
                try:
                    sock = socket.create_connection(addr, timeout=5)
                    break
                except OSError:
                    if time.monotonic() > deadline:
                        raise TransportError(f"cannot reach box {r} at {addr}")
                    time.sleep(0.05)
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sock.sendall(encode_frame(CONTROL, self.rank, 0, HELLO))
            self._out[r] = sock

    def _pump(self, conn, peer):
        try:
            while True:
                frame = read_frame(conn)
                if frame is None:
                    break
                channel, sender, count, payload = frame
                if channel == CONTROL:
                    self._fail_local(TransportAborted(f"box {sender} aborted: {payload.decode(errors='replace')}"))
                    continue
                self._mailbox(channel).put(sender, count, payload)
        except (OSError, TransportError) as e:
            if self.failure is None:
                self._fail_local(TransportError(f"link from box {peer} failed: {e}"))
                return
        for ch in list(CHANNEL_KIND):
            self._mailbox(int(ch)).close_sender(peer)

    # Endpoint hooks
    def _mailbox(self, channel):
        with self._mb_lock:
            mb = self._mailboxes.get(channel)
            if mb is None:
                mb = self._mailboxes[channel] = Mailbox(self.rank, channel, self.nb)
                if self.failure is not None:
                    mb.failure = self.failure
        return mb

    def _deliver(self, receiver, channel, count, data):
        if self.failure is not None:
            raise self.failure
        if receiver == self.rank:
            with self._gate:
                self._mailbox(channel).put(self.rank, count, data)
            return
        frame = encode_frame(channel, self.rank, count, data)
        with self._gate, self._out_locks[receiver]:
            try:
                self._out[receiver].sendall(frame)
            except OSError as e:
                raise TransportError(f"box {receiver} disconnected: {e}") from e

    def _fail_local(self, exc):
        if self.failure is None:
            self.failure = exc
        with self._mb_lock:
            boxes = list(self._mailboxes.values())
        for mb in boxes:
            mb.fail(exc)

    def abort(self, reason):
        note = str(reason).encode()[:4096]
        for r, sock in self._out.items():
            try:
                with self._out_locks[r]:
                    sock.sendall(encode_frame(CONTROL, self.rank, 0, note))
            except OSError:
                pass
        self._fail_local(reason if isinstance(reason, TransportError) else TransportAborted(str(reason)))

    def close(self):
        for ch in list(CHANNEL_KIND):
            self._mailbox(int(ch)).close_sender(self.rank)
        for sock in self._out.values():
            try:
                sock.shutdown(socket.SHUT_WR)
            except OSError:
                pass

    def shutdown(self, timeout=10.0):
        """Close outgoing links and wait for peers to close theirs."""
        self.close()
        for t, _ in self._readers:
            t.join(timeout)
        for sock in self._out.values():
            sock.close()
        for _, conn in self._readers:
            conn.close()
        self._listener.close()
