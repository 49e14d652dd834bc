"""Pull-based iterator algebra over typed element streams.

Every iterator exposes the classic element-at-a-time contract (``eos``,
``get``, ``next``, ``xget``, ``clean``) and, underneath, a block protocol:
``read_block`` hands out the remaining elements of the current block as a
numpy array.  Operators are written against the block protocol so a scan
costs a handful of numpy calls per block instead of a python call per
element; the element protocol is a thin cursor over the same blocks.

Construction never touches an input.  All work happens while scanning.
"""

import numpy as np

from .elements import LABEL, pair_kind


class SortednessError(RuntimeError):
    pass


class JoinKeyMiss(LookupError):
    def __init__(self, key):
        super().__init__(f"join key {key} missing from inner stream")
        self.key = key


class ElementIterator:
    """Base class.  Subclasses implement ``_pull`` returning the next block
    (a non-empty numpy array of ``kind.dtype``) or ``None`` when exhausted."""

    def __init__(self, kind):
        self.kind = kind
        self._blk = None
        self._pos = 0
        self._done = False
        self._cleaned = False

    def _pull(self):
        raise NotImplementedError

    def _release(self):
        """Free resources held by this iterator (override)."""

    def _fill(self):
        while not self._done and (self._blk is None or self._pos >= len(self._blk)):
            blk = self._pull()
            if blk is None or self._cleaned:
                self._done = True
                self._blk = None
            elif len(blk):
                self._blk = blk
                self._pos = 0

    # element protocol
    def eos(self):
        self._fill()
        return self._done

    def get(self):
        self._fill()
        if self._done:
            raise IndexError("get() past end of stream")
        return self.kind.to_py(self._blk[self._pos])

    def next(self):
        self._fill()
        if not self._done:
            self._pos += 1
        return self

    def xget(self):
        return self, self.get()

    def clean(self):
        if self._cleaned:
            return
        self._cleaned = True
        self._done = True
        self._blk = None
        self._release()

    # block protocol
    def read_block(self):
        """Consume and return the rest of the current block, or None at eos."""
        self._fill()
        if self._done:
            return None
        blk = self._blk[self._pos:] if self._pos else self._blk
        self._blk = None
        self._pos = 0
        return blk

    def blocks(self):
        while True:
            blk = self.read_block()
            if blk is None:
                return
            yield blk

    def __iter__(self):
        while not self.eos():
            yield self.get()
            self.next()

    def to_array(self):
        parts = list(self.blocks())
        if not parts:
            return self.kind.empty()
        return np.concatenate(parts)


def scan(it):
    """Consume ``it`` completely, returning the element count."""
    n = 0
    for blk in it.blocks():
        n += len(blk)
    it.clean()
    return n


class ArrayIterator(ElementIterator):
    """In-memory source, served in blocks of ``block_len`` elements."""

    def __init__(self, values, kind=LABEL, block_len=4096):
        super().__init__(kind)
        self._data = kind.array(values)
        self._block_len = max(1, block_len)
        self._off = 0
        self.pulls = 0

    def _pull(self):
        if self._off >= len(self._data):
            return None
        self.pulls += 1
        blk = self._data[self._off:self._off + self._block_len]
        self._off += len(blk)
        return blk


class RandomAccessIterator(ArrayIterator):
    def size(self):
        return len(self._data)

    def get_at(self, i):
        return self.kind.to_py(self._data[i])

    @property
    def array(self):
        return self._data

    def _release(self):
        self._data = self.kind.empty()


class GeneratorIterator(ElementIterator):
    """Adapts a python generator of numpy blocks."""

    def __init__(self, kind, gen):
        super().__init__(kind)
        self._gen = gen

    def _pull(self):
        return next(self._gen, None)

    def _release(self):
        self._gen.close()


def _check_sorted(keys, last, what):
    if len(keys) == 0:
        return last
    if last is not None and keys[0] < last:
        raise SortednessError(f"{what}: {keys[0]} follows {last}")
    if len(keys) > 1:
        bad = np.flatnonzero(keys[1:] < keys[:-1])
        if len(bad):
            i = bad[0]
            raise SortednessError(f"{what}: {keys[i + 1]} follows {keys[i]}")
    return keys[-1]


class SortedMerge(ElementIterator):
    """k-way merge of nondecreasing inputs; equal keys come out in input order.

    Each round emits every buffered element strictly below the frontier (the
    smallest last-buffered key among inputs that may still produce), plus the
    frontier-equal elements of inputs up to and including the lowest-index
    input sitting on the frontier.  That input is then drained and refilled,
    so each input holds at most about one block at a time.
    """

    def __init__(self, inputs, key, kind=None):
        inputs = list(inputs)
        if kind is None:
            if not inputs:
                raise ValueError("kind required for an empty merge")
            kind = inputs[0].kind
        super().__init__(kind)
        self.inputs = inputs
        self.key = key
        self._bufs = None
        self._keys = None
        self._live = None
        self._last = None

    def _start(self):
        k = len(self.inputs)
        self._bufs = [None] * k
        self._keys = [None] * k
        self._live = [True] * k
        self._last = [None] * k
        for i in range(k):
            self._refill(i)

    def _refill(self, i):
        blk = self.inputs[i].read_block()
        if blk is None:
            self._live[i] = False
            return
        keys = self.key(blk)
        self._last[i] = _check_sorted(keys, self._last[i], f"merge input {i}")
        if self._bufs[i] is None or len(self._bufs[i]) == 0:
            self._bufs[i], self._keys[i] = blk, keys
        else:
            self._bufs[i] = np.concatenate([self._bufs[i], blk])
            self._keys[i] = np.concatenate([self._keys[i], keys])

    def _pull(self):
        if self._bufs is None:
            self._start()
        k = len(self.inputs)
        if k == 1:
            if self._bufs[0] is not None and len(self._bufs[0]):
                blk, self._bufs[0] = self._bufs[0], None
                return blk
            self._refill(0)
            blk, self._bufs[0] = self._bufs[0], None
            return blk if blk is not None and len(blk) else None
        while True:
            for i in range(k):
                if self._live[i] and (self._bufs[i] is None or len(self._bufs[i]) == 0):
                    self._refill(i)
            frontier, j = None, None
            for i in range(k):
                if self._live[i]:
                    last = self._keys[i][-1]
                    if frontier is None or last < frontier:
                        frontier, j = last, i
            parts, pkeys = [], []
            for i in range(k):
                buf = self._bufs[i]
                if buf is None or len(buf) == 0:
                    continue
                if frontier is None:
                    n = len(buf)
                else:
                    side = "right" if i <= j else "left"
                    n = int(np.searchsorted(self._keys[i], frontier, side=side))
                if n:
                    parts.append(buf[:n])
                    pkeys.append(self._keys[i][:n])
                    self._bufs[i] = buf[n:]
                    self._keys[i] = self._keys[i][n:]
            if parts:
                if len(parts) == 1:
                    return parts[0]
                out = np.concatenate(parts)
                order = np.argsort(np.concatenate(pkeys), kind="stable")
                return out[order]
            if frontier is None:
                return None

    def clean(self):
        if self._cleaned:
            return
        self._cleaned = True
        self._done = True
        self._blk = None
        self._bufs = None
        for it in self.inputs:
            it.clean()


MAX_FAN_IN = 32


def sorted_merge(inputs, key, kind=None):
    """Merge with fan-in capped at ``MAX_FAN_IN`` by nesting merges over
    contiguous groups, which keeps ties in global input order."""
    inputs = list(inputs)
    if kind is None and inputs:
        kind = inputs[0].kind
    while len(inputs) > MAX_FAN_IN:
        inputs = [SortedMerge(inputs[i:i + MAX_FAN_IN], key, kind)
                  for i in range(0, len(inputs), MAX_FAN_IN)]
    return SortedMerge(inputs, key, kind)


class _Unary(ElementIterator):
    def __init__(self, source, kind):
        super().__init__(kind)
        self.source = source

    def clean(self):
        if not self._cleaned:
            self._cleaned = True
            self._done = True
            self._blk = None
            self.source.clean()


class Uniq(_Unary):
    def __init__(self, source):
        super().__init__(source, source.kind)
        self._prev = None

    def _pull(self):
        while True:
            blk = self.source.read_block()
            if blk is None:
                return None
            keep = np.empty(len(blk), dtype=bool)
            keep[0] = self._prev is None or blk[0] != self._prev
            keep[1:] = blk[1:] != blk[:-1]
            if blk.dtype.names is None:
                _check_sorted(blk, self._prev, "uniq input")
            self._prev = blk[-1]
            out = blk[keep]
            if len(out):
                return out


def uniq(source):
    return Uniq(source)


class Enumerate(_Unary):
    def __init__(self, source, start=0):
        super().__init__(source, pair_kind(source.kind))
        self._next_index = start

    def _pull(self):
        blk = self.source.read_block()
        if blk is None:
            return None
        out = np.empty(len(blk), dtype=self.kind.dtype)
        out["index"] = np.arange(self._next_index, self._next_index + len(blk), dtype=np.uint64)
        out["value"] = blk
        self._next_index += len(blk)
        return out


def enumerate_(source):
    return Enumerate(source)


class Filter(_Unary):
    """``pred`` maps a block to a boolean mask."""

    def __init__(self, pred, source):
        super().__init__(source, source.kind)
        self.pred = pred

    def _pull(self):
        while True:
            blk = self.source.read_block()
            if blk is None:
                return None
            out = blk[np.asarray(self.pred(blk), dtype=bool)]
            if len(out):
                return out


def filter_(pred, source):
    return Filter(pred, source)


class Apply(_Unary):
    """Blockwise map: ``fn`` turns an input block into an output block."""

    def __init__(self, fn, source, kind):
        super().__init__(source, kind)
        self.fn = fn

    def _pull(self):
        blk = self.source.read_block()
        if blk is None:
            return None
        return self.fn(blk)


def apply(fn, source, kind):
    return Apply(fn, source, kind)


class SortMergeJoin(ElementIterator):
    """Join a unique-keyed sorted inner stream with a sorted outer stream.

    One output per outer element, ``join_fn(inner_block, outer_block)``
    applied blockwise to aligned pairs, in outer order.  The inner buffer
    never spans more than the inner blocks needed to cover the current
    outer block.
    """

    def __init__(self, inner, outer, join_fn, inner_key, outer_key, kind):
        super().__init__(kind)
        self.inner = inner
        self.outer = outer
        self.join_fn = join_fn
        self.inner_key = inner_key
        self.outer_key = outer_key
        self._ibuf = None
        self._ikeys = None
        self._ilast = None
        self._olast = None
        self._inner_done = False

    def _inner_more(self):
        if self._inner_done:
            return False
        blk = self.inner.read_block()
        if blk is None:
            self._inner_done = True
            return False
        keys = self.inner_key(blk)
        if self._ilast is not None and len(keys) and keys[0] <= self._ilast:
            raise SortednessError(f"inner key {keys[0]} not above {self._ilast}")
        if len(keys) > 1 and np.any(keys[1:] <= keys[:-1]):
            raise SortednessError("inner keys not strictly increasing")
        self._ilast = keys[-1]
        if self._ibuf is None or len(self._ibuf) == 0:
            self._ibuf, self._ikeys = blk, keys
        else:
            self._ibuf = np.concatenate([self._ibuf, blk])
            self._ikeys = np.concatenate([self._ikeys, keys])
        return True

    def _pull(self):
        blk = self.outer.read_block()
        if blk is None:
            return None
        okeys = self.outer_key(blk)
        self._olast = _check_sorted(okeys, self._olast, "join outer")
        out = []
        start = 0
        while start < len(blk):
            if self._ibuf is not None and len(self._ibuf):
                # drop inner entries below the next outer key
                cut = int(np.searchsorted(self._ikeys, okeys[start], side="left"))
                if cut:
                    self._ibuf = self._ibuf[cut:]
                    self._ikeys = self._ikeys[cut:]
            if self._ibuf is None or len(self._ibuf) == 0:
                if not self._inner_more():
                    raise JoinKeyMiss(int(okeys[start]))
                continue
            if self._ikeys[0] > okeys[start]:
                raise JoinKeyMiss(int(okeys[start]))
            stop = start + int(np.searchsorted(okeys[start:], self._ikeys[-1], side="right"))
            seg = okeys[start:stop]
            idx = np.searchsorted(self._ikeys, seg)
            miss = self._ikeys[idx] != seg
            if np.any(miss):
                raise JoinKeyMiss(int(seg[np.argmax(miss)]))
            out.append(self.join_fn(self._ibuf[idx], blk[start:stop]))
            start = stop
            if start < len(blk):
                # the whole inner buffer is below the remaining outer keys
                self._ibuf = None
                self._ikeys = None
        return out[0] if len(out) == 1 else np.concatenate(out)

    def clean(self):
        if self._cleaned:
            return
        self._cleaned = True
        self._done = True
        self._blk = None
        self._ibuf = None
        self.inner.clean()
        self.outer.clean()


def sort_merge_join(inner, outer, join_fn, inner_key, outer_key, kind):
    return SortMergeJoin(inner, outer, join_fn, inner_key, outer_key, kind)
