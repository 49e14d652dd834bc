"""The distributed CSR build: setup, id assignment, destination relabel,
source relabel, then scatter + CSR construction.

Each box runs the phases in order.  Inside a phase, stages run on their own
threads and talk only through transport channels, so for example the source
relabel join, the edge scatter and the remote CSR builders all stream at
once.
"""

import hashlib
import json
import logging
import os
import shutil
import threading
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .elements import EDGE, IDMAP, LABEL, LID_BITS, MAX_BOXES, by_des, by_label, by_src, \
    gid_box, gid_lid, identity_key
from .iterators import SortednessError, apply, enumerate_, sort_merge_join, sorted_merge, uniq
from .labelmap import get_label_map
from .stream_store import (PersistentStream, SpillDirectory, chunk_sort_spill,
                           em_stream_iter, store, tile)
from .trace import set_stage
from .transport import (ChannelId, InprocNetwork, TransportAborted, TransportConfig,
                        broadcast_stream, in_network_iter, make_reader, scatter_stream)

log = logging.getLogger(__name__)

KiB = 1024
MiB = 1024 * KiB


@dataclass
class BuildConfig:
    nb: int = 1
    nc: int = 1
    blk_sz: int = 64 * KiB
    mmc: int = 8 * MiB
    spill_dir: str = "spill"
    label_map: str = "mod"
    transport: TransportConfig = field(default_factory=TransportConfig)
    retain_spill: bool = False

    def __post_init__(self):
        if not 1 <= self.nb <= MAX_BOXES:
            raise ValueError(f"nb must be in [1, {MAX_BOXES}]")
        if self.nc < 1:
            raise ValueError("nc must be >= 1")
        if self.blk_sz <= 0 or self.blk_sz % 16:
            raise ValueError("blk_sz must be a positive multiple of 16")
        if self.mmc < self.blk_sz:
            raise ValueError("mmc must be >= blk_sz")
        get_label_map(self.label_map)

    def owner(self, labels):
        return get_label_map(self.label_map)(labels, self.nb)

    def echo(self):
        """Settings that shape the output; where and how it ran is left out
        so that every backend writes identical manifests."""
        return {"nb": self.nb, "nc": self.nc, "blk_sz": self.blk_sz, "mmc": self.mmc,
                "label_map": self.label_map}


class PhaseError(RuntimeError):
    pass


# Element transforms used by the phases.

def relabel_des(inner, outer):
    out = outer.copy()
    out["des"] = inner["gid"]
    return out


def relabel_src(inner, outer):
    out = outer.copy()
    out["src"] = inner["gid"]
    return out


def _idmap_maker(rank, owner):
    def to_idmap(pairs):
        labels = pairs["value"]
        wrong = owner(labels) != rank
        if np.any(wrong):
            raise PhaseError(f"box {rank} received label {int(labels[np.argmax(wrong)])} it does not own")
        out = np.empty(len(pairs), dtype=IDMAP.dtype)
        out["label"] = labels
        out["gid"] = (np.uint64(rank) << np.uint64(LID_BITS)) | pairs["index"]
        return out
    return to_idmap


# CSR construction.

class _ArraySink:
    def __init__(self):
        self.parts = []

    def write(self, arr):
        self.parts.append(np.asarray(arr, dtype=np.uint64))

    def array(self):
        return np.concatenate(self.parts) if self.parts else np.empty(0, dtype=np.uint64)


class _FileSink:
    def __init__(self, path):
        self.f = open(path, "wb")

    def write(self, arr):
        self.f.write(np.asarray(arr, dtype="<u8").tobytes())

    def close(self):
        self.f.close()


class CsrWriter:
    """Streaming CSR builder over edges sorted by source local id.

    Vertices with no out-edges get repeated offsets; when the input runs
    out, the remaining offsets up to ``n_local`` are filled with the edge
    count so that ``offv[n_local] == m_local``.
    """

    def __init__(self, n_local, offv_sink, adjv_sink, rank=None):
        self.n_local = n_local
        self.offv = offv_sink
        self.adjv = adjv_sink
        self.rank = rank
        self.csrc = 0
        self.m = 0
        self._last = None
        self.offv.write([0])

    def feed(self, blk):
        if not len(blk):
            return
        if self.rank is not None:
            boxes = gid_box(blk["src"])
            if np.any(boxes != self.rank):
                raise PhaseError(f"box {self.rank} got an edge owned by box {int(boxes[boxes != self.rank][0])}")
        lids = gid_lid(blk["src"])
        if (self._last is not None and lids[0] < self._last) or np.any(lids[1:] < lids[:-1]):
            raise SortednessError("build_csr input not sorted by source")
        if lids[-1] >= self.n_local:
            raise PhaseError(f"source local id {int(lids[-1])} >= n_local {self.n_local}")
        self._last = lids[-1]
        hi = int(lids[-1])
        if hi > self.csrc:
            v = np.arange(self.csrc + 1, hi + 1)
            self.offv.write(self.m + np.searchsorted(lids, v, side="left"))
            self.csrc = hi
        self.adjv.write(blk["des"])
        self.m += len(blk)

    def finish(self):
        rest = self.n_local - self.csrc
        if rest > 0:
            self.offv.write(np.full(rest, self.m, dtype=np.uint64))
        return self.m


def build_csr(sorted_edges, n_local):
    """In-memory CSR of an edge iterator sorted by source local id."""
    offv, adjv = _ArraySink(), _ArraySink()
    w = CsrWriter(n_local, offv, adjv)
    for blk in sorted_edges.blocks():
        w.feed(blk)
    sorted_edges.clean()
    w.finish()
    return offv.array(), adjv.array()


@dataclass
class CSRPartition:
    rank: int
    n_local: int
    m_local: int
    offv: np.ndarray
    adjv: np.ndarray
    idmap: np.ndarray
    paths: dict = field(default_factory=dict)


def partition_paths(out_dir, rank):
    base = Path(out_dir) / f"partition-{rank}"
    return {ext: f"{base}.{ext}" for ext in ("offv", "adjv", "idmap", "json")}


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_partition(out_dir, rank, mmap=True):
    paths = partition_paths(out_dir, rank)
    with open(paths["json"]) as f:
        meta = json.load(f)

    def arr(name, dtype):
        if os.path.getsize(paths[name]) == 0:
            return np.empty(0, dtype=dtype)
        if mmap:
            return np.memmap(paths[name], dtype=dtype, mode="r")
        return np.fromfile(paths[name], dtype=dtype)

    return CSRPartition(rank, meta["n_local"], meta["m_local"], arr("offv", "<u8"),
                        arr("adjv", "<u8"), arr("idmap", IDMAP.dtype), paths)


# Per-box execution context.

class ErrorSink:
    """First real failure across all boxes; abort noise is ignored."""

    def __init__(self):
        self._lock = threading.Lock()
        self.errors = []

    def add(self, exc):
        with self._lock:
            self.errors.append(exc)

    def root(self):
        with self._lock:
            for e in self.errors:
                if not isinstance(e, TransportAborted):
                    return e
            return self.errors[0] if self.errors else None


class BoxContext:
    def __init__(self, cfg, rank, endpoint, spill, participant=None, blocked=None, errors=None):
        self.cfg = cfg
        self.rank = rank
        self.ep = endpoint
        self.spill = spill
        self._participant = participant or nullcontext
        self._blocked = blocked or (lambda desc: nullcontext())
        self.errors = errors or ErrorSink()
        self.pending = []

    def spawn(self, stage, fn, *args):
        result = {}

        def body():
            set_stage(stage)
            with self._participant():
                try:
                    result["value"] = fn(*args)
                except BaseException as e:  # noqa: BLE001 - forwarded to the driver
                    log.debug("box %d stage %s failed: %r", self.rank, stage, e)
                    self.errors.add(e)
                    self.ep.abort(e)

        t = threading.Thread(target=body, name=f"b{self.rank}.{stage}", daemon=True)
        t.result = result
        t.start()
        return t

    def wait(self, *threads):
        with self._blocked(f"box {self.rank} joining {[t.name for t in threads]}"):
            for t in threads:
                t.join()
        err = self.errors.root()
        if err is not None:
            raise err
        return [t.result.get("value") for t in threads]

    def parallel_sort(self, streams_per_worker, key, phase):
        def work(w, streams):
            runs = []
            for s in streams:
                runs.extend(chunk_sort_spill(s, self.cfg.mmc, key, self.spill, phase, self.rank, w))
            return runs
        threads = [self.spawn(f"sort{w}", work, w, ss) for w, ss in enumerate(streams_per_worker)]
        return [r for runs in self.wait(*threads) for r in runs]

    def reader(self, channel):
        return make_reader(self.ep, channel, self.cfg.blk_sz, self.cfg.transport.buffered_reader)

    def merged_network(self, channel, reader, key):
        return sorted_merge([in_network_iter(channel, s, reader) for s in range(self.cfg.nb)], key)

    def merged_runs(self, runs, key, kind):
        return sorted_merge([em_stream_iter(r, self.cfg.blk_sz) for r in runs], key, kind)


# Phases.

def phase_setup(ctx, input_stream):
    """Tile the box's input into nc worker streams, each copied into the spill area."""
    out = []
    for w, part in enumerate(tile(input_stream, ctx.cfg.nc)):
        s = store(em_stream_iter(part, ctx.cfg.blk_sz), ctx.spill, "setup", ctx.rank, w)
        ctx.spill.record(f"setup-{w}", s)
        out.append(s)
    return out


def phase_assign_ids(ctx, streams):
    cfg = ctx.cfg
    label_streams = [[s.retype(LABEL)] for s in streams]
    runs = ctx.parallel_sort(label_streams, identity_key, "labels")

    def scatter_labels():
        merged = ctx.merged_runs(runs, identity_key, LABEL)
        return scatter_stream(merged, cfg.owner, ChannelId.LABEL_SCATTER, ctx.ep, cfg.blk_sz)

    def collect():
        reader = ctx.reader(ChannelId.LABEL_SCATTER)
        r1 = ctx.merged_network(ChannelId.LABEL_SCATTER, reader, identity_key)
        ids = apply(_idmap_maker(ctx.rank, cfg.owner), enumerate_(uniq(r1)), IDMAP)
        idmap = store(ids, ctx.spill, "idmap", ctx.rank)
        reader.close()
        return idmap

    t_scatter = ctx.spawn("label-scatter", scatter_labels)
    t_collect = ctx.spawn("idmap-builder", collect)
    _, idmap = ctx.wait(t_scatter, t_collect)
    ctx.spill.discard(runs)
    ctx.spill.record("idmap", idmap)
    return idmap


def phase_relabel_dest(ctx, streams, idmap):
    cfg = ctx.cfg

    def bcast():
        return broadcast_stream(em_stream_iter(idmap, cfg.blk_sz), ChannelId.IDMAP_BCAST_DEST,
                                ctx.ep, cfg.blk_sz)

    t_bcast = ctx.spawn("idmap-bcast-dest", bcast)
    runs = ctx.parallel_sort([[s] for s in streams], by_des, "des")

    def join():
        reader = ctx.reader(ChannelId.IDMAP_BCAST_DEST)
        inner = ctx.merged_network(ChannelId.IDMAP_BCAST_DEST, reader, by_label)
        outer = ctx.merged_runs(runs, by_des, EDGE)
        out = store(sort_merge_join(inner, outer, relabel_des, by_label, by_des, EDGE),
                    ctx.spill, "relabel-dest", ctx.rank)
        reader.close()
        return out

    t_join = ctx.spawn("relabel-dest", join)
    _, relabeled = ctx.wait(t_bcast, t_join)
    ctx.spill.discard(runs)
    ctx.spill.record("relabel-dest", relabeled)
    return relabeled


class SrcRelabelHandle:
    """The unscanned join of the source phase plus what it still owns."""

    def __init__(self, iterator, reader, runs, broadcaster):
        self.iterator = iterator
        self.reader = reader
        self.runs = runs
        self.broadcaster = broadcaster


def phase_relabel_src(ctx, dest_stream, idmap):
    cfg = ctx.cfg
    runs = ctx.parallel_sort([[s] for s in tile(dest_stream, cfg.nc)], by_src, "src")
    ctx.spill.discard([dest_stream])
    t_bcast = ctx.spawn("idmap-bcast-src", lambda: broadcast_stream(
        em_stream_iter(idmap, cfg.blk_sz), ChannelId.IDMAP_BCAST_SRC, ctx.ep, cfg.blk_sz))
    reader = ctx.reader(ChannelId.IDMAP_BCAST_SRC)
    inner = ctx.merged_network(ChannelId.IDMAP_BCAST_SRC, reader, by_label)
    outer = ctx.merged_runs(runs, by_src, EDGE)
    it = sort_merge_join(inner, outer, relabel_src, by_label, by_src, EDGE)
    return SrcRelabelHandle(it, reader, runs, t_bcast)


def phase_scatter_build(ctx, handle, n_local, out_dir):
    cfg = ctx.cfg
    paths = partition_paths(out_dir, ctx.rank)

    def build():
        reader = ctx.reader(ChannelId.EDGE_SCATTER)
        merged = ctx.merged_network(ChannelId.EDGE_SCATTER, reader, by_src)
        offv, adjv = _FileSink(paths["offv"]), _FileSink(paths["adjv"])
        try:
            w = CsrWriter(n_local, offv, adjv, rank=ctx.rank)
            for blk in merged.blocks():
                w.feed(blk)
            merged.clean()
            m = w.finish()
        finally:
            offv.close()
            adjv.close()
        reader.close()
        return m

    def scatter():
        counts = scatter_stream(handle.iterator, lambda b: gid_box(b["src"]),
                                ChannelId.EDGE_SCATTER, ctx.ep, cfg.blk_sz)
        handle.reader.close()
        return counts

    t_build = ctx.spawn("csr-builder", build)
    t_scatter = ctx.spawn("relabel-src-scatter", scatter)
    m_local, _, _ = ctx.wait(t_build, t_scatter, handle.broadcaster)
    ctx.spill.discard(handle.runs)
    return m_local


def run_box(cfg, rank, endpoint, input_stream, out_dir, participant=None, blocked=None, errors=None):
    """Execute every phase for one box and write its partition files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spill = SpillDirectory(Path(cfg.spill_dir) / f"box-{rank}", retain=cfg.retain_spill)
    ctx = BoxContext(cfg, rank, endpoint, spill, participant, blocked, errors)
    set_stage("main")
    try:
        streams = phase_setup(ctx, input_stream)
        idmap = phase_assign_ids(ctx, streams)
        n_local = idmap.count
        dest = phase_relabel_dest(ctx, streams, idmap)
        spill.discard(streams)
        handle = phase_relabel_src(ctx, dest, idmap)
        m_local = phase_scatter_build(ctx, handle, n_local, out_dir)
        paths = partition_paths(out_dir, rank)
        shutil.copyfile(idmap.path, paths["idmap"])
        spill.write_manifest()
    except BaseException as e:
        errors = ctx.errors
        errors.add(e)
        endpoint.abort(e)
        raise errors.root() from None
    finally:
        spill.cleanup()
    meta = {
        "rank": rank, "nb": cfg.nb, "n_local": n_local, "m_local": m_local,
        "config": cfg.echo(),
        "sha256": {k: _sha256(paths[k]) for k in ("offv", "adjv", "idmap")},
    }
    with open(paths["json"], "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
    return load_partition(out_dir, rank)


def box_inputs(input_stream, nb):
    """Deal the input edge list to boxes as contiguous balanced tiles."""
    return tile(input_stream, nb)


def run_inproc(cfg, input_stream, out_dir, tracer=None):
    """All boxes as thread groups of this process.  Returns partitions by rank."""
    if isinstance(input_stream, (str, os.PathLike)):
        input_stream = PersistentStream.whole_file(input_stream, EDGE)
    net = InprocNetwork(cfg.nb, cfg.transport, tracer)
    errors = ErrorSink()
    parts = [None] * cfg.nb

    def box(r, s):
        set_stage("main")
        with net.participant():
            try:
                parts[r] = run_box(cfg, r, net.endpoint(r), s, out_dir,
                                   net.participant, net.blocked, errors)
            except BaseException as e:  # noqa: BLE001
                errors.add(e)
                net.endpoint(r).abort(e)

    threads = [threading.Thread(target=box, args=(r, s), name=f"b{r}.main", daemon=True)
               for r, s in enumerate(box_inputs(input_stream, cfg.nb))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    net.shutdown()
    err = errors.root()
    if err is not None:
        raise err
    return parts


def run_tcp(cfg, rank, peers, input_stream, out_dir, tracer=None):
    """This process is box ``rank`` of a TCP mesh."""
    from .transport import TcpEndpoint

    if isinstance(input_stream, (str, os.PathLike)):
        input_stream = PersistentStream.whole_file(input_stream, EDGE)
    ep = TcpEndpoint(rank, peers, cfg.transport, tracer)
    try:
        part = run_box(cfg, rank, ep, box_inputs(input_stream, cfg.nb)[rank], out_dir)
    finally:
        ep.shutdown()
    return part
