"""In-memory reference construction of the distributed CSR.

Everything here is plain numpy sorting over the whole edge list; nothing is
shared with the streaming build.  The input is assumed to be dealt to boxes
in contiguous tiles (box ``k`` gets edges ``[k*m//nb ...)`` with the
remainder spread over the first boxes), and within one vertex's adjacency
bucket edges are ordered by (sending box, original destination label,
position in the input).  That is the order the streaming build produces.
"""

from dataclasses import dataclass, field

import numpy as np

from .labelmap import get_label_map

_LID_BITS = 48


@dataclass
class OracleBox:
    rank: int
    idmap: np.ndarray      # structured (label, gid), ascending labels
    offv: np.ndarray
    adjv: np.ndarray

    @property
    def n_local(self):
        return len(self.offv) - 1


@dataclass
class OracleResult:
    nb: int
    boxes: list = field(default_factory=list)


def tile_owner(m, nb):
    """Index of the box whose input tile holds each of ``m`` edges."""
    q, r = divmod(m, nb)
    sizes = np.array([q + (1 if k < r else 0) for k in range(nb)], dtype=np.int64)
    return np.repeat(np.arange(nb, dtype=np.int64), sizes)


def oracle_build(edges, nb, label_map="mod"):
    edges = np.asarray(edges)
    if edges.dtype.names:
        src = edges["src"].astype(np.uint64)
        des = edges["des"].astype(np.uint64)
    else:
        edges = edges.reshape(-1, 2).astype(np.uint64)
        src, des = edges[:, 0], edges[:, 1]
    fmap = get_label_map(label_map) if isinstance(label_map, str) else label_map
    m = len(src)

    labels = np.unique(np.concatenate([src, des]))
    owner = fmap(labels, nb)
    lid = np.zeros(len(labels), dtype=np.int64)
    for b in range(nb):
        mine = owner == b
        lid[mine] = np.arange(int(mine.sum()))
    gid = (owner.astype(np.uint64) << np.uint64(_LID_BITS)) | lid.astype(np.uint64)

    si = np.searchsorted(labels, src)
    di = np.searchsorted(labels, des)
    e_owner = owner[si]
    e_lid = lid[si]
    sender = tile_owner(m, nb)
    pos = np.arange(m)

    res = OracleResult(nb)
    for b in range(nb):
        mine = owner == b
        idmap = np.empty(int(mine.sum()), dtype=[("label", "<u8"), ("gid", "<u8")])
        idmap["label"] = labels[mine]
        idmap["gid"] = gid[mine]
        sel = np.flatnonzero(e_owner == b)
        order = sel[np.lexsort((pos[sel], des[sel], sender[sel], e_lid[sel]))]
        n_local = len(idmap)
        offv = np.zeros(n_local + 1, dtype=np.uint64)
        offv[1:] = np.cumsum(np.bincount(e_lid[order], minlength=n_local)).astype(np.uint64)
        adjv = gid[di[order]].astype(np.uint64)
        res.boxes.append(OracleBox(b, idmap, offv, adjv))
    return res


@dataclass
class Divergence:
    box: int
    array: str
    index: int
    got: object
    expected: object

    def __str__(self):
        return f"box {self.box} {self.array}[{self.index}]: got {self.got}, expected {self.expected}"


def _first_diff(box, name, got, exp):
    got = np.ascontiguousarray(got)
    exp = np.ascontiguousarray(exp)
    if got.dtype.names:
        got = got.view(np.uint64).reshape(-1, 2)
        exp = exp.view(np.uint64).reshape(-1, 2)
    n = min(len(got), len(exp))
    neq = got[:n] != exp[:n]
    if neq.ndim > 1:
        neq = neq.any(axis=1)
    bad = np.flatnonzero(neq)
    if len(bad):
        i = int(bad[0])
        return Divergence(box, name, i, got[i].tolist(), exp[i].tolist())
    if len(got) != len(exp):
        return Divergence(box, name, n, f"length {len(got)}", f"length {len(exp)}")
    return None


def compare(partitions, oracle):
    """First divergence per box and array; an empty list means byte-identical."""
    out = []
    if len(partitions) != oracle.nb:
        return [Divergence(-1, "boxes", 0, len(partitions), oracle.nb)]
    for part, ref in zip(partitions, oracle.boxes):
        for name in ("idmap", "offv", "adjv"):
            d = _first_diff(ref.rank, name, getattr(part, name), getattr(ref, name))
            if d is not None:
                out.append(d)
    return out
