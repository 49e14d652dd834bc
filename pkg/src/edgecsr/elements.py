"""Element kinds, their on-disk dtypes, and global vertex id packing."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ElemKind:
    name: str
    dtype: np.dtype

    @property
    def size(self):
        """Storage cost in bytes of one element."""
        return self.dtype.itemsize

    def to_py(self, value):
        """Convert one numpy scalar/record to plain python ints (or tuples)."""
        return value.item()

    def array(self, values):
        """Build a block of this kind from python values."""
        if isinstance(values, np.ndarray) and values.dtype == self.dtype:
            return values
        return np.array(list(values), dtype=self.dtype)

    def empty(self, n=0):
        return np.empty(n, dtype=self.dtype)

    def __repr__(self):
        return f"ElemKind({self.name})"


LABEL = ElemKind("Label", np.dtype("<u8"))
EDGE = ElemKind("Edge", np.dtype([("src", "<u8"), ("des", "<u8")]))
IDMAP = ElemKind("IdMapEntry", np.dtype([("label", "<u8"), ("gid", "<u8")]))

KINDS = {k.name: k for k in (LABEL, EDGE, IDMAP)}


def pair_kind(inner):
    """Kind of (index, element) tuples produced by enumerate over ``inner``."""
    return ElemKind(f"Enumerated[{inner.name}]",
                    np.dtype([("index", "<u8"), ("value", inner.dtype)]))


# Global vertex ids: owner box in the top 16 bits, local id in the low 48.
BOX_BITS = 16
LID_BITS = 48
LID_MASK = (1 << LID_BITS) - 1
MAX_BOXES = 1 << BOX_BITS


def pack_gid(box, lid):
    if not 0 <= box < MAX_BOXES:
        raise ValueError(f"box {box} out of range")
    if not 0 <= lid <= LID_MASK:
        raise ValueError(f"local id {lid} out of range")
    return (box << LID_BITS) | lid


def unpack_gid(gid):
    return gid >> LID_BITS, gid & LID_MASK


def gid_box(gids):
    """Vectorized owner-box extraction for uint64 arrays."""
    return (np.asarray(gids, dtype=np.uint64) >> np.uint64(LID_BITS)).astype(np.int64)


def gid_lid(gids):
    return (np.asarray(gids, dtype=np.uint64) & np.uint64(LID_MASK)).astype(np.int64)


# Orderings are key extractors: block -> uint64 key array.
def identity_key(block):
    return block


def field_key(name):
    def key(block):
        return block[name]
    key.__name__ = f"by_{name}"
    return key


by_src = field_key("src")
by_des = field_key("des")
by_label = field_key("label")
