"""Synthetic edge generators and edge list file formats.

Randomness comes from SplitMix64 used as a counter-based generator: draw
``i`` of a stream seeded with ``seed`` is ``mix(seed + (i + 1) * 0x9E3779B97F4A7C15)``
with the standard SplitMix64 finalizer, all arithmetic mod 2**64.  Any
language with 64-bit unsigned integers reproduces the same edges.

Uniform edge ``i`` uses draws ``2i`` (source) and ``2i + 1`` (destination),
keeping the top ``scale`` bits.  R-MAT edge ``i`` at recursion level ``l``
(0 = most significant bit) uses draw ``i * scale + l``, turned into a double
in [0, 1) from its top 53 bits, to pick a quadrant.
"""

import os
from dataclasses import dataclass

import numpy as np

from .elements import EDGE
from .iterators import GeneratorIterator
from .stream_store import PersistentStream, em_stream_iter

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
GEN_BLOCK = 1 << 16


def splitmix64(seed, index):
    """Vectorized SplitMix64 draws ``index`` (uint64 array) of stream ``seed``."""
    with np.errstate(over="ignore"):
        z = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + (np.asarray(index, dtype=np.uint64) + np.uint64(1)) * GAMMA
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


@dataclass(frozen=True)
class GenSpec:
    kind: str = "uniform"
    scale: int = 10
    edge_factor: int = 8
    seed: int = 1
    a: float = 0.57
    b: float = 0.19
    c: float = 0.19
    d: float = 0.05

    def __post_init__(self):
        if self.kind not in ("uniform", "rmat"):
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if not 1 <= self.scale <= 63:
            raise ValueError("scale must be in [1, 63]")
        if self.edge_factor < 1:
            raise ValueError("edge_factor must be >= 1")
        if abs(self.a + self.b + self.c + self.d - 1.0) > 1e-9:
            raise ValueError("rmat probabilities must sum to 1")
        if min(self.a, self.b, self.c, self.d) < 0:
            raise ValueError("rmat probabilities must be non-negative")

    @property
    def n_vertices(self):
        return 1 << self.scale

    @property
    def n_edges(self):
        return self.edge_factor << self.scale


def _uniform_blocks(spec):
    shift = np.uint64(64 - spec.scale)
    for start in range(0, spec.n_edges, GEN_BLOCK):
        n = min(GEN_BLOCK, spec.n_edges - start)
        draws = splitmix64(spec.seed, np.arange(2 * start, 2 * (start + n), dtype=np.uint64))
        blk = np.empty(n, dtype=EDGE.dtype)
        blk["src"] = draws[0::2] >> shift
        blk["des"] = draws[1::2] >> shift
        yield blk


def _rmat_blocks(spec):
    s = spec.scale
    ab, abc = spec.a + spec.b, spec.a + spec.b + spec.c
    step = max(1, GEN_BLOCK // s)
    weights = np.uint64(1) << np.arange(s - 1, -1, -1, dtype=np.uint64)
    for start in range(0, spec.n_edges, step):
        n = min(step, spec.n_edges - start)
        draws = splitmix64(spec.seed, np.arange(start * s, (start + n) * s, dtype=np.uint64))
        u = (draws >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        u = u.reshape(n, s)
        src_bit = (u >= ab).astype(np.uint64)
        des_bit = (((u >= spec.a) & (u < ab)) | (u >= abc)).astype(np.uint64)
        blk = np.empty(n, dtype=EDGE.dtype)
        blk["src"] = src_bit @ weights
        blk["des"] = des_bit @ weights
        yield blk


def gen_uniform(spec):
    if spec.kind != "uniform":
        raise ValueError("gen_uniform needs kind='uniform'")
    return GeneratorIterator(EDGE, _uniform_blocks(spec))


def gen_rmat(spec):
    if spec.kind != "rmat":
        raise ValueError("gen_rmat needs kind='rmat'")
    return GeneratorIterator(EDGE, _rmat_blocks(spec))


def generate(spec):
    return gen_uniform(spec) if spec.kind == "uniform" else gen_rmat(spec)


def fig4_edges(per_box):
    """Two-box workload that sets up the circular wait of a naive reader.

    The first half of the edge list (box 0's input) holds small odd labels
    and large even ones, the second half small even labels and large odd
    ones.  Under label-mod-2 ownership each box's sorted label scatter first
    streams ``per_box`` labels to the *other* box.
    """
    i = np.arange(per_box, dtype=np.uint64)
    big = np.uint64(1 << 40)
    box0 = np.empty(per_box, dtype=EDGE.dtype)
    box0["src"] = 2 * i + 1
    box0["des"] = big + 2 * i
    box1 = np.empty(per_box, dtype=EDGE.dtype)
    box1["src"] = 2 * i
    box1["des"] = big + 2 * i + 1
    return np.concatenate([box0, box1])


class EdgeFormatError(ValueError):
    pass


def _is_text(path, fmt):
    if fmt is None:
        return str(path).endswith(".txt")
    if fmt not in ("bin", "txt"):
        raise ValueError(f"unknown edge format {fmt!r}")
    return fmt == "txt"


def write_edges(path, it, fmt=None):
    """Write an edge iterator (or array) as raw little-endian u64 pairs or
    as ``src des`` text lines.  Returns the edge count."""
    blocks = [it] if isinstance(it, np.ndarray) else it.blocks()
    n = 0
    text = _is_text(path, fmt)
    with open(path, "w" if text else "wb") as f:
        for blk in blocks:
            if text:
                f.writelines(f"{s} {d}\n" for s, d in zip(blk["src"].tolist(), blk["des"].tolist()))
            else:
                f.write(np.ascontiguousarray(blk, dtype=EDGE.dtype).tobytes())
            n += len(blk)
    if not isinstance(it, np.ndarray):
        it.clean()
    return n


def _text_blocks(path, block_len=GEN_BLOCK):
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 2:
                raise EdgeFormatError(f"{path}:{lineno}: expected 'src des', got {line.strip()!r}")
            try:
                s, d = int(parts[0]), int(parts[1])
            except ValueError:
                raise EdgeFormatError(f"{path}:{lineno}: labels must be integers") from None
            if not (0 <= s < 1 << 64 and 0 <= d < 1 << 64):
                raise EdgeFormatError(f"{path}:{lineno}: label out of u64 range")
            rows.append((s, d))
            if len(rows) == block_len:
                yield np.array(rows, dtype=EDGE.dtype)
                rows = []
    if rows:
        yield np.array(rows, dtype=EDGE.dtype)


def edge_stream(path):
    """The binary edge file as a persistent stream (validated for alignment)."""
    size = os.path.getsize(path)
    if size % EDGE.size:
        raise EdgeFormatError(f"{path}: {size} bytes is not a whole number of 16-byte edges")
    return PersistentStream(str(path), 0, size, EDGE)


def read_edges(path, fmt=None, blk_sz=1 << 20):
    if _is_text(path, fmt):
        return GeneratorIterator(EDGE, _text_blocks(path))
    return em_stream_iter(edge_stream(path), blk_sz)
