"""Acceptance criteria 1-7.

Run with ``pytest tests/test_acceptance.py``; the terminal summary prints
one PASS/FAIL line per criterion.
"""

import os
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import free_ports
from edgecsr.cli import main
from edgecsr.elements import EDGE, IDMAP, LABEL
from edgecsr.genio import GenSpec, fig4_edges, generate, write_edges
from edgecsr.instrument import METER
from edgecsr.iterators import ArrayIterator, enumerate_, sort_merge_join, sorted_merge, uniq
from edgecsr.elements import by_des, by_label, identity_key
from edgecsr.labelmap import mod_map
from edgecsr.oracle import compare, oracle_build
from edgecsr.pipeline import BuildConfig, build_csr, run_inproc
from edgecsr.stream_store import PersistentStream
from edgecsr.transport import (ChannelId, InprocNetwork, TransportConfig,
                               in_network_iter, make_reader, scatter_stream)

KiB, MiB = 1 << 10, 1 << 20
CASES = 250


def cli(*argv):
    try:
        return main([str(a) for a in argv])
    except SystemExit as e:
        return e.code


def write_input(path, edges):
    write_edges(path, edges)
    return PersistentStream.whole_file(path, EDGE)


# 1. Oracle equivalence

@pytest.mark.criterion(1, "oracle equivalence, scales 8-16 x seeds x nb x nc")
def test_c1_oracle_equivalence(tmp_path, acceptance_detail):
    t0 = time.monotonic()
    configs = failures = 0
    for scale in range(8, 17):
        for seed in (1, 2, 3):
            edges = generate(GenSpec("uniform", scale, 8, seed)).to_array()
            src = write_input(tmp_path / "e.bin", edges)
            for nb in (1, 2, 4):
                ref = oracle_build(edges, nb)
                for nc in (1, 2, 4):
                    cfg = BuildConfig(nb=nb, nc=nc, spill_dir=str(tmp_path / "spill"))
                    parts = run_inproc(cfg, src, tmp_path / "out")
                    divs = compare(parts, ref)
                    configs += 1
                    if divs:
                        failures += 1
                        print(f"scale={scale} seed={seed} nb={nb} nc={nc}: {divs[0]}")
    elapsed = time.monotonic() - t0
    acceptance_detail(f"{configs} configs, {failures} divergent, {elapsed:.1f} s (limit 120 s)")
    assert configs == 243 and failures == 0
    assert elapsed < 120


# 2. Deadlock dichotomy

@pytest.mark.criterion(2, "deadlock dichotomy under rendezvous")
def test_c2_deadlock_dichotomy(tmp_path, acceptance_detail):
    path = tmp_path / "fig4.bin"
    per_box = 1 << 10
    write_edges(path, fig4_edges(per_box))
    blk_sz = 1 * KiB
    # labels each box first streams to the other one, in messages
    msgs_per_direction = per_box // (blk_sz // LABEL.size)
    assert msgs_per_direction >= 4
    common = ["build", "--input", path, "--nb", 2, "--blk-sz", blk_sz, "--rendezvous",
              "--watchdog-timeout", 5, "--spill-dir", tmp_path / "sp"]
    t0 = time.monotonic()
    naive = cli(*common, "--no-buffered-reader", "--out", tmp_path / "naive")
    t_naive = time.monotonic() - t0
    buffered = cli(*common, "--out", tmp_path / "buffered")
    acceptance_detail(f"naive exit {naive} after {t_naive:.1f} s; buffered exit {buffered}; "
                      f"{msgs_per_direction} msgs/direction")
    assert naive == 3 and t_naive < 10
    assert buffered == 0


# 3. Out-of-core budget

@pytest.mark.criterion(3, "out-of-core budget at scale 20")
def test_c3_out_of_core_budget(tmp_path, acceptance_detail):
    spec = GenSpec("uniform", 20, 8, 1)
    src = tmp_path / "e.bin"
    write_edges(src, generate(spec))
    assert os.path.getsize(src) == 8_388_608 * 16 == 128 * MiB
    mmc, blk_sz = 8 * MiB, 64 * KiB
    cfg = BuildConfig(nb=1, nc=2, blk_sz=blk_sz, mmc=mmc, spill_dir=str(tmp_path / "spill"))
    METER.reset()
    t0 = time.monotonic()
    parts = run_inproc(cfg, src, tmp_path / "out")
    elapsed = time.monotonic() - t0
    peaks = METER.peaks()
    bound = 2 * mmc + 16 * blk_sz
    worst = max(peaks, key=peaks.get)
    acceptance_detail(f"peak {peaks[worst] / MiB:.2f} MiB in {worst} (bound {bound / MiB:.2f} MiB), "
                      f"{elapsed:.1f} s (limit 600 s)")
    assert parts[0].m_local == spec.n_edges
    assert all(v <= bound for v in peaks.values()), peaks
    assert elapsed < 600


# 4. Pipeline interleaving

@pytest.mark.criterion(4, "pipeline interleaving at scale 14, nb=2")
def test_c4_interleaving(tmp_path, capsys, acceptance_detail):
    verdicts = []
    for seed in (1, 2, 3):
        e = tmp_path / f"e{seed}.bin"
        assert cli("generate", "--scale", 14, "--seed", seed, "--out", e) == 0
        tr = tmp_path / f"t{seed}.jsonl"
        assert cli("build", "--input", e, "--nb", 2, "--trace", tr, "--out", tmp_path / f"o{seed}",
                   "--spill-dir", tmp_path / "sp") == 0
        capsys.readouterr()
        assert cli("trace-report", tr) == 0
        lines = capsys.readouterr().out.splitlines()
        verdicts.append([ln.split(": ", 1)[1] for ln in lines if ln.startswith("verdict:")][0])
    acceptance_detail(f"verdicts {verdicts}")
    assert verdicts.count("interleaved") >= 2


# 5. Backend equivalence

@pytest.mark.criterion(5, "inproc vs tcp partition files bit-identical")
def test_c5_backend_equivalence(tmp_path, acceptance_detail):
    e = tmp_path / "e.bin"
    assert cli("generate", "--scale", 12, "--seed", 7, "--out", e) == 0
    assert cli("build", "--input", e, "--nb", 2, "--out", tmp_path / "inproc",
               "--spill-dir", tmp_path / "sp") == 0
    peers = ",".join(f"127.0.0.1:{p}" for p in free_ports(2))
    procs = [subprocess.Popen([sys.executable, "-m", "edgecsr", "build", "--input", str(e),
                               "--nb", "2", "--transport", "tcp", "--rank", str(r), "--peers", peers,
                               "--out", str(tmp_path / "tcp"), "--spill-dir", str(tmp_path / f"s{r}")])
             for r in range(2)]
    codes = [p.wait(120) for p in procs]
    names = sorted(os.listdir(tmp_path / "inproc"))
    same = [n for n in names
            if (tmp_path / "tcp" / n).exists()
            and (tmp_path / "inproc" / n).read_bytes() == (tmp_path / "tcp" / n).read_bytes()]
    acceptance_detail(f"tcp exits {codes}; {len(same)}/{len(names)} files identical")
    assert codes == [0, 0] and len(names) == 8 and same == names


# 6. Invariant suites

def _check_count(n, note):
    note(f"{n} cases")
    assert n >= 200


@pytest.mark.criterion(6, "invariant suites (>= 200 randomized cases each)")
def test_c6_sorted_merge(acceptance_detail):
    rng = np.random.default_rng(601)
    for _ in range(CASES):
        k = int(rng.integers(1, 41))
        runs = []
        for i in range(k):
            r = np.zeros(int(rng.integers(0, 60)), dtype=EDGE.dtype)
            r["src"] = np.sort(rng.integers(0, 30, len(r)))
            r["des"] = i
            runs.append(r)
        its = [ArrayIterator(r, EDGE, int(rng.integers(1, 9))) for r in runs]
        out = sorted_merge(its, lambda b: b["src"]).to_array()
        cat = np.concatenate(runs)
        assert np.all(np.diff(out["src"].astype(np.int64)) >= 0)
        assert sorted(out.tolist()) == sorted(cat.tolist())
        assert np.array_equal(out, cat[np.argsort(cat["src"], kind="stable")])
    _check_count(CASES, acceptance_detail)


@pytest.mark.criterion(6, "invariant suites (>= 200 randomized cases each)")
def test_c6_uniq_enumerate(acceptance_detail):
    rng = np.random.default_rng(602)
    for _ in range(CASES):
        vals = rng.integers(0, int(rng.integers(1, 500)), int(rng.integers(0, 2000)), dtype=np.uint64)
        runs = [ArrayIterator(np.sort(c), LABEL, int(rng.integers(1, 50)))
                for c in np.array_split(vals, int(rng.integers(1, 6)))]
        out = enumerate_(uniq(sorted_merge(runs, identity_key, LABEL))).to_array()
        distinct = np.unique(vals)
        assert np.array_equal(out["value"], distinct)
        assert out["index"].tolist() == list(range(len(distinct)))
        assert len(set(out["value"].tolist())) == len(out)
    _check_count(CASES, acceptance_detail)


def _relabel(inner, outer):
    out = outer.copy()
    out["des"] = inner["gid"]
    return out


@pytest.mark.criterion(6, "invariant suites (>= 200 randomized cases each)")
def test_c6_join_vs_nested_loop(acceptance_detail):
    rng = np.random.default_rng(603)
    biggest = 0
    for case in range(CASES):
        n_in = int(np.exp(rng.uniform(0, np.log(5000)))) if case else 5000
        keys = np.unique(rng.integers(0, 4 * n_in + 1, n_in, dtype=np.uint64))
        inner = np.empty(len(keys), dtype=IDMAP.dtype)
        inner["label"] = keys
        inner["gid"] = rng.integers(0, 1 << 60, len(keys), dtype=np.uint64)
        n_out = min(10_000 - len(inner), int(np.exp(rng.uniform(0, np.log(5000)))))
        outer = np.empty(n_out, dtype=EDGE.dtype)
        outer["des"] = np.sort(rng.choice(keys, n_out))
        outer["src"] = rng.integers(0, 1 << 40, n_out, dtype=np.uint64)
        biggest = max(biggest, len(inner) + len(outer))
        got = sort_merge_join(ArrayIterator(inner, IDMAP, int(rng.integers(1, 300))),
                              ArrayIterator(outer, EDGE, int(rng.integers(1, 300))),
                              _relabel, by_label, by_des, EDGE).to_array()
        want = []
        labels = inner["label"]
        for o_src, o_des in outer.tolist():
            # inner loop vectorized over the whole inner stream
            for i in np.flatnonzero(labels == o_des):
                want.append((o_src, int(inner["gid"][i])))
        assert got.tolist() == want
    assert biggest <= 10_000
    _check_count(CASES, acceptance_detail)


@pytest.mark.criterion(6, "invariant suites (>= 200 randomized cases each)")
def test_c6_scatter_conservation(acceptance_detail):
    rng = np.random.default_rng(604)
    ch = ChannelId.EDGE_SCATTER
    for _ in range(CASES):
        nb = int(rng.integers(1, 6))
        n = int(rng.integers(0, 3000))
        e = np.empty(n, dtype=EDGE.dtype)
        e["src"] = rng.integers(0, 1 << 30, n, dtype=np.uint64)
        if rng.random() < 0.5:
            e["src"] = np.sort(e["src"])
        e["des"] = np.arange(n)   # sequence tag
        blk_sz = 16 * int(rng.integers(1, 64))
        net = InprocNetwork(nb, TransportConfig(link_capacity=None, watchdog_timeout=0))
        sender = int(rng.integers(0, nb))
        counts = scatter_stream(ArrayIterator(e, EDGE, int(rng.integers(1, 500))),
                                lambda b: mod_map(b["src"], nb), ch, net.endpoint(sender), blk_sz)
        received = []
        for r in range(nb):
            got = in_network_iter(ch, sender, make_reader(net.endpoint(r), ch, blk_sz)).to_array()
            assert np.all(mod_map(got["src"], nb) == r)          # no leakage
            assert np.all(np.diff(got["des"].astype(np.int64)) > 0)  # source order kept
            if n and np.all(np.diff(e["src"].astype(np.int64)) >= 0):
                assert np.all(np.diff(got["src"].astype(np.int64)) >= 0)
            assert len(got) == counts[r]
            received.append(got)
        allgot = np.concatenate(received) if received else e[:0]
        assert sorted(allgot.tolist()) == sorted(e.tolist())
    _check_count(CASES, acceptance_detail)


@pytest.mark.criterion(6, "invariant suites (>= 200 randomized cases each)")
def test_c6_buffered_reader_fifo(acceptance_detail):
    rng = np.random.default_rng(605)
    ch = ChannelId.LABEL_SCATTER
    for _ in range(CASES):
        nb = int(rng.integers(1, 6))
        per = [int(rng.integers(0, 12)) for _ in range(nb)]
        order = np.repeat(np.arange(nb), per)
        rng.shuffle(order)
        seq = [0] * nb
        arrivals = []
        for s in order:
            arrivals.append((int(s), 2, np.array([s, seq[s]], "<u8").tobytes()))
            seq[s] += 1
        net = InprocNetwork(nb, TransportConfig(link_capacity=None, watchdog_timeout=0))
        net.script_arrivals(0, ch, arrivals)
        reader = make_reader(net.endpoint(0), ch, 64)
        want = [0] * nb
        requests = np.repeat(np.arange(nb), per)
        rng.shuffle(requests)
        prev = {}
        for s in requests:
            s = int(s)
            m = reader.read(s)
            if s in prev:
                # the buffer handed out for s last time was recycled: back in the pool,
                # reused for a queued message, or reused for this very read
                held = reader.pool + [q for qs in reader.msg_queues for q in qs] + [m]
                assert any(prev[s] is h for h in held)
            # no buffer is lent to two senders at once
            lent = [a for a in reader.allocated if a is not None]
            assert len({id(a) for a in lent}) == len(lent)
            src, k = np.frombuffer(m.payload, "<u8").tolist()
            assert (m.sender, src, k) == (s, s, want[s])
            want[s] += 1
            prev[s] = m
        assert want == per
        assert all(not q for q in reader.msg_queues)
        assert not any(net.mailbox(0, int(ch)).queues)
    _check_count(CASES, acceptance_detail)


def _reference_csr(src, des, n_local):
    offv = [0] * (n_local + 1)
    for s in src:
        offv[s + 1] += 1
    for i in range(n_local):
        offv[i + 1] += offv[i]
    adjv = [0] * len(des)
    fill = offv[:-1]
    fill = list(fill)
    for s, d in zip(src, des):
        adjv[fill[s]] = d
        fill[s] += 1
    return offv, adjv


@pytest.mark.criterion(6, "invariant suites (>= 200 randomized cases each)")
def test_c6_build_csr(acceptance_detail):
    rng = np.random.default_rng(606)
    gaps = 0
    for _ in range(CASES):
        n_local = int(rng.integers(0, 80))
        m = int(rng.integers(0, 300)) if n_local else 0
        src = np.sort(rng.integers(0, max(n_local, 1), m)).tolist()
        if m and rng.random() < 0.3:
            keep = [s for s in src if s % 3]   # force zero-degree vertices
            src = keep
        des = rng.integers(0, 1 << 50, len(src)).tolist()
        e = np.array(list(zip(src, des)), dtype=EDGE.dtype) if src else np.zeros(0, EDGE.dtype)
        offv, adjv = build_csr(ArrayIterator(e, EDGE, int(rng.integers(1, 40))), n_local)
        ref_offv, ref_adjv = _reference_csr(src, des, n_local)
        assert offv.tolist() == ref_offv and adjv.tolist() == ref_adjv
        gaps += any(a == b for a, b in zip(ref_offv, ref_offv[1:]))
    assert gaps > 50
    _check_count(CASES, acceptance_detail)


# 7. Monotone ingest scaling

@pytest.mark.criterion(7, "build time nondecreasing over scales 12-18")
def test_c7_monotone_scaling(tmp_path, acceptance_detail):
    times = []
    for scale in (12, 14, 16, 18):
        src = write_input(tmp_path / f"e{scale}.bin", generate(GenSpec("uniform", scale, 8, 1)).to_array())
        cfg = BuildConfig(nb=1, nc=1, spill_dir=str(tmp_path / "spill"))
        best = None
        for _ in range(2):
            t0 = time.perf_counter()
            run_inproc(cfg, src, tmp_path / "out")
            dt = time.perf_counter() - t0
            best = dt if best is None else min(best, dt)
        times.append(best)
    acceptance_detail("times " + ", ".join(f"{t:.3f}" for t in times) + " s")
    assert all(a <= b for a, b in zip(times, times[1:]))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
