import hashlib
import json
import os
import subprocess
import sys
import time

import numpy as np

from conftest import free_ports
from edgecsr.cli import main


def run(*argv):
    try:
        return main([str(a) for a in argv])
    except SystemExit as e:
        return e.code


def sha(p):
    return hashlib.sha256(open(p, "rb").read()).hexdigest()


def test_generate(tmp_path):
    out = tmp_path / "e.bin"
    assert run("generate", "--kind", "uniform", "--scale", 10, "--edge-factor", 8, "--seed", 1, "--out", out) == 0
    assert out.stat().st_size == 8192 * 16
    out2 = tmp_path / "f.bin"
    run("generate", "--kind", "uniform", "--scale", 10, "--edge-factor", 8, "--seed", 1, "--out", out2)
    assert sha(out) == sha(out2)


def test_generate_missing_scale(tmp_path, capsys):
    assert run("generate", "--out", tmp_path / "e.bin") == 2
    assert "--scale" in capsys.readouterr().err


def test_generate_bad_rmat(tmp_path, capsys):
    assert run("generate", "--kind", "rmat", "--scale", 4, "--a", 0.9, "--out", tmp_path / "e.bin") == 2
    assert "sum to 1" in capsys.readouterr().err


def test_build_and_verify_parity_example(tmp_path):
    txt = tmp_path / "e.txt"
    txt.write_text("1 2\n3 2\n2 5\n")
    out = tmp_path / "parts"
    assert run("build", "--input", txt, "--nb", 2, "--label-map", "parity", "--out", out,
               "--spill-dir", tmp_path / "sp") == 0
    names = sorted(os.listdir(out))
    assert names == [f"partition-{r}.{x}" for r in (0, 1) for x in ("adjv", "idmap", "json", "offv")]
    assert run("verify", "--partitions", out, "--input", txt, "--nb", 2, "--label-map", "parity") == 0


def test_verify_detects_perturbation(tmp_path, capsys):
    e = tmp_path / "e.bin"
    run("generate", "--scale", 8, "--out", e)
    out = tmp_path / "parts"
    assert run("build", "--input", e, "--nb", 2, "--nc", 2, "--blk-sz", "1K", "--mmc", "8K", "--out", out) == 0
    adjv = out / "partition-1.adjv"
    a = np.fromfile(adjv, dtype="<u8")
    a[5] ^= 1
    a.tofile(adjv)
    capsys.readouterr()
    assert run("verify", "--partitions", out, "--input", e, "--nb", 2) == 1
    captured = capsys.readouterr()
    assert captured.out == "" and "box 1 adjv[5]" in captured.err


def test_verify_reports_index(tmp_path, capsys):
    e = tmp_path / "e.bin"
    run("generate", "--scale", 8, "--out", e)
    out = tmp_path / "parts"
    run("build", "--input", e, "--nb", 2, "--out", out)
    a = np.fromfile(out / "partition-0.adjv", dtype="<u8")
    a[3] += 1
    a.tofile(out / "partition-0.adjv")
    capsys.readouterr()
    assert run("verify", "--partitions", out, "--input", e, "--nb", 2) == 1
    assert "box 0 adjv[3]" in capsys.readouterr().err


def test_build_missing_input(tmp_path, capsys):
    assert run("build", "--input", tmp_path / "nope.bin", "--out", tmp_path / "o") == 2
    assert "does not exist" in capsys.readouterr().err


def test_build_bad_config(tmp_path):
    e = tmp_path / "e.bin"
    run("generate", "--scale", 4, "--out", e)
    assert run("build", "--input", e, "--blk-sz", 24, "--out", tmp_path / "o") == 2
    assert run("build", "--input", e, "--transport", "tcp", "--out", tmp_path / "o") == 2


def test_fig4_deadlock_and_buffered_completion(tmp_path, capsys):
    e = tmp_path / "f.bin"
    assert run("generate", "--kind", "fig4", "--scale", 10, "--out", e) == 0
    common = ["build", "--input", e, "--nb", 2, "--blk-sz", "1K", "--rendezvous", "--watchdog-timeout", 2]
    t0 = time.monotonic()
    assert run(*common, "--no-buffered-reader", "--out", tmp_path / "a") == 3
    assert time.monotonic() - t0 < 10
    err = capsys.readouterr().err
    assert "deadlock" in err and "wait-for" in err and "LABEL_SCATTER" in err
    assert run(*common, "--out", tmp_path / "b") == 0


def test_trace_report(tmp_path, capsys):
    e = tmp_path / "e.bin"
    run("generate", "--scale", 10, "--out", e)
    tr = tmp_path / "t.jsonl"
    assert run("build", "--input", e, "--nb", 2, "--blk-sz", "4K", "--trace", tr, "--out", tmp_path / "o") == 0
    capsys.readouterr()
    assert run("trace-report", tr) == 0
    out = capsys.readouterr().out
    assert "EDGE_SCATTER" in out and "verdict:" in out


def test_trace_report_empty_and_malformed(tmp_path, capsys):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert run("trace-report", empty) == 0
    out = capsys.readouterr().out
    assert "events: 0" in out and "verdict: N/A" in out
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"ts": 1}\n')
    assert run("trace-report", bad) == 2
    assert "line 1" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "edgecsr", "generate", "--scale", "3", "--out",
                        str(tmp_path / "x.bin")], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout == ""
    r = subprocess.run([sys.executable, "-m", "edgecsr", "build"], capture_output=True, text=True)
    assert r.returncode == 2 and "usage" in r.stderr


def test_tcp_two_processes(tmp_path):
    e = tmp_path / "e.bin"
    run("generate", "--scale", 9, "--seed", 4, "--out", e)
    peers = ",".join(f"127.0.0.1:{p}" for p in free_ports(2))
    procs = [subprocess.Popen([sys.executable, "-m", "edgecsr", "build", "--input", str(e), "--nb", "2",
                               "--transport", "tcp", "--rank", str(r), "--peers", peers,
                               "--out", str(tmp_path / "tcp"), "--spill-dir", str(tmp_path / f"s{r}")])
             for r in range(2)]
    assert [p.wait(60) for p in procs] == [0, 0]
    assert run("build", "--input", e, "--nb", 2, "--out", tmp_path / "inproc") == 0
    for name in sorted(os.listdir(tmp_path / "inproc")):
        assert sha(tmp_path / "inproc" / name) == sha(tmp_path / "tcp" / name), name
    meta = json.loads((tmp_path / "tcp" / "partition-0.json").read_text())
    assert meta["nb"] == 2
