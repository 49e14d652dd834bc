"""Command-line driver.

    edgecsr generate --kind uniform --scale 10 --out e.bin
    edgecsr build --input e.bin --nb 2 --out parts/
    edgecsr verify --partitions parts/ --input e.bin --nb 2
    edgecsr trace-report trace.jsonl

Exit codes: 0 success, 1 build/verify failure, 2 usage or malformed input,
3 deadlock detected by the watchdog.  Diagnostics go to stderr.
"""

import argparse
import logging
import os
import sys
import tempfile
from pathlib import Path

from . import __version__
from .genio import EdgeFormatError, GenSpec, edge_stream, fig4_edges, generate, read_edges, \
    write_edges
from .labelmap import LABEL_MAPS
from .oracle import compare, oracle_build
from .pipeline import BuildConfig, load_partition, run_inproc, run_tcp
from .trace import TraceFormatError, Tracer, interleaving_by_box, read_trace, summarize
from .transport import DeadlockError, TransportConfig, parse_peers

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DEADLOCK = 0, 1, 2, 3


def _err(msg):
    print(f"edgecsr: {msg}", file=sys.stderr)


def _size(text):
    """Byte count with an optional K/M/G suffix (powers of two)."""
    units = {"k": 1 << 10, "m": 1 << 20, "g": 1 << 30}
    t = text.strip().lower().removesuffix("ib").removesuffix("b")
    try:
        if t and t[-1] in units:
            return int(float(t[:-1]) * units[t[-1]])
        return int(t)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size {text!r}") from None


def cmd_generate(args):
    if args.kind == "fig4":
        write_edges(args.out, fig4_edges(1 << args.scale), args.format)
        return EXIT_OK
    spec = GenSpec(args.kind, args.scale, args.edge_factor, args.seed, args.a, args.b, args.c, args.d)
    n = write_edges(args.out, generate(spec), args.format)
    logging.info("wrote %d edges to %s", n, args.out)
    return EXIT_OK


def _binary_input(path, scratch):
    """Binary edge stream for ``path``, converting text input first."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"input {path} does not exist")
    if str(path).endswith(".txt"):
        os.makedirs(scratch, exist_ok=True)
        out = Path(scratch) / "input.bin"
        write_edges(out, read_edges(path))
        path = out
    return edge_stream(path)


def _config(args):
    tcfg = TransportConfig(backend=args.transport, rendezvous=args.rendezvous,
                           serialize_comm=args.serialize_comm,
                           watchdog_timeout=args.watchdog_timeout,
                           buffered_reader=not args.no_buffered_reader)
    return BuildConfig(nb=args.nb, nc=args.nc, blk_sz=args.blk_sz, mmc=args.mmc,
                       spill_dir=args.spill_dir, label_map=args.label_map, transport=tcfg,
                       retain_spill=args.retain_spill)


def cmd_build(args):
    if args.transport == "tcp" and (args.rank is None or not args.peers):
        _err("tcp transport needs --rank and --peers")
        return EXIT_USAGE
    try:
        cfg = _config(args)
        src = _binary_input(args.input, Path(args.spill_dir) / "input")
    except (ValueError, OSError) as e:
        _err(str(e))
        return EXIT_USAGE
    tracer = Tracer() if args.trace else None
    try:
        if args.transport == "tcp":
            peers = parse_peers(args.peers)
            if len(peers) != cfg.nb:
                _err(f"--peers lists {len(peers)} boxes but --nb is {cfg.nb}")
                return EXIT_USAGE
            parts = [run_tcp(cfg, args.rank, peers, src, args.out, tracer)]
        else:
            parts = run_inproc(cfg, src, args.out, tracer)
    except DeadlockError as e:
        _err(str(e))
        return EXIT_DEADLOCK
    except Exception as e:  # noqa: BLE001 - any phase failure maps to exit 1
        _err(f"build failed: {type(e).__name__}: {e}")
        return EXIT_FAIL
    finally:
        if tracer is not None:
            tracer.dump(args.trace)
    for p in parts:
        logging.info("box %d: n_local=%d m_local=%d", p.rank, p.n_local, p.m_local)
    return EXIT_OK


def cmd_verify(args):
    try:
        edges = read_edges(args.input).to_array()
        parts = [load_partition(args.partitions, r, mmap=False) for r in range(args.nb)]
    except (OSError, ValueError, KeyError) as e:
        _err(str(e))
        return EXIT_USAGE
    divs = compare(parts, oracle_build(edges, args.nb, args.label_map))
    for d in divs:
        _err(f"divergence: {d}")
    return EXIT_FAIL if divs else EXIT_OK


def cmd_trace_report(args):
    try:
        events = read_trace(args.trace)
    except TraceFormatError as e:
        _err(f"{args.trace}: {e}")
        return EXIT_USAGE
    except OSError as e:
        _err(str(e))
        return EXIT_USAGE
    s = summarize(events)
    print(f"events: {s['events']}")
    print(f"{'channel':<18}{'send':>8}{'recv':>8}{'first_ts':>22}{'last_ts':>22}")
    for ch, c in sorted(s["channels"].items()):
        print(f"{ch:<18}{c['send']:>8}{c['recv']:>8}{c['first']:>22}{c['last']:>22}")
    for box, v in interleaving_by_box(events).items():
        print(f"box {box}: {v}")
    print(f"verdict: {s['verdict']}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="edgecsr", description="Out-of-core edge list to distributed CSR.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("generate", help="write a synthetic edge list")
    g.add_argument("--kind", choices=("uniform", "rmat", "fig4"), default="uniform")
    g.add_argument("--scale", type=int, required=True)
    g.add_argument("--edge-factor", type=int, default=8)
    g.add_argument("--seed", type=int, default=1)
    for q, v in zip("abcd", (0.57, 0.19, 0.19, 0.05)):
        g.add_argument(f"--{q}", type=float, default=v, help=f"rmat quadrant probability (default {v})")
    g.add_argument("--format", choices=("bin", "txt"), default=None,
                   help="default: txt if OUT ends in .txt, else bin")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    b = sub.add_parser("build", help="build the distributed CSR")
    b.add_argument("--input", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--nb", type=int, default=1)
    b.add_argument("--nc", type=int, default=1)
    b.add_argument("--blk-sz", type=_size, default=64 << 10)
    b.add_argument("--mmc", type=_size, default=8 << 20)
    b.add_argument("--spill-dir", default=None)
    b.add_argument("--retain-spill", action="store_true")
    b.add_argument("--label-map", choices=sorted(LABEL_MAPS), default="mod")
    b.add_argument("--transport", choices=("inproc", "tcp"), default="inproc")
    b.add_argument("--rank", type=int)
    b.add_argument("--peers", help="comma separated host:port, one per rank")
    b.add_argument("--rendezvous", action="store_true")
    b.add_argument("--no-buffered-reader", action="store_true")
    b.add_argument("--serialize-comm", action="store_true")
    b.add_argument("--watchdog-timeout", type=float, default=10.0)
    b.add_argument("--trace")
    b.set_defaults(func=cmd_build)

    v = sub.add_parser("verify", help="compare partitions with the in-memory oracle")
    v.add_argument("--partitions", required=True)
    v.add_argument("--input", required=True)
    v.add_argument("--nb", type=int, required=True)
    v.add_argument("--label-map", choices=sorted(LABEL_MAPS), default="mod")
    v.set_defaults(func=cmd_verify)

    t = sub.add_parser("trace-report", help="summarize a JSONL trace")
    t.add_argument("trace")
    t.set_defaults(func=cmd_trace_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if getattr(args, "spill_dir", "unset") is None:
            with tempfile.TemporaryDirectory(prefix="edgecsr-spill-") as tmp:
                args.spill_dir = tmp
                return args.func(args)
        return args.func(args)
    except (EdgeFormatError, ValueError) as e:
        _err(str(e))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
