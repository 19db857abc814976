"""Command line front end.

Subcommands:

  synth      build per-rank graphs for a preset or custom transformer
  ingest     convert raw operator exports into workload graphs
  validate   structural checks, optionally comparing op mixes of two runs
  pass       apply a scheduling rewrite (reorder-allgather, bucket-allreduce)
  expand     rewrite collectives into explicit SEND/RECV plans
  simulate   run the discrete-event engine and report timings
  sweep      cartesian scan over parallelisms/topologies/algorithms to CSV

Exit codes: 0 on success, 2 when input data fails validation, 1 on usage
errors (including unsupported flag combinations).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

from .collectives import CollectiveAlgo, expand_collectives
from .errors import (
    TrainsimError,
    UnsupportedAlgoTopologyError,
    UnsupportedComboError,
)
from .graph import (
    Dtype,
    compare_histograms,
    op_histogram,
    validate_graph,
)
from .passes import (
    DEFAULT_BUCKET_CAP,
    DEFAULT_PREFETCH,
    bucket_allreduce,
    reorder_allgather,
    verify_pass_safety,
)
from .simulator import CommMode, SimOptions, critical_path, simulate
from .synth import (
    PRESETS,
    FsdpMode,
    ModelConfig,
    parse_parallel,
)
from .topology import parse_topology
from .traceio import (
    convert,
    load_profile,
    read_graph_dir,
    read_raw_export,
    write_graph_dir,
)

USAGE_ERROR = 1
VALIDATION_ERROR = 2


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; that code is reserved for data failures
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    p = _Parser(prog="trainsim", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add_profile(sp):
        sp.add_argument("--profile", help="measured-kernel profile JSON")

    sp = sub.add_parser("synth", help="emit per-rank graphs for a model")
    sp.add_argument("--preset", choices=sorted(PRESETS))
    sp.add_argument("--layers", type=int)
    sp.add_argument("--hidden", type=int)
    sp.add_argument("--heads", type=int)
    sp.add_argument("--ffn-mult", type=int)
    sp.add_argument("--ffn-inner", type=int)
    sp.add_argument("--seq", type=int)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--dtype", choices=[d.value for d in Dtype])
    sp.add_argument("--parallel", required=True, help="strategy:degree, e.g. fsdp:8")
    sp.add_argument("--fsdp-mode", choices=[m.value for m in FsdpMode],
                    default=FsdpMode.DELAYED.value)
    add_profile(sp)
    sp.add_argument("--out", required=True, help="output graph directory")

    sp = sub.add_parser("ingest", help="convert raw exports to graphs")
    sp.add_argument("--raw", action="append", required=True,
                    help="raw export JSON, one flag per rank file")
    add_profile(sp)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("validate", help="check graphs; optionally compare op mixes")
    sp.add_argument("graphs", help="graph directory")
    sp.add_argument("--against", help="second graph directory to compare op mixes with")

    sp = sub.add_parser("pass", help="apply a scheduling rewrite")
    sp.add_argument("name", choices=["reorder-allgather", "bucket-allreduce"])
    sp.add_argument("--in", dest="src", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--k", type=int, default=DEFAULT_PREFETCH,
                    help="prefetch distance for reorder-allgather")
    sp.add_argument("--cap-bytes", type=int, default=DEFAULT_BUCKET_CAP,
                    help="bucket cap for bucket-allreduce")
    sp.add_argument("--verify", action="store_true",
                    help="cross-check the rewrite and fail on any violation")

    sp = sub.add_parser("expand", help="rewrite collectives into SEND/RECV plans")
    sp.add_argument("--in", dest="src", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--algo", choices=[a.value for a in CollectiveAlgo],
                    default=CollectiveAlgo.RING.value)
    sp.add_argument("--topo", required=True,
                    help="switch:<n>:<bw>:<lat> or mesh:<r>x<c>:<bw>:<lat>")

    sp = sub.add_parser("simulate", help="run the engine over a graph directory")
    sp.add_argument("--in", dest="src", required=True)
    sp.add_argument("--topo", required=True)
    sp.add_argument("--algo", choices=[a.value for a in CollectiveAlgo],
                    default=CollectiveAlgo.RING.value)
    sp.add_argument("--comm-mode", choices=[m.value for m in CommMode],
                    default=CommMode.ANALYTICAL.value)
    sp.add_argument("--compute-streams", type=int, default=1)
    sp.add_argument("--comm-streams", type=int, default=1)
    sp.add_argument("--trace", help="write the full event trace JSON here")

    sp = sub.add_parser("sweep", help="scan configurations, write a CSV")
    sp.add_argument("--preset", required=True, choices=sorted(PRESETS))
    sp.add_argument("--parallel", required=True,
                    help="comma list of strategy:degree tokens")
    sp.add_argument("--topo", required=True, help="comma list of topology specs")
    sp.add_argument("--algo", default=CollectiveAlgo.RING.value,
                    help="comma list of collective algorithms")
    sp.add_argument("--comm-mode", choices=[m.value for m in CommMode],
                    default=CommMode.ANALYTICAL.value)
    sp.add_argument("--fsdp-mode", choices=[m.value for m in FsdpMode],
                    default=FsdpMode.DELAYED.value)
    add_profile(sp)
    sp.add_argument("--normalize-to", help="parallel token whose makespan is the baseline")
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--out", required=True, help="CSV path")
    return p


def _model_from_args(args) -> ModelConfig:
    m = PRESETS[args.preset] if args.preset else None
    overrides = {
        "layers": args.layers, "hidden_dim": args.hidden, "num_heads": args.heads,
        "ffn_mult": args.ffn_mult, "ffn_inner": args.ffn_inner,
        "seq_len": args.seq, "micro_batch": args.batch,
        "dtype": Dtype(args.dtype) if args.dtype else None,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if m is None:
        for req in ("layers", "hidden_dim", "num_heads"):
            if req not in overrides:
                raise UnsupportedComboError(
                    "without --preset, --layers/--hidden/--heads are required")
        return ModelConfig(name="custom", **overrides)
    return dataclasses.replace(m, **overrides) if overrides else m


def _synth_graphs(args):
    m = _model_from_args(args)
    par = parse_parallel(args.parallel)
    par = dataclasses.replace(par, fsdp_mode=FsdpMode(args.fsdp_mode))
    profile = load_profile(args.profile) if getattr(args, "profile", None) else None
    from .synth import synth_transformer
    return synth_transformer(m, par, par.degree, profile=profile)


def cmd_synth(args) -> int:
    graphs = _synth_graphs(args)
    paths = write_graph_dir(graphs, args.out)
    print(f"wrote {len(paths)} rank graphs ({len(graphs[0].nodes)} nodes each) to {args.out}")
    return 0


def cmd_ingest(args) -> int:
    profile = load_profile(args.profile) if args.profile else None
    graphs = []
    for path in args.raw:
        raw = read_raw_export(path)
        graphs.append(convert(raw, profile=profile))
    ranks = [g.rank for g in graphs]
    if len(set(ranks)) != len(ranks):
        print(f"error: duplicate ranks in inputs: {sorted(ranks)}", file=sys.stderr)
        return VALIDATION_ERROR
    if len({g.world_size for g in graphs}) > 1:
        print("error: raw exports disagree on world_size", file=sys.stderr)
        return VALIDATION_ERROR
    bad = 0
    for g in graphs:
        for v in validate_graph(g):
            print(f"rank {g.rank}: {v}", file=sys.stderr)
            bad += 1
    if bad:
        return VALIDATION_ERROR
    write_graph_dir(graphs, args.out)
    total = sum(len(g.nodes) for g in graphs)
    print(f"ingested {len(graphs)} rank exports, {total} nodes, to {args.out}")
    return 0


def cmd_validate(args) -> int:
    graphs = read_graph_dir(args.graphs)
    bad = 0
    for g in graphs:
        for v in validate_graph(g):
            print(f"rank {g.rank}: {v}")
            bad += 1
    if bad:
        print(f"FAIL: {bad} violations")
        return VALIDATION_ERROR
    print(f"ok: {len(graphs)} rank graphs valid")
    if not args.against:
        return 0

    other = read_graph_dir(args.against)

    def mix(gs):
        total: dict = {}
        for g in gs:
            for k, v in op_histogram(g).items():
                total[k] = total.get(k, 0) + v
        return total

    ratios = compare_histograms(mix(graphs), mix(other))
    mismatched = 0
    for cls in sorted(ratios, key=lambda c: c.value):
        r = ratios[cls]
        flag = "" if r == 1.0 else "  MISMATCH"
        mismatched += r != 1.0
        print(f"{cls.value}: ratio={r:.6f}{flag}")
    if mismatched:
        print(f"FAIL: {mismatched} op classes differ")
        return VALIDATION_ERROR
    print("op mix matches")
    return 0


def cmd_pass(args) -> int:
    graphs = read_graph_dir(args.src)
    out = []
    stats = None
    for g in graphs:
        if args.name == "reorder-allgather":
            g2, stats = reorder_allgather(g, k=args.k)
        else:
            g2, stats = bucket_allreduce(g, cap_bytes=args.cap_bytes)
        if args.verify:
            viol = verify_pass_safety(g, g2)
            if viol:
                for v in viol:
                    print(f"rank {g.rank}: {v}", file=sys.stderr)
                return VALIDATION_ERROR
        out.append(g2)
    write_graph_dir(out, args.out)
    summary = " ".join(f"{k}={v}" for k, v in sorted(stats.items()))
    print(f"{args.name}: {summary}")
    return 0


def cmd_expand(args) -> int:
    graphs = read_graph_dir(args.src)
    topo = parse_topology(args.topo)
    expanded = expand_collectives(graphs, CollectiveAlgo(args.algo), topo)
    write_graph_dir(expanded, args.out)
    before = sum(len(g.nodes) for g in graphs)
    after = sum(len(g.nodes) for g in expanded)
    print(f"expanded {before} -> {after} nodes")
    return 0


def cmd_simulate(args) -> int:
    graphs = read_graph_dir(args.src)
    topo = parse_topology(args.topo)
    algo = CollectiveAlgo(args.algo)
    if CommMode(args.comm_mode) == CommMode.EXPANDED:
        graphs = expand_collectives(graphs, algo, topo)
    opts = SimOptions(algo=algo, compute_streams=args.compute_streams,
                      comm_streams=args.comm_streams,
                      record_events=bool(args.trace))
    report = simulate(graphs, topo, opts)
    lb = critical_path(graphs, topo, algo)
    print(f"makespan_ns={report.makespan_ns}")
    print(f"critical_path_ns={lb}")
    print(f"exposed_comm_ns={report.exposed_comm_ns}")
    print(f"peak_mem_bytes={report.peak_mem_bytes}")
    for r in sorted(report.ranks):
        s = report.ranks[r]
        print(f"rank {r}: finish_ns={s.finish_ns} compute_busy_ns={s.compute_busy_ns} "
              f"comm_busy_ns={s.comm_busy_ns} exposed_comm_ns={s.exposed_comm_ns} "
              f"peak_mem_bytes={s.peak_mem_bytes}")
    if args.trace:
        doc = report.to_doc()
        doc["critical_path_ns"] = lb
        Path(args.trace).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return 0


_SWEEP_FIELDS = ["model", "parallel", "fsdp_mode", "algo", "comm_mode", "topology",
                 "world_size", "makespan_ns", "critical_path_ns", "compute_busy_ns",
                 "comm_busy_ns", "exposed_comm_ns", "peak_mem_bytes", "speedup_vs_base"]


def _sweep_row(task: tuple) -> dict:
    preset, par_tok, topo_spec, algo_tok, comm_mode, fsdp_mode, profile_path = task
    from .synth import synth_transformer
    m = PRESETS[preset]
    par = parse_parallel(par_tok)
    par = dataclasses.replace(par, fsdp_mode=FsdpMode(fsdp_mode))
    profile = load_profile(profile_path) if profile_path else None
    graphs = synth_transformer(m, par, par.degree, profile=profile)
    topo = parse_topology(topo_spec)
    algo = CollectiveAlgo(algo_tok)
    if CommMode(comm_mode) == CommMode.EXPANDED:
        graphs = expand_collectives(graphs, algo, topo)
    report = simulate(graphs, topo, SimOptions(algo=algo, record_events=False))
    lb = critical_path(graphs, topo, algo)
    return {
        "model": preset, "parallel": par_tok, "fsdp_mode": fsdp_mode,
        "algo": algo_tok, "comm_mode": comm_mode, "topology": topo_spec,
        "world_size": par.degree,
        "makespan_ns": report.makespan_ns, "critical_path_ns": lb,
        "compute_busy_ns": max(s.compute_busy_ns for s in report.ranks.values()),
        "comm_busy_ns": max(s.comm_busy_ns for s in report.ranks.values()),
        "exposed_comm_ns": report.exposed_comm_ns,
        "peak_mem_bytes": report.peak_mem_bytes,
    }


def cmd_sweep(args) -> int:
    t0 = time.monotonic()
    parallels = [t.strip() for t in args.parallel.split(",") if t.strip()]
    topos = [t.strip() for t in args.topo.split(",") if t.strip()]
    algos = [t.strip() for t in args.algo.split(",") if t.strip()]
    if not parallels or not topos or not algos:
        raise UnsupportedComboError("sweep lists must be non-empty")
    tasks = [(args.preset, par, topo, algo, args.comm_mode, args.fsdp_mode, args.profile)
             for par, topo, algo in itertools.product(parallels, topos, algos)]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            rows = list(ex.map(_sweep_row, tasks))
    else:
        rows = [_sweep_row(t) for t in tasks]

    base: dict[tuple, int] = {}
    if args.normalize_to:
        for row in rows:
            if row["parallel"] == args.normalize_to:
                base[(row["model"], row["topology"], row["algo"], row["comm_mode"])] = \
                    row["makespan_ns"]
    for row in rows:
        b = base.get((row["model"], row["topology"], row["algo"], row["comm_mode"]))
        row["speedup_vs_base"] = (
            f"{b / row['makespan_ns']:.6f}" if b and row["makespan_ns"] else "1.000000")

    with open(args.out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=_SWEEP_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    print(f"sweep wall time: {time.monotonic() - t0:.2f}s", file=sys.stderr)
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "validate": cmd_validate,
    "pass": cmd_pass,
    "expand": cmd_expand,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
}


def main(argv: Optional[list[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (UnsupportedComboError, UnsupportedAlgoTopologyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except TrainsimError as e:
        print(f"error: {e}", file=sys.stderr)
        return VALIDATION_ERROR


if __name__ == "__main__":
    sys.exit(main())
