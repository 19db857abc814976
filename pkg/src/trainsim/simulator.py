"""Deterministic discrete-event execution of per-rank workload graphs.

Each rank runs three stream groups: a host stream (issue order), a pool of
compute streams, and a pool of comm streams. A node becomes ready when every
data and ctrl dependency has completed; among ready nodes a stream always
picks the lowest node id, so runs are reproducible bit for bit.

Communication comes in two shapes, decided by what the graph contains:

* COLL nodes are timed with closed-form alpha-beta cost models. A collective
  is a synchronization point: it starts once every group member is ready and
  the comm streams of every member rank are free, and it occupies them all
  for its duration.
* SEND/RECV nodes (from expand_collectives) move point-to-point messages over
  the topology's links. A message is granted once both endpoints are ready,
  in FIFO order per link, and holds every link on its route for the whole
  transfer, so congestion shows up as queueing delay.

The report carries makespan, per-rank busy/exposed-comm/peak-memory stats,
per-link busy time, and an optional flat event trace.

critical_path computes the contention-free longest path through the same
merged graph (collectives as sync joins, messages as weighted cross edges).
It is a lower bound: simulate can only add resource waiting on top of it.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .collectives import CollectiveAlgo, analytical_time, collective_instances
from .errors import DeadlockError
from .graph import CollectiveKind, Node, NodeKind, WorkloadGraph
from .topology import Topology, TopologyKind


class CommMode(Enum):
    ANALYTICAL = "analytical"
    EXPANDED = "expanded"


@dataclass
class SimOptions:
    algo: CollectiveAlgo = CollectiveAlgo.RING
    compute_streams: int = 1
    comm_streams: int = 1
    record_events: bool = True


@dataclass
class TraceEvent:
    rank: int
    node_id: int
    stream: str
    op_name: str
    start_ns: int
    end_ns: int


@dataclass
class RankStats:
    finish_ns: int = 0
    compute_busy_ns: int = 0
    comm_busy_ns: int = 0
    exposed_comm_ns: int = 0
    peak_mem_bytes: int = 0


@dataclass
class SimReport:
    makespan_ns: int
    ranks: dict[int, RankStats]
    link_busy_ns: dict[str, int] = field(default_factory=dict)
    events: list[TraceEvent] = field(default_factory=list)

    @property
    def exposed_comm_ns(self) -> int:
        return max((s.exposed_comm_ns for s in self.ranks.values()), default=0)

    @property
    def peak_mem_bytes(self) -> int:
        return max((s.peak_mem_bytes for s in self.ranks.values()), default=0)

    def to_doc(self) -> dict:
        return {
            "format_version": "sim-trace/1",
            "makespan_ns": self.makespan_ns,
            "ranks": {
                str(r): {
                    "finish_ns": s.finish_ns,
                    "compute_busy_ns": s.compute_busy_ns,
                    "comm_busy_ns": s.comm_busy_ns,
                    "exposed_comm_ns": s.exposed_comm_ns,
                    "peak_mem_bytes": s.peak_mem_bytes,
                } for r, s in sorted(self.ranks.items())
            },
            "links": dict(sorted(self.link_busy_ns.items())),
            "events": [
                {"rank": e.rank, "node_id": e.node_id, "stream": e.stream,
                 "op": e.op_name, "start_ns": e.start_ns, "end_ns": e.end_ns}
                for e in self.events
            ],
        }


def _coll_duration(coll, algo: CollectiveAlgo, topo: Topology) -> int:
    n = len(coll.group)
    size = coll.comm_bytes * n if coll.kind == CollectiveKind.ALL_GATHER else coll.comm_bytes
    mesh = (topo.rows, topo.cols) if topo.kind == TopologyKind.MESH2D else None
    return analytical_time(coll.kind, size, n, algo, topo.alpha_ns,
                           topo.beta_ns_per_byte, mesh_shape=mesh)


# ---------------------------------------------------------------------------
# interval arithmetic for busy/exposed accounting


def _merge(intervals: list[tuple[int, int]]) -> list[tuple[int, int]]:
    out: list[tuple[int, int]] = []
    for s, e in sorted(intervals):
        if e <= s:
            continue
        if out and s <= out[-1][1]:
            if e > out[-1][1]:
                out[-1] = (out[-1][0], e)
        else:
            out.append((s, e))
    return out


def _total(merged: list[tuple[int, int]]) -> int:
    return sum(e - s for s, e in merged)


def _overlap(a: list[tuple[int, int]], b: list[tuple[int, int]]) -> int:
    i = j = tot = 0
    while i < len(a) and j < len(b):
        s = max(a[i][0], b[j][0])
        e = min(a[i][1], b[j][1])
        if e > s:
            tot += e - s
        if a[i][1] < b[j][1]:
            i += 1
        else:
            j += 1
    return tot


# ---------------------------------------------------------------------------
# the engine


class _CollInstance:
    __slots__ = ("members", "duration", "waiting", "ready_ns")

    def __init__(self, members: list[tuple[int, Node]], duration: int):
        self.members = members            # (rank, node) per group position
        self.duration = duration
        self.waiting = len(members)
        self.ready_ns = 0


class _Message:
    __slots__ = ("send", "recv", "nbytes", "send_t", "recv_t")

    def __init__(self, send: tuple[int, int], recv: tuple[int, int], nbytes: int):
        self.send = send
        self.recv = recv
        self.nbytes = nbytes
        self.send_t: Optional[int] = None
        self.recv_t: Optional[int] = None


def _pair_messages(graphs: list[WorkloadGraph]) -> dict[tuple[int, int], _Message]:
    """Match the k-th SEND to the k-th RECV on each (src, dst, tag) channel."""
    sends: dict[tuple[int, int, int], list[tuple[int, Node]]] = {}
    recvs: dict[tuple[int, int, int], list[tuple[int, Node]]] = {}
    for g in graphs:
        for n in g.nodes:
            if n.kind == NodeKind.SEND:
                sends.setdefault((g.rank, n.p2p.peer_rank, n.p2p.channel_tag),
                                 []).append((g.rank, n))
            elif n.kind == NodeKind.RECV:
                recvs.setdefault((n.p2p.peer_rank, g.rank, n.p2p.channel_tag),
                                 []).append((g.rank, n))
    by_node: dict[tuple[int, int], _Message] = {}
    for key in sorted(set(sends) | set(recvs)):
        ss = sorted(sends.get(key, []), key=lambda p: p[1].node_id)
        rr = sorted(recvs.get(key, []), key=lambda p: p[1].node_id)
        if len(ss) != len(rr):
            raise DeadlockError(
                f"channel {key}: {len(ss)} sends but {len(rr)} recvs")
        for (sr, sn), (dr, dn) in zip(ss, rr):
            msg = _Message((sr, sn.node_id), (dr, dn.node_id), sn.p2p.comm_bytes)
            by_node[(sr, sn.node_id)] = msg
            by_node[(dr, dn.node_id)] = msg
    return by_node


def simulate(graphs: list[WorkloadGraph], topo: Topology,
             opts: Optional[SimOptions] = None) -> SimReport:
    opts = opts or SimOptions()
    if len({g.rank for g in graphs}) != len(graphs):
        raise ValueError("duplicate rank in graphs")
    by_rank = {g.rank: g for g in graphs}
    nodes: dict[tuple[int, int], Node] = {
        (g.rank, n.node_id): n for g in graphs for n in g.nodes}

    remaining: dict[tuple[int, int], int] = {}
    dependents: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for (r, nid), n in nodes.items():
        deps = set(n.dep_ids())
        remaining[(r, nid)] = len(deps)
        for d in deps:
            dependents.setdefault((r, d), []).append((r, nid))

    instances: dict[tuple[int, int], _CollInstance] = {}
    for members in collective_instances(graphs):
        lead = members[0]
        pairs = list(zip(lead.coll.group, members))
        inst = _CollInstance(pairs, _coll_duration(lead.coll, opts.algo, topo))
        for r, m in pairs:
            instances[(r, m.node_id)] = inst

    messages = _pair_messages(graphs)

    host_ready: dict[int, list[int]] = {g.rank: [] for g in graphs}
    comp_ready: dict[int, list[int]] = {g.rank: [] for g in graphs}
    host_slot: dict[int, int] = {g.rank: 0 for g in graphs}
    comp_slots: dict[int, list[int]] = {g.rank: [0] * opts.compute_streams for g in graphs}
    comm_slots: dict[int, list[int]] = {g.rank: [0] * opts.comm_streams for g in graphs}
    link_free: dict[str, int] = {}
    link_busy: dict[str, int] = {}

    pending_colls: list[_CollInstance] = []
    pending_msgs: list[_Message] = []
    heap: list[tuple[int, int, int]] = []     # (end_ns, rank, node_id)
    start_ns: dict[tuple[int, int], int] = {}
    end_ns: dict[tuple[int, int], int] = {}
    comm_iv: dict[int, list[tuple[int, int]]] = {g.rank: [] for g in graphs}
    done = 0
    total = len(nodes)

    def dispatch(r: int, nid: int, now: int) -> None:
        n = nodes[(r, nid)]
        if n.kind == NodeKind.HOST:
            heapq.heappush(host_ready[r], nid)
        elif n.kind == NodeKind.COMP:
            heapq.heappush(comp_ready[r], nid)
        elif n.kind == NodeKind.COLL:
            inst = instances[(r, nid)]
            inst.waiting -= 1
            inst.ready_ns = max(inst.ready_ns, now)
            if inst.waiting == 0:
                pending_colls.append(inst)
        else:
            msg = messages.get((r, nid))
            if msg is None:
                raise DeadlockError(f"rank {r} node {nid}: unmatched {n.kind.value}")
            if (r, nid) == msg.send:
                msg.send_t = now
            else:
                msg.recv_t = now
            if msg.send_t is not None and msg.recv_t is not None:
                pending_msgs.append(msg)

    def finish(r: int, nid: int, s: int, e: int) -> None:
        start_ns[(r, nid)] = s
        end_ns[(r, nid)] = e
        heapq.heappush(heap, (e, r, nid))

    for (r, nid), c in remaining.items():
        if c == 0:
            dispatch(r, nid, 0)

    now = 0
    while True:
        # start everything that can start at the current time
        for r in sorted(host_ready):
            while host_ready[r] and host_slot[r] <= now:
                nid = heapq.heappop(host_ready[r])
                e = now + (nodes[(r, nid)].duration_ns or 0)
                host_slot[r] = e
                finish(r, nid, now, e)
        for r in sorted(comp_ready):
            slots = comp_slots[r]
            while comp_ready[r]:
                free = min(range(len(slots)), key=lambda i: slots[i])
                if slots[free] > now:
                    break
                nid = heapq.heappop(comp_ready[r])
                e = now + (nodes[(r, nid)].duration_ns or 0)
                slots[free] = e
                finish(r, nid, now, e)
        if pending_colls:
            pending_colls.sort(key=lambda i: (i.ready_ns, i.members[0][1].node_id))
            for inst in pending_colls:
                s = inst.ready_ns
                for r, _ in inst.members:
                    s = max(s, max(comm_slots[r]))
                e = s + inst.duration
                for r, m in inst.members:
                    comm_slots[r] = [e] * len(comm_slots[r])
                    comm_iv[r].append((s, e))
                    finish(r, m.node_id, s, e)
            pending_colls = []
        if pending_msgs:
            pending_msgs.sort(key=lambda m: (max(m.send_t, m.recv_t), m.send[0], m.send[1]))
            for msg in pending_msgs:
                sr, dr = msg.send[0], msg.recv[0]
                route = topo.route(sr, dr)
                s = max(msg.send_t, msg.recv_t)
                for ln in route:
                    s = max(s, link_free.get(ln, 0))
                e = s + topo.transfer_ns(sr, dr, msg.nbytes)
                for ln in route:
                    link_free[ln] = e
                    link_busy[ln] = link_busy.get(ln, 0) + (e - s)
                comm_iv[sr].append((s, e))
                if dr != sr:
                    comm_iv[dr].append((s, e))
                finish(sr, msg.send[1], s, e)
                finish(dr, msg.recv[1], s, e)
            pending_msgs = []

        if not heap:
            if done < total:
                stuck = sorted(k for k in nodes if k not in end_ns)[:5]
                raise DeadlockError(
                    f"{total - done} nodes never became runnable, e.g. {stuck}")
            break
        now, r, nid = heapq.heappop(heap)
        done += 1
        for dr, dn in dependents.get((r, nid), ()):
            remaining[(dr, dn)] -= 1
            if remaining[(dr, dn)] == 0:
                dispatch(dr, dn, now)

    makespan = max(end_ns.values(), default=0)
    ranks: dict[int, RankStats] = {}
    for g in graphs:
        r = g.rank
        comp_iv = _merge([(start_ns[(r, n.node_id)], end_ns[(r, n.node_id)])
                          for n in g.nodes if n.kind == NodeKind.COMP])
        comm = _merge(comm_iv[r])
        finish_r = max((end_ns[(r, n.node_id)] for n in g.nodes), default=0)
        ranks[r] = RankStats(
            finish_ns=finish_r,
            compute_busy_ns=_total(comp_iv),
            comm_busy_ns=_total(comm),
            exposed_comm_ns=_total(comm) - _overlap(comm, comp_iv),
            peak_mem_bytes=_peak_mem(g, start_ns, end_ns, finish_r),
        )

    events: list[TraceEvent] = []
    if opts.record_events:
        stream_of = {NodeKind.HOST: "host", NodeKind.COMP: "compute",
                     NodeKind.COLL: "comm", NodeKind.SEND: "comm", NodeKind.RECV: "comm"}
        for (r, nid), s in start_ns.items():
            n = nodes[(r, nid)]
            events.append(TraceEvent(r, nid, stream_of[n.kind], n.op_name, s, end_ns[(r, nid)]))
        events.sort(key=lambda e: (e.start_ns, e.rank, e.node_id))
    return SimReport(makespan_ns=makespan, ranks=ranks,
                     link_busy_ns=dict(sorted(link_busy.items())), events=events)


def _peak_mem(g: WorkloadGraph, start_ns: dict, end_ns: dict, finish: int) -> int:
    """High-water mark: a tensor lives from its producer's start to its last
    consumer's completion; graph inputs and consumerless tensors span the run.
    """
    producer: dict[int, int] = {}
    consumers: dict[int, list[int]] = {}
    for n in g.nodes:
        for t in n.outputs:
            producer[t] = n.node_id
        for t in n.inputs:
            consumers.setdefault(t, []).append(n.node_id)
    deltas: list[tuple[int, int, int]] = []
    r = g.rank
    for tid, tm in g.tensors.items():
        alloc = start_ns[(r, producer[tid])] if tid in producer else 0
        used = consumers.get(tid)
        free = max(end_ns[(r, c)] for c in used) if used else finish
        deltas.append((alloc, 0, tm.bytes))
        deltas.append((free, 1, -tm.bytes))
    cur = peak = 0
    for _, _, d in sorted(deltas):
        cur += d
        peak = max(peak, cur)
    return peak


# ---------------------------------------------------------------------------
# contention-free lower bound


def critical_path(graphs: list[WorkloadGraph], topo: Topology,
                  algo: CollectiveAlgo = CollectiveAlgo.RING) -> int:
    """Longest dependency path, ignoring stream and link contention.

    Collectives join their whole group (every member waits on every member's
    predecessors); a RECV waits on its SEND plus the wire time. simulate can
    only be slower.
    """
    nodes: dict[tuple[int, int], Node] = {
        (g.rank, n.node_id): n for g in graphs for n in g.nodes}

    deps: dict[tuple[int, int], set[tuple[int, int]]] = {}
    for (r, nid), n in nodes.items():
        deps[(r, nid)] = {(r, d) for d in n.dep_ids()}

    durations: dict[tuple[int, int], int] = {}
    for (r, nid), n in nodes.items():
        durations[(r, nid)] = n.duration_ns or 0

    for members in collective_instances(graphs):
        lead = members[0]
        pairs = list(zip(lead.coll.group, members))
        union: set[tuple[int, int]] = set()
        for r, m in pairs:
            union |= {(r, d) for d in m.dep_ids()}
        dur = _coll_duration(lead.coll, algo, topo)
        for r, m in pairs:
            deps[(r, m.node_id)] = set(union)
            durations[(r, m.node_id)] = dur

    wire: dict[tuple[int, int], tuple[tuple[int, int], int]] = {}
    for key, msg in _pair_messages(graphs).items():
        if key == msg.recv:
            sr, dr = msg.send[0], msg.recv[0]
            deps[key] = deps[key] | {msg.send}
            wire[key] = (msg.send, topo.transfer_ns(sr, dr, msg.nbytes))

    indeg = {k: len(v) for k, v in deps.items()}
    out: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for k, v in deps.items():
        for d in v:
            out.setdefault(d, []).append(k)
    ready = [k for k, c in indeg.items() if c == 0]
    heapq.heapify(ready)
    finish: dict[tuple[int, int], int] = {}
    seen = 0
    while ready:
        k = heapq.heappop(ready)
        seen += 1
        start = max((finish[d] for d in deps[k]), default=0)
        if k in wire:
            send, w = wire[k]
            start = max(start, finish[send] + w)
        finish[k] = start + durations[k]
        for succ in out.get(k, ()):
            indeg[succ] -= 1
            if indeg[succ] == 0:
                heapq.heappush(ready, succ)
    if seen != len(nodes):
        raise DeadlockError("cyclic cross-rank wait in critical path")
    return max(finish.values(), default=0)
