"""Collective algorithms: P2P expansion plans, closed-form times, correctness.

A P2pPlan is the per-rank SEND/RECV schedule a collective lowers to. Ops carry
a step index; on one rank, an op may start only after every op with a smaller
step finished, which together with SEND->RECV message matching fixes the
execution order. ``dataflow_check`` executes a plan symbolically over integer
chunk values and verifies the collective's postcondition.

Algorithms:

* RING: classic chunked ring over the group in its listed order (reduce-scatter
  sweep, then all-gather sweep for ALL_REDUCE);
* TREE: binomial reduce to the first group member, then binomial broadcast
  (ALL_REDUCE only);
* MESH_HIER: per-dimension phases on a 2D mesh using neighbor-only line
  schedules, so every message is single-hop (row reduce-scatter, column
  exchange, row all-gather for ALL_REDUCE).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .errors import (
    DeadlockError,
    InconsistentGroupsError,
    UnsupportedAlgoTopologyError,
)
from .graph import (
    CollectiveKind,
    Node,
    NodeKind,
    P2pSpec,
    WorkloadGraph,
)
from .topology import Topology, TopologyKind
from .traceio import round_half_up_ns


class CollectiveAlgo(Enum):
    RING = "ring"
    TREE = "tree"
    MESH_HIER = "mesh-hier"


@dataclass
class PlanOp:
    kind: NodeKind                 # SEND or RECV
    peer: int                      # global rank on the other end
    nbytes: int
    chunk: int                     # channel tag; messages match on (src, dst, chunk)
    step: int
    reduce: bool                   # RECV combines into the slot instead of overwriting
    slots: tuple[int, ...]         # symbolic chunk slots the message carries


@dataclass
class P2pPlan:
    kind: CollectiveKind
    algo: CollectiveAlgo
    group: list[int]
    num_slots: int
    ops: dict[int, list[PlanOp]] = field(default_factory=dict)

    def send_count(self, rank: int) -> int:
        return sum(1 for o in self.ops.get(rank, []) if o.kind == NodeKind.SEND)

    def bytes_sent(self, rank: int) -> int:
        return sum(o.nbytes for o in self.ops.get(rank, []) if o.kind == NodeKind.SEND)


def _chunk_sizes(total: int, n: int) -> list[int]:
    """Split bytes into n chunks, larger chunks at lower indices."""
    base, rem = divmod(total, n)
    return [base + (1 if c < rem else 0) for c in range(n)]


def _add_msg(plan: P2pPlan, src: int, dst: int, nbytes: int, chunk: int, step: int,
             reduce: bool, slots: tuple[int, ...]) -> None:
    plan.ops[src].append(PlanOp(NodeKind.SEND, dst, nbytes, chunk, step, reduce, slots))
    plan.ops[dst].append(PlanOp(NodeKind.RECV, src, nbytes, chunk, step, reduce, slots))


def _ring_rs_steps(plan: P2pPlan, group: list[int], sizes: list[int], base: int) -> int:
    """Ring reduce-scatter; position i ends owning chunk i. Returns next step."""
    n = len(group)
    for s in range(n - 1):
        for i in range(n):
            c = (i - s - 1) % n
            _add_msg(plan, group[i], group[(i + 1) % n], sizes[c], c, base + s, True, (c,))
    return base + n - 1


def _ring_ag_steps(plan: P2pPlan, group: list[int], sizes: list[int], base: int) -> int:
    """Ring all-gather assuming position i starts owning chunk i."""
    n = len(group)
    for s in range(n - 1):
        for i in range(n):
            c = (i - s) % n
            _add_msg(plan, group[i], group[(i + 1) % n], sizes[c], c, base + s, False, (c,))
    return base + n - 1


def _ring_plan(kind: CollectiveKind, group: list[int], comm_bytes: int) -> P2pPlan:
    n = len(group)
    plan = P2pPlan(kind, CollectiveAlgo.RING, list(group), n, {r: [] for r in group})
    if kind == CollectiveKind.ALL_REDUCE:
        sizes = _chunk_sizes(comm_bytes, n)
        nxt = _ring_rs_steps(plan, group, sizes, 0)
        _ring_ag_steps(plan, group, sizes, nxt)
    elif kind == CollectiveKind.REDUCE_SCATTER:
        _ring_rs_steps(plan, group, _chunk_sizes(comm_bytes, n), 0)
    else:  # ALL_GATHER: each chunk is one rank's shard of comm_bytes
        _ring_ag_steps(plan, group, [comm_bytes] * n, 0)
    return plan


def _tree_plan(kind: CollectiveKind, group: list[int], comm_bytes: int) -> P2pPlan:
    if kind != CollectiveKind.ALL_REDUCE:
        raise UnsupportedAlgoTopologyError("TREE is defined for ALL_REDUCE only")
    n = len(group)
    plan = P2pPlan(kind, CollectiveAlgo.TREE, list(group), n, {r: [] for r in group})
    rounds = max(1, math.ceil(math.log2(n)))
    slots = tuple(range(n))
    up: list[tuple[int, int, int]] = []   # (src pos, dst pos, step)
    for d in range(rounds):
        mask = 1 << d
        for i in range(n):
            if i % (mask << 1) == mask:
                up.append((i, i - mask, d))
    for src, dst, step in up:
        _add_msg(plan, group[src], group[dst], comm_bytes, 0, step, True, slots)
    for src, dst, step in reversed(up):
        # broadcast mirrors the reduce tree with flipped direction
        _add_msg(plan, group[dst], group[src], comm_bytes, 0,
                 rounds + (rounds - 1 - step), False, slots)
    return plan


def _line_rs(plan: P2pPlan, line: list[int], groups: list[tuple[int, ...]],
             group_bytes: list[int], base: int) -> int:
    """Reduce-scatter along a line of neighbors; index j ends owning groups[j].

    Partials flow toward each destination from both ends, one hop per step,
    so every message stays on a physical neighbor link.
    """
    k = len(line)
    for j in range(k):
        for i in range(j):                      # rightward chain into j
            _add_msg(plan, line[i], line[i + 1], group_bytes[j], j, base + i, True, groups[j])
        for i in range(k - 1, j, -1):           # leftward chain into j
            _add_msg(plan, line[i], line[i - 1], group_bytes[j], j, base + (k - 1 - i), True, groups[j])
    return base + max(k - 1, 0)


def _line_ag(plan: P2pPlan, line: list[int], groups: list[tuple[int, ...]],
             group_bytes: list[int], base: int) -> int:
    """All-gather along a line; index j starts owning groups[j]."""
    k = len(line)
    for j in range(k):
        for i in range(j, k - 1):               # rightward from owner
            _add_msg(plan, line[i], line[i + 1], group_bytes[j], j, base + (i - j), False, groups[j])
        for i in range(j, 0, -1):               # leftward from owner
            _add_msg(plan, line[i], line[i - 1], group_bytes[j], j, base + (j - i), False, groups[j])
    return base + max(k - 1, 0)


def _mesh_hier_plan(kind: CollectiveKind, group: list[int], comm_bytes: int,
                    topo: Topology) -> P2pPlan:
    if topo.kind != TopologyKind.MESH2D:
        raise UnsupportedAlgoTopologyError("MESH_HIER requires a MESH2D topology")
    if sorted(group) != list(range(topo.world_size)):
        raise UnsupportedAlgoTopologyError(
            f"MESH_HIER expects the full mesh as the group, got {group}")
    rows, cols = topo.rows, topo.cols
    n = rows * cols
    plan = P2pPlan(kind, CollectiveAlgo.MESH_HIER, list(group), n, {r: [] for r in range(n)})
    row_lines = [[topo.rank_at(r, c) for c in range(cols)] for r in range(rows)]
    col_lines = [[topo.rank_at(r, c) for r in range(rows)] for c in range(cols)]
    # slot g is rank g's piece; column-striped groups keep phase outputs aligned
    col_groups = [tuple(topo.rank_at(r, c) for r in range(rows)) for c in range(cols)]

    if kind == CollectiveKind.ALL_GATHER:
        shard = comm_bytes
        own = [[(line[j],) for j in range(cols)] for line in row_lines]
        nxt = 0
        for r, line in enumerate(row_lines):
            nxt = max(nxt, _line_ag(plan, line, own[r], [shard] * cols, 0))
        row_groups = [tuple(row_lines[r]) for r in range(rows)]
        for c, line in enumerate(col_lines):
            _line_ag(plan, line, row_groups, [shard * cols] * rows, nxt)
        return plan

    slot_sizes = _chunk_sizes(comm_bytes, n)
    col_group_bytes = [sum(slot_sizes[s] for s in grp) for grp in col_groups]
    nxt = 0
    for line in row_lines:
        nxt = max(nxt, _line_rs(plan, line, col_groups, col_group_bytes, 0))
    # column phase works on the single slot each rank will own
    sub_groups = {c: [(topo.rank_at(r, c),) for r in range(rows)] for c in range(cols)}
    sub_bytes = {c: [slot_sizes[topo.rank_at(r, c)] for r in range(rows)] for c in range(cols)}
    nxt2 = nxt
    for c, line in enumerate(col_lines):
        nxt2 = max(nxt2, _line_rs(plan, line, sub_groups[c], sub_bytes[c], nxt))
    if kind == CollectiveKind.REDUCE_SCATTER:
        return plan
    nxt3 = nxt2
    for c, line in enumerate(col_lines):
        nxt3 = max(nxt3, _line_ag(plan, line, sub_groups[c], sub_bytes[c], nxt2))
    for line in row_lines:
        _line_ag(plan, line, col_groups, col_group_bytes, nxt3)
    return plan


def expand(coll_node: Node, algo: CollectiveAlgo, topo: Topology) -> P2pPlan:
    """Lower one collective node to a per-rank SEND/RECV schedule."""
    if coll_node.coll is None:
        raise ValueError(f"node {coll_node.node_id} is not a collective")
    spec = coll_node.coll
    if len(spec.group) < 2:
        raise ValueError(f"collective group must have at least 2 ranks, got {spec.group}")
    if algo == CollectiveAlgo.RING:
        plan = _ring_plan(spec.kind, spec.group, spec.comm_bytes)
    elif algo == CollectiveAlgo.TREE:
        plan = _tree_plan(spec.kind, spec.group, spec.comm_bytes)
    elif algo == CollectiveAlgo.MESH_HIER:
        plan = _mesh_hier_plan(spec.kind, spec.group, spec.comm_bytes, topo)
    else:
        raise UnsupportedAlgoTopologyError(f"unknown algorithm {algo}")
    for r in plan.ops:
        plan.ops[r].sort(key=lambda o: o.step)   # stable: keeps emission order per step
    return plan


# ---------------------------------------------------------------------------
# closed-form timing


def _ring_rs_time(n: int, size: float, alpha: float, beta: float) -> float:
    return (n - 1) * alpha + (n - 1) / n * size * beta


def _ring_ar_time(n: int, size: float, alpha: float, beta: float) -> float:
    return 2 * (n - 1) * alpha + 2 * (n - 1) / n * size * beta


def analytical_time(
    kind: CollectiveKind,
    size_bytes: int,
    n: int,
    algo: CollectiveAlgo,
    alpha_ns: float,
    beta_ns_per_byte: float,
    mesh_shape: Optional[tuple[int, int]] = None,
) -> int:
    """Alpha-beta collective time in integer ns.

    ``size_bytes`` is the full vector: for ALL_GATHER pass shard * group size.
    MESH_HIER composes per-phase ring forms over the mesh dimensions.
    """
    if n <= 1:
        return 0
    a, b, s = float(alpha_ns), float(beta_ns_per_byte), float(size_bytes)
    if algo == CollectiveAlgo.RING:
        if kind == CollectiveKind.ALL_REDUCE:
            t = _ring_ar_time(n, s, a, b)
        else:
            t = _ring_rs_time(n, s, a, b)
    elif algo == CollectiveAlgo.TREE:
        if kind != CollectiveKind.ALL_REDUCE:
            raise UnsupportedAlgoTopologyError("TREE is defined for ALL_REDUCE only")
        t = 2 * math.ceil(math.log2(n)) * a + 2 * s * b
    elif algo == CollectiveAlgo.MESH_HIER:
        if not mesh_shape:
            raise UnsupportedAlgoTopologyError("MESH_HIER timing needs the mesh shape")
        rows, cols = mesh_shape
        if rows * cols != n:
            raise UnsupportedAlgoTopologyError(f"mesh {rows}x{cols} does not hold {n} ranks")
        if kind == CollectiveKind.ALL_REDUCE:
            t = (_ring_rs_time(cols, s, a, b)
                 + _ring_ar_time(rows, s / cols, a, b)
                 + _ring_rs_time(cols, s, a, b))   # all-gather sweep costs the same as RS
        elif kind == CollectiveKind.ALL_GATHER:
            t = _ring_rs_time(cols, s / rows, a, b) + _ring_rs_time(rows, s, a, b)
        else:
            t = _ring_rs_time(cols, s, a, b) + _ring_rs_time(rows, s / cols, a, b)
    else:
        raise UnsupportedAlgoTopologyError(f"unknown algorithm {algo}")
    return round_half_up_ns(t)


def wire_bytes(kind: CollectiveKind, comm_bytes: int, n: int, algo: CollectiveAlgo,
               mesh_shape: Optional[tuple[int, int]] = None) -> int:
    """Total bytes crossing links, summed over all ranks of the group."""
    if n <= 1:
        return 0
    s = comm_bytes
    if algo == CollectiveAlgo.TREE:
        return 2 * (n - 1) * s
    if algo == CollectiveAlgo.MESH_HIER:
        if not mesh_shape:
            raise UnsupportedAlgoTopologyError("MESH_HIER byte accounting needs the mesh shape")
        rows, cols = mesh_shape
        if kind == CollectiveKind.ALL_REDUCE:
            return rows * (cols - 1) * s + cols * (rows - 1) * 2 * (s // cols) + rows * (cols - 1) * s
        if kind == CollectiveKind.ALL_GATHER:
            return rows * (cols - 1) * cols * s + cols * (rows - 1) * rows * cols * s
        return rows * (cols - 1) * s + cols * (rows - 1) * (s // cols)
    # RING
    if kind == CollectiveKind.ALL_REDUCE:
        return 2 * (n - 1) * s
    if kind == CollectiveKind.ALL_GATHER:
        return n * (n - 1) * s
    return (n - 1) * s


# ---------------------------------------------------------------------------
# symbolic correctness check


def dataflow_check(plan: P2pPlan) -> bool:
    """Execute the plan over symbolic integers and verify the postcondition.

    Group position p contributes value p+1. ALL_REDUCE must leave every slot
    on every rank equal to the group sum; ALL_GATHER must reassemble slot j
    with contribution j+1 everywhere; REDUCE_SCATTER must leave position p
    holding the full sum in slot p. Raises DeadlockError if the schedule
    stalls with ops remaining.
    """
    group = plan.group
    n = len(group)
    pos = {r: i for i, r in enumerate(group)}
    values: dict[int, list] = {}
    for r in group:
        p = pos[r]
        if plan.kind == CollectiveKind.ALL_GATHER:
            values[r] = [p + 1 if s == p else None for s in range(plan.num_slots)]
        else:
            values[r] = [p + 1] * plan.num_slots

    in_flight: dict[tuple[int, int, int], deque] = {}
    done: dict[int, list[bool]] = {r: [False] * len(plan.ops.get(r, [])) for r in group}
    remaining = sum(len(v) for v in done.values())

    def step_ready(r: int, idx: int) -> bool:
        my = plan.ops[r]
        s = my[idx].step
        return all(done[r][j] or my[j].step >= s for j in range(len(my)))

    while remaining:
        progress = False
        for r in sorted(plan.ops):
            ops = plan.ops[r]
            for idx, op in enumerate(ops):
                if done[r][idx] or not step_ready(r, idx):
                    continue
                if op.kind == NodeKind.SEND:
                    payload = {s: values[r][s] for s in op.slots}
                    in_flight.setdefault((r, op.peer, op.chunk), deque()).append(payload)
                else:
                    q = in_flight.get((op.peer, r, op.chunk))
                    if not q:
                        continue
                    payload = q.popleft()
                    for s, val in payload.items():
                        if op.reduce:
                            cur = values[r][s]
                            values[r][s] = None if (cur is None or val is None) else cur + val
                        else:
                            values[r][s] = val
                done[r][idx] = True
                remaining -= 1
                progress = True
        if not progress:
            stuck = [(r, i) for r in done for i, d in enumerate(done[r]) if not d]
            raise DeadlockError(f"plan stalled with {remaining} ops pending, e.g. {stuck[:4]}")

    total = n * (n + 1) // 2
    if plan.kind == CollectiveKind.ALL_REDUCE:
        return all(values[r][s] == total for r in group for s in range(plan.num_slots))
    if plan.kind == CollectiveKind.ALL_GATHER:
        return all(values[r][s] == s + 1 for r in group for s in range(plan.num_slots))
    return all(values[r][pos[r]] == total for r in group)


def check_plan(plan: P2pPlan, topo: Optional[Topology] = None) -> list[str]:
    """Structural checks: SEND/RECV pairing and (for MESH_HIER) adjacency."""
    problems: list[str] = []
    sends: dict[tuple[int, int, int], list[PlanOp]] = {}
    recvs: dict[tuple[int, int, int], list[PlanOp]] = {}
    for r, ops in plan.ops.items():
        for op in ops:
            key = (r, op.peer, op.chunk) if op.kind == NodeKind.SEND else (op.peer, r, op.chunk)
            (sends if op.kind == NodeKind.SEND else recvs).setdefault(key, []).append(op)
    for key in set(sends) | set(recvs):
        ss, rr = sends.get(key, []), recvs.get(key, [])
        if len(ss) != len(rr):
            problems.append(f"channel {key}: {len(ss)} sends vs {len(rr)} recvs")
            continue
        for a, b in zip(ss, rr):
            if a.nbytes != b.nbytes or a.step != b.step:
                problems.append(f"channel {key}: mismatched send/recv ({a} vs {b})")
    if plan.algo == CollectiveAlgo.MESH_HIER and topo is not None:
        for r, ops in plan.ops.items():
            for op in ops:
                if not topo.adjacent(r, op.peer):
                    problems.append(f"non-adjacent message {r}->{op.peer}")
    return problems


# ---------------------------------------------------------------------------
# whole-graph expansion


def collective_instances(graphs: list[WorkloadGraph]) -> list[list[Node]]:
    """Match COLL nodes across ranks by order of appearance; verify agreement."""
    per_rank = {g.rank: [n for n in g.nodes if n.kind == NodeKind.COLL] for g in graphs}
    instances: list[list[Node]] = []
    # walk rank by rank; every rank in an instance's group must list the
    # matching collective at the same per-rank position
    order = sorted(per_rank)
    idx = {r: 0 for r in order}
    while True:
        start = None
        for r in order:
            if idx[r] < len(per_rank[r]):
                start = r
                break
        if start is None:
            return instances
        lead = per_rank[start][idx[start]]
        members = [lead]
        for r in lead.coll.group:
            if r == start:
                continue
            if r not in per_rank or idx[r] >= len(per_rank[r]):
                raise InconsistentGroupsError(
                    f"rank {r} is missing collective #{idx.get(r, 0)} of group {lead.coll.group}")
            other = per_rank[r][idx[r]]
            if (other.coll.kind != lead.coll.kind
                    or other.coll.group != lead.coll.group
                    or other.coll.comm_bytes != lead.coll.comm_bytes):
                raise InconsistentGroupsError(
                    f"rank {r} node {other.node_id} disagrees with rank {start} node "
                    f"{lead.node_id}: {other.coll} vs {lead.coll}")
            members.append(other)
        for r in lead.coll.group:
            idx[r] += 1
        instances.append(members)


def expand_collectives(graphs: list[WorkloadGraph], algo: CollectiveAlgo,
                       topo: Topology) -> list[WorkloadGraph]:
    """Replace every COLL node by its plan's SEND/RECV chain for that rank.

    The collective's data/ctrl deps move onto the first-step ops, its output
    tensors onto the final op; dependents of the collective are rewired to the
    final op through the id remap. Step ordering is expressed with data_deps
    between consecutive step layers.
    """
    instances = collective_instances(graphs)
    plans: dict[int, P2pPlan] = {}
    node_to_instance: dict[tuple[int, int], int] = {}
    for i, members in enumerate(instances):
        plans[i] = expand(members[0], algo, topo)
        for r, m in zip(members[0].coll.group, members):
            node_to_instance[(r, m.node_id)] = i

    out: list[WorkloadGraph] = []
    for g in graphs:
        new_nodes: list[Node] = []
        id_map: dict[int, int] = {}
        next_id = 0
        # first pass: allot ids
        spans: dict[int, tuple[int, int]] = {}
        for n in g.nodes:
            key = (g.rank, n.node_id)
            if n.kind == NodeKind.COLL and key in node_to_instance:
                plan = plans[node_to_instance[key]]
                count = len(plan.ops.get(g.rank, []))
                spans[n.node_id] = (next_id, count)
                id_map[n.node_id] = next_id + count - 1   # deps on the collective see the last op
                next_id += count
            else:
                id_map[n.node_id] = next_id
                next_id += 1

        def remap(ids):
            return sorted({id_map[d] for d in ids})

        for n in g.nodes:
            key = (g.rank, n.node_id)
            if n.kind != NodeKind.COLL or key not in node_to_instance:
                new_nodes.append(Node(
                    id_map[n.node_id], n.kind, n.op_name,
                    inputs=list(n.inputs), outputs=list(n.outputs),
                    data_deps=remap(n.data_deps),
                    ctrl_deps=sorted({(id_map[d], lbl) for d, lbl in n.ctrl_deps}),
                    duration_ns=n.duration_ns, coll=n.coll, p2p=n.p2p))
                continue
            plan = plans[node_to_instance[key]]
            ops = plan.ops.get(g.rank, [])
            base, count = spans[n.node_id]
            steps = sorted({o.step for o in ops})
            first_step = steps[0] if steps else 0
            layer_ids: dict[int, list[int]] = {}
            for j, op in enumerate(ops):
                layer_ids.setdefault(op.step, []).append(base + j)
            last_id = base + count - 1
            for j, op in enumerate(ops):
                nid = base + j
                if op.step == first_step:
                    ddeps = remap(n.data_deps)
                    cdeps = sorted({(id_map[d], lbl) for d, lbl in n.ctrl_deps})
                    inputs = list(n.inputs)
                else:
                    prev = steps[steps.index(op.step) - 1]
                    ddeps = sorted(layer_ids[prev])
                    cdeps = []
                    inputs = []
                outputs = []
                if nid == last_id:
                    outputs = list(n.outputs)
                    ddeps = sorted(set(ddeps) | {i for i in layer_ids[op.step] if i != nid})
                new_nodes.append(Node(
                    nid, op.kind, "send" if op.kind == NodeKind.SEND else "recv",
                    inputs=inputs, outputs=outputs, data_deps=ddeps, ctrl_deps=cdeps,
                    p2p=P2pSpec(op.peer, op.nbytes, op.chunk)))
        meta = dict(g.meta)
        meta["passes"] = list(meta.get("passes", [])) + [
            {"pass": "expand_collectives", "algo": algo.value}]
        out.append(WorkloadGraph(g.rank, g.world_size, new_nodes, dict(g.tensors), meta))
    return out
