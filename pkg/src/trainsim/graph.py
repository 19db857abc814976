"""Framework-neutral per-rank workload graphs.

A workload graph is one rank's training-step program: host-side launch nodes,
device compute kernels, and communication nodes, joined by explicit data and
control dependencies. Graphs are plain values; passes and converters build new
graphs instead of mutating.
"""

from __future__ import annotations

import heapq
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional


class Dtype(Enum):
    F32 = "f32"
    F16 = "f16"
    BF16 = "bf16"
    I64 = "i64"
    I32 = "i32"
    BOOL = "bool"

    @property
    def byte_width(self) -> int:
        return _BYTE_WIDTHS[self]


_BYTE_WIDTHS = {
    Dtype.F32: 4,
    Dtype.F16: 2,
    Dtype.BF16: 2,
    Dtype.I64: 8,
    Dtype.I32: 4,
    Dtype.BOOL: 1,
}


class NodeKind(Enum):
    HOST = "HOST"
    COMP = "COMP"
    COLL = "COLL"
    SEND = "SEND"
    RECV = "RECV"


class CollectiveKind(Enum):
    ALL_REDUCE = "ALL_REDUCE"
    ALL_GATHER = "ALL_GATHER"
    REDUCE_SCATTER = "REDUCE_SCATTER"


class OpClass(Enum):
    MM = "mm"
    ATTN = "attn"
    ELEMENTWISE = "elementwise"
    ALL_REDUCE = "all_reduce"
    ALL_GATHER = "all_gather"
    REDUCE_SCATTER = "reduce_scatter"
    OTHER = "other"


def tensor_bytes(shape: list[int], dtype: Dtype) -> int:
    return math.prod(shape) * dtype.byte_width


@dataclass
class TensorMeta:
    tensor_id: int
    shape: list[int]
    dtype: Dtype
    bytes: int

    @classmethod
    def make(cls, tensor_id: int, shape: list[int], dtype: Dtype) -> "TensorMeta":
        return cls(tensor_id, list(shape), dtype, tensor_bytes(shape, dtype))


@dataclass
class CollSpec:
    kind: CollectiveKind
    group: list[int]          # ordered global ranks participating
    comm_bytes: int           # bytes of the input tensor (shard for ALL_GATHER)


@dataclass
class P2pSpec:
    peer_rank: int
    comm_bytes: int
    channel_tag: int


@dataclass
class Node:
    node_id: int
    kind: NodeKind
    op_name: str
    inputs: list[int] = field(default_factory=list)
    outputs: list[int] = field(default_factory=list)
    data_deps: list[int] = field(default_factory=list)
    ctrl_deps: list[tuple[int, str]] = field(default_factory=list)
    duration_ns: Optional[int] = None
    coll: Optional[CollSpec] = None
    p2p: Optional[P2pSpec] = None

    def dep_ids(self) -> list[int]:
        return list(self.data_deps) + [d for d, _ in self.ctrl_deps]


@dataclass
class WorkloadGraph:
    rank: int
    world_size: int
    nodes: list[Node]
    tensors: dict[int, TensorMeta]
    meta: dict

    def node_map(self) -> dict[int, Node]:
        return {n.node_id: n for n in self.nodes}

    def producers(self) -> dict[int, int]:
        """tensor_id -> node_id of the node producing it."""
        out: dict[int, int] = {}
        for n in self.nodes:
            for t in n.outputs:
                out.setdefault(t, n.node_id)
        return out

    def graph_inputs(self) -> set[int]:
        return set(self.meta.get("graph_inputs", []))


@dataclass
class Violation:
    rule: str
    detail: str
    node_id: Optional[int] = None
    tensor_id: Optional[int] = None

    def __str__(self) -> str:
        where = []
        if self.node_id is not None:
            where.append(f"node {self.node_id}")
        if self.tensor_id is not None:
            where.append(f"tensor {self.tensor_id}")
        loc = " @ ".join(where) if where else "graph"
        return f"[{self.rule}] {loc}: {self.detail}"


def validate_graph(g: WorkloadGraph) -> list[Violation]:
    """Check every structural invariant; returns all violations found."""
    out: list[Violation] = []
    seen_ids: set[int] = set()
    for n in g.nodes:
        if n.node_id in seen_ids:
            out.append(Violation("duplicate-node-id", "node_id appears twice", node_id=n.node_id))
        seen_ids.add(n.node_id)
    node_map = {n.node_id: n for n in g.nodes}
    inputs_flag = g.graph_inputs()

    # tensor table checks
    for tid, tm in g.tensors.items():
        if tid != tm.tensor_id:
            out.append(Violation("tensor-id-mismatch", f"table key {tid} != tensor_id {tm.tensor_id}", tensor_id=tid))
        if not tm.shape or any(d <= 0 for d in tm.shape):
            out.append(Violation("tensor-shape", f"shape must be non-empty positive ints, got {tm.shape}", tensor_id=tid))
        elif tm.bytes != tensor_bytes(tm.shape, tm.dtype):
            out.append(Violation(
                "tensor-bytes",
                f"bytes {tm.bytes} != prod(shape)*width {tensor_bytes(tm.shape, tm.dtype)}",
                tensor_id=tid))

    producers: dict[int, list[int]] = {}
    for n in g.nodes:
        for t in n.outputs:
            producers.setdefault(t, []).append(n.node_id)
    for tid, ps in producers.items():
        if len(ps) > 1:
            out.append(Violation("multi-producer", f"produced by nodes {ps}", tensor_id=tid))

    for n in g.nodes:
        # optional-field presence tied to kind
        if (n.coll is not None) != (n.kind == NodeKind.COLL):
            out.append(Violation("coll-presence", f"coll attrs on {n.kind.value} node", node_id=n.node_id))
        if (n.p2p is not None) != (n.kind in (NodeKind.SEND, NodeKind.RECV)):
            out.append(Violation("p2p-presence", f"p2p attrs on {n.kind.value} node", node_id=n.node_id))
        if n.duration_ns is not None:
            if n.kind != NodeKind.COMP:
                out.append(Violation("duration-on-non-comp", f"duration on {n.kind.value} node", node_id=n.node_id))
            elif n.duration_ns < 0:
                out.append(Violation("negative-duration", f"duration {n.duration_ns}", node_id=n.node_id))

        for dep in n.dep_ids():
            if dep not in node_map:
                out.append(Violation("dangling-dep", f"dep on missing node {dep}", node_id=n.node_id))
            elif dep == n.node_id:
                out.append(Violation("self-dep", "node depends on itself", node_id=n.node_id))

        for tid in list(n.inputs) + list(n.outputs):
            if tid not in g.tensors:
                out.append(Violation("unknown-tensor", f"references tensor {tid} not in table", node_id=n.node_id, tensor_id=tid))

        # data deps must be exactly the producers of the inputs; sanctioned
        # extras are deps on HOST launch twins (dual dependency for waited
        # collective results) and on SEND/RECV plan ops (step ordering
        # inside an expanded collective).
        required = set()
        for tid in n.inputs:
            ps = producers.get(tid, [])
            if ps:
                required.add(ps[0])
            elif tid not in inputs_flag and tid in g.tensors:
                out.append(Violation("missing-producer", "consumed tensor has no producer and is not a graph input",
                                     node_id=n.node_id, tensor_id=tid))
        dset = set(n.data_deps)
        for missing in sorted(required - dset):
            out.append(Violation("missing-data-dep", f"input producer {missing} not in data_deps", node_id=n.node_id))
        for extra in sorted(dset - required):
            dep_node = node_map.get(extra)
            if dep_node is not None and dep_node.kind not in (NodeKind.HOST, NodeKind.SEND, NodeKind.RECV):
                out.append(Violation("spurious-data-dep", f"data_dep {extra} is not an input producer", node_id=n.node_id))

        if n.coll is not None:
            if not n.coll.group:
                out.append(Violation("empty-group", "collective group is empty", node_id=n.node_id))
            else:
                if g.rank not in n.coll.group:
                    out.append(Violation("rank-not-in-group", f"rank {g.rank} not in group {n.coll.group}", node_id=n.node_id))
                if any(r < 0 or r >= g.world_size for r in n.coll.group):
                    out.append(Violation("group-out-of-range", f"group {n.coll.group} outside world {g.world_size}", node_id=n.node_id))
            if n.coll.comm_bytes < 0:
                out.append(Violation("negative-comm-bytes", str(n.coll.comm_bytes), node_id=n.node_id))
        if n.p2p is not None:
            if n.p2p.peer_rank == g.rank or not (0 <= n.p2p.peer_rank < g.world_size):
                out.append(Violation("bad-peer", f"peer {n.p2p.peer_rank}", node_id=n.node_id))

    cycle = _find_cycle(g.nodes, node_map)
    if cycle:
        out.append(Violation("cycle", "dependency cycle through nodes " + "->".join(str(i) for i in cycle)))
    return out


def _find_cycle(nodes: list[Node], node_map: dict[int, Node]) -> Optional[list[int]]:
    """Iterative DFS over the combined data+ctrl edges; returns one cycle if any."""
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {n.node_id: WHITE for n in nodes}
    parent: dict[int, int] = {}
    for root in node_map:
        if color[root] != WHITE:
            continue
        stack = [(root, iter(node_map[root].dep_ids()))]
        color[root] = GRAY
        while stack:
            nid, it = stack[-1]
            advanced = False
            for dep in it:
                if dep not in color or dep == nid:
                    continue
                if color[dep] == GRAY:
                    # unwind the gray chain to report the cycle
                    cyc = [dep, nid]
                    cur = nid
                    while cur in parent and parent[cur] != dep:
                        cur = parent[cur]
                        cyc.append(cur)
                    return list(reversed(cyc))
                if color[dep] == WHITE:
                    color[dep] = GRAY
                    parent[dep] = nid
                    stack.append((dep, iter(node_map[dep].dep_ids())))
                    advanced = True
                    break
            if not advanced:
                color[nid] = BLACK
                stack.pop()
    return None


def topo_order(g: WorkloadGraph) -> list[int]:
    """Deterministic topological order: Kahn's algorithm, lowest node_id first."""
    from .errors import CyclicGraphError

    node_map = g.node_map()
    indeg = {nid: 0 for nid in node_map}
    succ: dict[int, list[int]] = {nid: [] for nid in node_map}
    for n in g.nodes:
        for dep in set(n.dep_ids()):
            if dep in node_map:
                indeg[n.node_id] += 1
                succ[dep].append(n.node_id)
    ready = [nid for nid, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order: list[int] = []
    while ready:
        nid = heapq.heappop(ready)
        order.append(nid)
        for s in succ[nid]:
            indeg[s] -= 1
            if indeg[s] == 0:
                heapq.heappush(ready, s)
    if len(order) != len(node_map):
        raise CyclicGraphError("graph has a dependency cycle; no topological order")
    return order


_MM_NAMES = {"mm", "addmm", "bmm", "matmul", "linear", "baddbmm"}
_ATTN_MARKERS = ("scaled_dot_product_attention", "attention", "sdpa")
_ELEMENTWISE_NAMES = {
    "add", "sub", "mul", "div", "neg", "relu", "gelu", "silu", "sigmoid", "tanh",
    "exp", "log", "softmax", "_softmax", "log_softmax", "layer_norm", "native_layer_norm",
    "rms_norm", "dropout", "sum", "mean", "ones_like", "zeros_like", "fill", "copy",
    "threshold", "threshold_backward", "embedding", "where", "pow", "rsqrt", "sqrt",
}


def classify_op(op_name: str) -> OpClass:
    """Bucket a compute op name into a histogram class."""
    base = op_name
    for suffix in ("_backward", "_grad"):
        if base.endswith(suffix):
            base = base[: -len(suffix)]
    if any(m in base for m in _ATTN_MARKERS):
        return OpClass.ATTN
    if base in _MM_NAMES:
        return OpClass.MM
    if base in _ELEMENTWISE_NAMES:
        return OpClass.ELEMENTWISE
    return OpClass.OTHER


_COLL_CLASS = {
    CollectiveKind.ALL_REDUCE: OpClass.ALL_REDUCE,
    CollectiveKind.ALL_GATHER: OpClass.ALL_GATHER,
    CollectiveKind.REDUCE_SCATTER: OpClass.REDUCE_SCATTER,
}


def op_histogram(g: WorkloadGraph) -> dict[OpClass, int]:
    """Count logical operations per class.

    HOST launch twins are skipped so each kernel or collective counts once;
    SEND/RECV from expanded plans fall into OTHER.
    """
    counts: Counter[OpClass] = Counter()
    for n in g.nodes:
        if n.kind == NodeKind.HOST:
            continue
        if n.kind == NodeKind.COLL:
            counts[_COLL_CLASS[n.coll.kind]] += 1
        elif n.kind == NodeKind.COMP:
            counts[classify_op(n.op_name)] += 1
        else:
            counts[OpClass.OTHER] += 1
    return {cls: counts.get(cls, 0) for cls in OpClass}


def compare_histograms(a: dict[OpClass, int], b: dict[OpClass, int]) -> dict[OpClass, float]:
    """Per-class count ratio a/b; 1.0 where both absent, inf where only b is zero."""
    out: dict[OpClass, float] = {}
    for cls in OpClass:
        ca = a.get(cls, 0)
        cb = b.get(cls, 0)
        if ca == 0 and cb == 0:
            out[cls] = 1.0
        elif cb == 0:
            out[cls] = float("inf")
        else:
            out[cls] = ca / cb
    return out
