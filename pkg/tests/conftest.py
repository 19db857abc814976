"""Shared builders for the test suite."""

import random
from pathlib import Path

import pytest

from trainsim import (
    CollectiveKind,
    CollSpec,
    Dtype,
    Node,
    NodeKind,
    P2pSpec,
    TensorMeta,
    WorkloadGraph,
)

FIXTURES = Path(__file__).parent / "fixtures"


class GraphBuilder:
    """Hand-assemble small graphs for oracle tests."""

    def __init__(self, rank: int = 0, world_size: int = 1, dtype: Dtype = Dtype.F32):
        self.rank = rank
        self.world_size = world_size
        self.dtype = dtype
        self.nodes: list[Node] = []
        self.tensors: dict[int, TensorMeta] = {}
        self.inputs: list[int] = []

    def tensor(self, shape=None, nbytes=None) -> int:
        tid = len(self.tensors)
        if shape is None:
            # shape carrying exactly nbytes of f32; caller keeps sizes /4
            shape = [nbytes // 4] if nbytes else [1]
        self.tensors[tid] = TensorMeta.make(tid, shape, self.dtype)
        return tid

    def input_tensor(self, shape=None, nbytes=None) -> int:
        tid = self.tensor(shape, nbytes)
        self.inputs.append(tid)
        return tid

    def comp(self, dur, inputs=(), deps=(), out_shape=(1,), op="work") -> int:
        out = self.tensor(list(out_shape))
        n = Node(len(self.nodes), NodeKind.COMP, op, inputs=list(inputs), outputs=[out],
                 data_deps=sorted(set(deps)), duration_ns=dur)
        self.nodes.append(n)
        return n.node_id

    def host(self, op="launch") -> int:
        n = Node(len(self.nodes), NodeKind.HOST, op)
        self.nodes.append(n)
        return n.node_id

    def coll(self, kind, comm_bytes, group, inputs=(), deps=(), op=None) -> int:
        out = self.tensor(nbytes=comm_bytes)
        n = Node(len(self.nodes), NodeKind.COLL, op or kind.value,
                 inputs=list(inputs), outputs=[out], data_deps=sorted(set(deps)),
                 coll=CollSpec(kind, list(group), comm_bytes))
        self.nodes.append(n)
        return n.node_id

    def send(self, peer, nbytes, tag=0, deps=()) -> int:
        n = Node(len(self.nodes), NodeKind.SEND, "send", data_deps=sorted(set(deps)),
                 p2p=P2pSpec(peer, nbytes, tag))
        self.nodes.append(n)
        return n.node_id

    def recv(self, peer, nbytes, tag=0, deps=()) -> int:
        n = Node(len(self.nodes), NodeKind.RECV, "recv", data_deps=sorted(set(deps)),
                 p2p=P2pSpec(peer, nbytes, tag))
        self.nodes.append(n)
        return n.node_id

    def out_of(self, node_id: int) -> int:
        return self.nodes[node_id].outputs[0]

    def build(self) -> WorkloadGraph:
        return WorkloadGraph(rank=self.rank, world_size=self.world_size,
                             nodes=self.nodes, tensors=self.tensors,
                             meta={"source": "test", "graph_inputs": self.inputs})


def random_rank_graph(seed: int) -> WorkloadGraph:
    """Single-rank DAG of HOST+COMP pairs with random fan-in."""
    rng = random.Random(seed)
    b = GraphBuilder()
    produced: list[int] = [b.input_tensor([4])]
    for _ in range(rng.randint(1, 12)):
        k = rng.randint(0, min(3, len(produced)))
        ins = rng.sample(produced, k)
        dep_ids = []
        for t in ins:
            for n in b.nodes:
                if t in n.outputs:
                    dep_ids.append(n.node_id)
        h = b.host()
        c = b.comp(rng.randint(0, 500), inputs=ins, deps=dep_ids)
        b.nodes[c].ctrl_deps = [(h, "launch")]
        produced.append(b.out_of(c))
    return b.build()


def random_world_graphs(seed: int) -> list[WorkloadGraph]:
    """Symmetric multi-rank graphs: compute chains with ALL_REDUCE barriers."""
    rng = random.Random(seed)
    world = rng.choice([2, 3, 4])
    segments = rng.randint(1, 3)
    durs = [[rng.randint(1, 400) for _ in range(rng.randint(1, 4))]
            for _ in range(segments)]
    sizes = [rng.randrange(4, 4096, 4) for _ in range(segments)]
    out = []
    for rank in range(world):
        b = GraphBuilder(rank=rank, world_size=world)
        last = None
        for seg, (ds, nbytes) in enumerate(zip(durs, sizes)):
            for d in ds:
                deps = [last] if last is not None else []
                last = b.comp(d, inputs=[b.out_of(last)] if last is not None else [],
                              deps=deps)
            h = b.host()
            c = b.coll(CollectiveKind.ALL_REDUCE, nbytes, list(range(world)),
                       inputs=[b.out_of(last)], deps=[last])
            b.nodes[c].ctrl_deps = [(h, "launch")]
            last = c
        out.append(b.build())
    return out


@pytest.fixture
def builder():
    return GraphBuilder()
