import pytest

from trainsim import (
    CollectiveAlgo,
    CollectiveKind,
    DeadlockError,
    InconsistentGroupsError,
    Topology,
    UnsupportedAlgoTopologyError,
    analytical_time,
    check_plan,
    collective_instances,
    dataflow_check,
    expand,
    expand_collectives,
    simulate,
    validate_graph,
    wire_bytes,
)
from trainsim.graph import NodeKind

from conftest import GraphBuilder, random_world_graphs

KINDS = [CollectiveKind.ALL_REDUCE, CollectiveKind.ALL_GATHER,
         CollectiveKind.REDUCE_SCATTER]

# smallest mesh holding each rank count
MESHES = {2: (1, 2), 4: (2, 2), 6: (2, 3), 8: (2, 4), 9: (3, 3)}


def make_coll(kind, n, comm_bytes=1000):
    b = GraphBuilder(rank=0, world_size=n)
    nid = b.coll(kind, comm_bytes, list(range(n)))
    return b.nodes[nid]


def topo_for(algo, n, bw=1e9, lat=10):
    if algo == CollectiveAlgo.MESH_HIER:
        rows, cols = MESHES[n]
        return Topology.mesh2d(rows, cols, bw, lat)
    return Topology.switch(n, bw, lat)


def valid_combo(kind, algo, n):
    if algo == CollectiveAlgo.TREE and kind != CollectiveKind.ALL_REDUCE:
        return False
    if algo == CollectiveAlgo.MESH_HIER and n not in MESHES:
        return False
    return True


@pytest.mark.parametrize("algo", list(CollectiveAlgo))
@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("n", range(2, 10))
def test_dataflow_all_combos(kind, algo, n):
    if not valid_combo(kind, algo, n):
        pytest.skip("combo undefined by construction")
    plan = expand(make_coll(kind, n), algo, topo_for(algo, n))
    assert dataflow_check(plan) is True
    assert check_plan(plan, topo_for(algo, n)) == []


@pytest.mark.parametrize("n", range(2, 10))
def test_ring_allreduce_message_count(n):
    plan = expand(make_coll(CollectiveKind.ALL_REDUCE, n),
                  CollectiveAlgo.RING, topo_for(CollectiveAlgo.RING, n))
    for r in range(n):
        assert plan.send_count(r) == 2 * (n - 1)


@pytest.mark.parametrize("n", range(2, 10))
@pytest.mark.parametrize("s", [1000, 997])
def test_ring_allreduce_bytes_near_closed_form(n, s):
    plan = expand(make_coll(CollectiveKind.ALL_REDUCE, n, comm_bytes=s),
                  CollectiveAlgo.RING, topo_for(CollectiveAlgo.RING, n))
    ideal = 2 * s * (n - 1) / n
    for r in range(n):
        assert abs(plan.bytes_sent(r) - ideal) <= n


def test_tree_rejects_non_allreduce():
    with pytest.raises(UnsupportedAlgoTopologyError):
        expand(make_coll(CollectiveKind.ALL_GATHER, 4),
               CollectiveAlgo.TREE, topo_for(CollectiveAlgo.TREE, 4))


def test_mesh_hier_requires_mesh():
    with pytest.raises(UnsupportedAlgoTopologyError):
        expand(make_coll(CollectiveKind.ALL_REDUCE, 4),
               CollectiveAlgo.MESH_HIER, Topology.switch(4, 1e9, 10))


def test_mesh_hier_messages_are_single_hop():
    topo = Topology.mesh2d(3, 3, 1e9, 10)
    for kind in KINDS:
        plan = expand(make_coll(kind, 9), CollectiveAlgo.MESH_HIER, topo)
        for r, ops in plan.ops.items():
            for op in ops:
                assert topo.adjacent(r, op.peer), (kind, r, op.peer)


def test_dataflow_catches_missing_recv():
    plan = expand(make_coll(CollectiveKind.ALL_REDUCE, 4),
                  CollectiveAlgo.RING, topo_for(CollectiveAlgo.RING, 4))
    # drop one RECV: the payload is never consumed, the result is wrong
    ops = plan.ops[2]
    victim = next(i for i, op in enumerate(ops) if op.kind == NodeKind.RECV)
    del ops[victim]
    assert dataflow_check(plan) is False


def test_dataflow_catches_missing_send():
    plan = expand(make_coll(CollectiveKind.ALL_REDUCE, 4),
                  CollectiveAlgo.RING, topo_for(CollectiveAlgo.RING, 4))
    # drop one SEND: the matching RECV stalls the schedule
    ops = plan.ops[2]
    victim = next(i for i, op in enumerate(ops) if op.kind == NodeKind.SEND)
    del ops[victim]
    with pytest.raises(DeadlockError):
        dataflow_check(plan)


# closed forms, hand-computed with alpha=10 ns, beta=1 ns/byte


def test_analytical_ring_allreduce():
    # 2(N-1)a + 2S(N-1)/N * b = 60 + 1500
    got = analytical_time(CollectiveKind.ALL_REDUCE, 1000, 4,
                          CollectiveAlgo.RING, 10, 1.0)
    assert got == 1560


def test_analytical_ring_gather_scatter():
    # (N-1)a + S(N-1)/N * b = 30 + 750
    for kind in (CollectiveKind.ALL_GATHER, CollectiveKind.REDUCE_SCATTER):
        assert analytical_time(kind, 1000, 4, CollectiveAlgo.RING, 10, 1.0) == 780


def test_analytical_tree_allreduce():
    # 2*ceil(log2 5)*a + 2S*b = 60 + 2000
    got = analytical_time(CollectiveKind.ALL_REDUCE, 1000, 5,
                          CollectiveAlgo.TREE, 10, 1.0)
    assert got == 2060


def test_analytical_mesh_allreduce():
    # row RS (cols=2): 10 + 500 = 510; col AR on S/2: 20 + 500 = 520; sweep 510
    got = analytical_time(CollectiveKind.ALL_REDUCE, 1000, 4,
                          CollectiveAlgo.MESH_HIER, 10, 1.0, mesh_shape=(2, 2))
    assert got == 1540


def test_analytical_single_rank_is_free():
    assert analytical_time(CollectiveKind.ALL_REDUCE, 1000, 1,
                           CollectiveAlgo.RING, 10, 1.0) == 0


def test_analytical_rounds_half_up():
    # N=3, S=100: 2*2*0 + 2*(2/3)*100 = 133.33 -> 133
    got = analytical_time(CollectiveKind.ALL_REDUCE, 100, 3,
                          CollectiveAlgo.RING, 0, 1.0)
    assert got == 133


def test_wire_bytes_ring():
    s = 1200
    assert wire_bytes(CollectiveKind.ALL_REDUCE, s, 4, CollectiveAlgo.RING) == 2 * 3 * s
    assert wire_bytes(CollectiveKind.ALL_GATHER, s, 4, CollectiveAlgo.RING) == 4 * 3 * s
    assert wire_bytes(CollectiveKind.REDUCE_SCATTER, s, 4, CollectiveAlgo.RING) == 3 * s


def test_wire_bytes_tree():
    assert wire_bytes(CollectiveKind.ALL_REDUCE, 500, 8, CollectiveAlgo.TREE) == 2 * 7 * 500


def test_wire_bytes_matches_plans():
    """The closed-form totals agree with actual plan bytes for RING."""
    for kind in KINDS:
        for n in (2, 3, 4, 8):
            plan = expand(make_coll(kind, n, comm_bytes=n * 128),
                          CollectiveAlgo.RING, topo_for(CollectiveAlgo.RING, n))
            total = sum(plan.bytes_sent(r) for r in range(n))
            assert total == wire_bytes(kind, n * 128, n, CollectiveAlgo.RING)


def test_expand_rejects_plain_nodes():
    b = GraphBuilder()
    nid = b.comp(5)
    with pytest.raises(ValueError):
        expand(b.nodes[nid], CollectiveAlgo.RING, Topology.switch(2, 1e9, 10))


# whole-graph expansion


def test_expand_collectives_structure():
    gs = random_world_graphs(11)
    n = gs[0].world_size
    topo = Topology.switch(n, 1e9, 100)
    ex = expand_collectives(gs, CollectiveAlgo.RING, topo)
    for g in ex:
        assert validate_graph(g) == []
        assert not any(x.kind == NodeKind.COLL for x in g.nodes)
        sends = sum(1 for x in g.nodes if x.kind == NodeKind.SEND)
        colls = sum(1 for x in gs[g.rank].nodes if x.kind == NodeKind.COLL)
        assert sends == colls * 2 * (n - 1)
        assert g.meta["passes"][-1]["pass"] == "expand_collectives"


def test_expand_collectives_preserves_makespan_consumers():
    """Dependents of a collective wait for its whole plan."""
    gs = random_world_graphs(5)
    topo = Topology.switch(gs[0].world_size, 1e9, 100)
    ex = expand_collectives(gs, CollectiveAlgo.RING, topo)
    rep = simulate(ex, topo)
    assert rep.makespan_ns > 0


def test_expand_collectives_deterministic():
    gs = random_world_graphs(7)
    topo = Topology.switch(gs[0].world_size, 1e9, 100)
    from trainsim import dumps_graph
    a = [dumps_graph(g) for g in expand_collectives(gs, CollectiveAlgo.RING, topo)]
    b = [dumps_graph(g) for g in expand_collectives(gs, CollectiveAlgo.RING, topo)]
    assert a == b


def test_collective_instances_mismatch():
    gs = random_world_graphs(9)
    bad = None
    for n in gs[1].nodes:
        if n.kind == NodeKind.COLL:
            n.coll.comm_bytes += 4
            bad = n
            break
    assert bad is not None
    with pytest.raises(InconsistentGroupsError):
        collective_instances(gs)


def test_collective_instances_missing_rank():
    gs = random_world_graphs(9)
    gs[1].nodes = [n for n in gs[1].nodes if n.kind != NodeKind.COLL]
    with pytest.raises(InconsistentGroupsError):
        collective_instances(gs)
