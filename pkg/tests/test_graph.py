import pytest

from trainsim import (
    CollectiveKind,
    CollSpec,
    CyclicGraphError,
    Dtype,
    Node,
    NodeKind,
    OpClass,
    TensorMeta,
    classify_op,
    compare_histograms,
    op_histogram,
    tensor_bytes,
    topo_order,
    validate_graph,
)

from conftest import GraphBuilder


def test_dtype_widths():
    assert Dtype.F32.byte_width == 4
    assert Dtype.F16.byte_width == 2
    assert Dtype.BF16.byte_width == 2
    assert Dtype.I64.byte_width == 8
    assert Dtype.I32.byte_width == 4
    assert Dtype.BOOL.byte_width == 1


def test_tensor_bytes():
    assert tensor_bytes([4, 8], Dtype.F32) == 128
    assert tensor_bytes([3], Dtype.BF16) == 6
    assert tensor_bytes([2, 2, 2], Dtype.BOOL) == 8


def test_tensor_meta_make_freezes_bytes():
    tm = TensorMeta.make(7, [16, 16], Dtype.F16)
    assert tm.tensor_id == 7 and tm.bytes == 512


def rules(g):
    return {v.rule for v in validate_graph(g)}


def test_validate_clean_graph(builder):
    t = builder.input_tensor([4])
    a = builder.comp(10, inputs=[t])
    builder.comp(5, inputs=[builder.out_of(a)], deps=[a])
    assert validate_graph(builder.build()) == []


def test_validate_duplicate_node_id(builder):
    builder.comp(1)
    builder.comp(1)
    builder.nodes[1].node_id = 0
    assert "duplicate-node-id" in rules(builder.build())


def test_validate_dangling_dep(builder):
    builder.comp(1, deps=[99])
    assert "dangling-dep" in rules(builder.build())


def test_validate_self_dep(builder):
    n = builder.comp(1)
    builder.nodes[n].data_deps = [n]
    assert "self-dep" in rules(builder.build())


def test_validate_unknown_tensor(builder):
    builder.comp(1, inputs=[42])
    r = rules(builder.build())
    assert "unknown-tensor" in r


def test_validate_missing_producer(builder):
    t = builder.tensor([4])   # not a graph input, nobody writes it
    builder.comp(1, inputs=[t])
    assert "missing-producer" in rules(builder.build())


def test_validate_missing_data_dep(builder):
    t = builder.input_tensor([4])
    a = builder.comp(2, inputs=[t])
    builder.comp(3, inputs=[builder.out_of(a)], deps=[])   # consumer skips producer
    assert "missing-data-dep" in rules(builder.build())


def test_validate_spurious_data_dep(builder):
    builder.comp(1)
    b = builder.comp(2, deps=[0])   # no tensor justifies this edge
    assert "spurious-data-dep" in rules(builder.build())
    assert b == 1


def test_validate_extra_dep_on_host_allowed(builder):
    h = builder.host()
    builder.comp(1, deps=[h])
    assert validate_graph(builder.build()) == []


def test_validate_duration_on_non_comp(builder):
    h = builder.host()
    builder.nodes[h].duration_ns = 5
    assert "duration-on-non-comp" in rules(builder.build())


def test_validate_negative_duration(builder):
    builder.comp(-1)
    assert "negative-duration" in rules(builder.build())


def test_validate_coll_presence(builder):
    n = builder.comp(1)
    builder.nodes[n].coll = CollSpec(CollectiveKind.ALL_REDUCE, [0, 1], 4)
    assert "coll-presence" in rules(builder.build())


def test_validate_group_rules():
    b = GraphBuilder(rank=0, world_size=2)
    b.coll(CollectiveKind.ALL_REDUCE, 8, [1])       # too small, rank missing
    out = rules(b.build())
    assert "empty-group" in out or "rank-not-in-group" in out

    b = GraphBuilder(rank=0, world_size=2)
    b.coll(CollectiveKind.ALL_REDUCE, 8, [0, 5])    # 5 outside world
    assert "group-out-of-range" in rules(b.build())


def test_validate_negative_comm_bytes():
    b = GraphBuilder(rank=0, world_size=2)
    n = b.coll(CollectiveKind.ALL_REDUCE, 8, [0, 1])
    b.nodes[n].coll.comm_bytes = -1
    assert "negative-comm-bytes" in rules(b.build())


def test_validate_multi_producer(builder):
    a = builder.comp(1)
    b = builder.comp(1)
    builder.nodes[b].outputs = list(builder.nodes[a].outputs)
    assert "multi-producer" in rules(builder.build())


def test_validate_cycle(builder):
    a = builder.comp(1)
    b = builder.comp(1, deps=[a])
    builder.nodes[a].data_deps = [b]
    assert "cycle" in rules(builder.build())


def test_topo_order_deterministic(builder):
    t = builder.input_tensor([1])
    a = builder.comp(1, inputs=[t])
    b = builder.comp(1, inputs=[t])
    c = builder.comp(1, inputs=[builder.out_of(a), builder.out_of(b)], deps=[a, b])
    g = builder.build()
    assert topo_order(g) == [a, b, c]
    assert topo_order(g) == topo_order(g)


def test_topo_order_raises_on_cycle(builder):
    a = builder.comp(1)
    b = builder.comp(1, deps=[a])
    builder.nodes[a].data_deps = [b]
    with pytest.raises(CyclicGraphError):
        topo_order(builder.build())


@pytest.mark.parametrize("op,cls", [
    ("mm", OpClass.MM),
    ("addmm", OpClass.MM),
    ("bmm", OpClass.MM),
    ("matmul", OpClass.MM),
    ("linear", OpClass.MM),
    ("addmm_backward", OpClass.MM),
    ("scaled_dot_product_attention", OpClass.ATTN),
    ("scaled_dot_product_attention_backward", OpClass.ATTN),
    ("add", OpClass.ELEMENTWISE),
    ("gelu_backward", OpClass.ELEMENTWISE),
    ("softmax", OpClass.ELEMENTWISE),
    ("mystery_op", OpClass.OTHER),
])
def test_classify_op(op, cls):
    assert classify_op(op) == cls


def test_op_histogram_counts():
    b = GraphBuilder(rank=0, world_size=2)
    t = b.input_tensor([4])
    m = b.comp(1, inputs=[t], op="addmm")
    b.comp(1, inputs=[b.out_of(m)], deps=[m], op="relu")
    h = b.host()
    c = b.coll(CollectiveKind.ALL_REDUCE, 16, [0, 1], inputs=[b.out_of(m)], deps=[m])
    b.nodes[c].ctrl_deps = [(h, "launch")]
    hist = op_histogram(b.build())
    assert hist[OpClass.MM] == 1
    assert hist[OpClass.ELEMENTWISE] == 1
    assert hist[OpClass.ALL_REDUCE] == 1
    assert hist[OpClass.ALL_GATHER] == 0
    assert hist[OpClass.ATTN] == 0


def test_compare_histograms():
    a = {OpClass.MM: 4, OpClass.ATTN: 0, OpClass.ALL_REDUCE: 2}
    b = {OpClass.MM: 2, OpClass.ATTN: 0, OpClass.ALL_REDUCE: 0}
    r = compare_histograms(a, b)
    assert r[OpClass.MM] == 2.0
    assert r[OpClass.ATTN] == 1.0
    assert r[OpClass.ALL_REDUCE] == float("inf")
