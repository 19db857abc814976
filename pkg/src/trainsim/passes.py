"""Dependency-preserving graph rewrites.

Two scheduling passes operate on a single rank's graph:

* reorder_allgather: prefetches FSDP weight gathers by re-anchoring each
  gather's layer-boundary sync edge k layers earlier ("prefetch-gate"),
  chaining the gathers with "stream-order" edges so issue order survives;
* bucket_allreduce: greedily fuses consecutive gradient ALL_REDUCEs into
  buckets no larger than a byte cap, conserving total bytes.

verify_pass_safety cross-checks a before/after pair: compute work is intact,
every data dependency is still honored (directly or transitively), collective
bytes are conserved per kind, and the result validates.
"""

from __future__ import annotations

from dataclasses import replace

from .graph import (
    CollectiveKind,
    CollSpec,
    Node,
    NodeKind,
    WorkloadGraph,
    topo_order,
    validate_graph,
)

DEFAULT_PREFETCH = 1
DEFAULT_BUCKET_CAP = 25 * 2 ** 20   # 25 MiB


def _ancestor_masks(g: WorkloadGraph) -> dict[int, int]:
    # bit i of masks[n] set iff node i is a strict ancestor of n
    node_map = g.node_map()
    masks: dict[int, int] = {}
    for nid in topo_order(g):
        m = 0
        for d in node_map[nid].dep_ids():
            m |= masks[d] | (1 << d)
        masks[nid] = m
    return masks


def _launch_host(n: Node) -> int | None:
    for d, label in n.ctrl_deps:
        if label == "launch":
            return d
    return None


def reorder_allgather(g: WorkloadGraph, k: int = DEFAULT_PREFETCH) -> tuple[WorkloadGraph, dict]:
    """Prefetch ALL_GATHER weight fetches k layers ahead of their consumers.

    Gathers are paired up by shard tensor: the lower-id gather of a pair is
    the forward one, the higher the backward re-gather. Within each sequence
    the sync anchor list shifts by k, so gather l waits on the compute that
    originally released gather l-k. Forward gathers shifted past the start
    lose their gate; backward ones clamp to the first anchor (end of the
    forward pass) so no weight re-gather can precede it.
    """
    if k < 0:
        raise ValueError("prefetch distance must be non-negative")
    ags = sorted((n for n in g.nodes
                  if n.kind == NodeKind.COLL and n.coll.kind == CollectiveKind.ALL_GATHER),
                 key=lambda n: n.node_id)
    if k == 0 or not ags:
        return g, {"gathers": len(ags), "moved": 0, "k": k}

    by_shard: dict[int, list[Node]] = {}
    for n in ags:
        by_shard.setdefault(n.inputs[0], []).append(n)
    fwd = sorted((grp[0] for grp in by_shard.values()), key=lambda n: n.node_id)
    bwd = sorted((n for grp in by_shard.values() for n in grp[1:]),
                 key=lambda n: n.node_id)

    def sync_anchor(n: Node) -> int | None:
        for d, label in n.ctrl_deps:
            if label in ("fsdp-sync", "prefetch-gate"):
                return d
        return None

    new_nodes = {n.node_id: n for n in g.nodes}
    moved = 0
    chain_prev: int | None = None
    for seq, clamp in ((fwd, False), (bwd, True)):
        anchors = [sync_anchor(n) for n in seq]
        for pos, n in enumerate(seq):
            src = pos - k
            if clamp:
                src = max(src, 0)
            anchor = anchors[src] if src >= 0 else None
            ctrl = [(d, label) for d, label in n.ctrl_deps
                    if label not in ("fsdp-sync", "prefetch-gate", "stream-order")]
            if anchor is not None:
                ctrl.append((anchor, "prefetch-gate"))
            if chain_prev is not None:
                ctrl.append((chain_prev, "stream-order"))
            chain_prev = n.node_id
            if anchor != anchors[pos]:
                moved += 1
            new_nodes[n.node_id] = replace(n, ctrl_deps=ctrl)

    meta = dict(g.meta)
    meta["passes"] = list(meta.get("passes", [])) + [{"pass": "reorder_allgather", "k": k}]
    out = WorkloadGraph(rank=g.rank, world_size=g.world_size,
                        nodes=[new_nodes[i] for i in sorted(new_nodes)],
                        tensors=dict(g.tensors), meta=meta)
    return out, {"gathers": len(ags), "moved": moved, "k": k}


def bucket_allreduce(g: WorkloadGraph, cap_bytes: int = DEFAULT_BUCKET_CAP) -> tuple[WorkloadGraph, dict]:
    """Fuse consecutive ALL_REDUCEs into buckets capped at cap_bytes.

    Candidates are taken in readiness order (increasing node id) and packed
    greedily; a bucket closes when the cap would overflow, the group differs,
    or fusing would create a cycle (a later candidate depending on an earlier
    member's output). The fused node sits at the last member's position so
    every producer still precedes it. Total bytes are conserved.
    """
    if cap_bytes <= 0:
        raise ValueError("bucket cap must be positive")
    ars = [n for n in g.nodes
           if n.kind == NodeKind.COLL and n.coll.kind == CollectiveKind.ALL_REDUCE]
    if len(ars) < 2:
        return g, {"buckets": len(ars), "merged": 0,
                   "bytes": sum(n.coll.comm_bytes for n in ars)}

    masks = _ancestor_masks(g)
    buckets: list[list[Node]] = []
    cur: list[Node] = []
    cur_bytes = 0
    cur_mask = 0          # output-node ids of current members
    for n in ars:
        fits = (cur
                and cur_bytes + n.coll.comm_bytes <= cap_bytes
                and n.coll.group == cur[0].coll.group
                and masks[n.node_id] & cur_mask == 0)
        if fits:
            cur.append(n)
            cur_bytes += n.coll.comm_bytes
        else:
            if cur:
                buckets.append(cur)
            cur, cur_bytes, cur_mask = [n], n.coll.comm_bytes, 0
        cur_mask |= 1 << n.node_id
    buckets.append(cur)

    node_map = g.node_map()
    drop: set[int] = set()
    fused: dict[int, tuple[Node, Node]] = {}   # last member id -> (host, coll)
    alias: dict[int, tuple[int, int]] = {}     # dropped coll id -> (host slot, coll slot)
    for members in buckets:
        if len(members) < 2:
            continue
        last = members[-1]
        host_id = _launch_host(last)
        inputs, outputs, data = [], [], set()
        total = 0
        for m in members:
            inputs += m.inputs
            outputs += m.outputs
            data.update(m.data_deps)
            total += m.coll.comm_bytes
            if m is not last:
                drop.add(m.node_id)
                h = _launch_host(m)
                if h is not None:
                    drop.add(h)
                alias[m.node_id] = (host_id, last.node_id)
                if h is not None:
                    alias[h] = (host_id, last.node_id)
        ctrl = [(d, label) for m in members for d, label in m.ctrl_deps
                if label != "launch" and d not in drop]
        ctrl = [(host_id, "launch")] + sorted(set(ctrl))
        host = replace(node_map[host_id], op_name="all_reduce")
        coll = replace(last, inputs=inputs, outputs=outputs,
                       data_deps=sorted(data - drop), ctrl_deps=ctrl,
                       coll=CollSpec(CollectiveKind.ALL_REDUCE, list(last.coll.group), total))
        fused[last.node_id] = (host, coll)
        fused[host_id] = (host, coll)

    # renumber densely; dropped members point at their bucket's new slots
    id_map: dict[int, int] = {}
    kept: list[Node] = []
    for n in g.nodes:
        if n.node_id in drop:
            continue
        id_map[n.node_id] = len(kept)
        kept.append(fused[n.node_id][1] if (n.node_id in fused and n.kind == NodeKind.COLL)
                    else fused[n.node_id][0] if n.node_id in fused else n)
    for old, (h, c) in alias.items():
        # dropped members land on the bucket's slots, host twin to host twin
        id_map[old] = id_map[h] if node_map[old].kind == NodeKind.HOST else id_map[c]

    out_nodes = []
    for new_id, n in enumerate(kept):
        out_nodes.append(replace(
            n, node_id=new_id,
            data_deps=sorted({id_map[d] for d in n.data_deps}),
            ctrl_deps=sorted({(id_map[d], label) for d, label in n.ctrl_deps})))

    meta = dict(g.meta)
    meta["passes"] = list(meta.get("passes", [])) + [
        {"pass": "bucket_allreduce", "cap_bytes": cap_bytes}]
    out = WorkloadGraph(rank=g.rank, world_size=g.world_size, nodes=out_nodes,
                        tensors=dict(g.tensors), meta=meta)
    total = sum(n.coll.comm_bytes for n in ars)
    return out, {"buckets": len(buckets), "merged": len(ars) - sum(
        1 for n in out_nodes if n.kind == NodeKind.COLL and n.coll.kind == CollectiveKind.ALL_REDUCE),
        "bytes": total}


def verify_pass_safety(before: WorkloadGraph, after: WorkloadGraph) -> list[str]:
    """Check a rewrite preserved work, dataflow, and collective volume.

    Returns human-readable violation strings; empty means safe.
    """
    viol = [f"invalid-after: {v}" for v in validate_graph(after)]
    if viol:
        return viol
    if before.tensors != after.tensors:
        viol.append("tensor-table-changed")

    def comp_key(g: WorkloadGraph):
        return {tuple(n.outputs): (n.op_name, n.duration_ns, tuple(sorted(n.inputs)))
                for n in g.nodes if n.kind == NodeKind.COMP}

    cb, ca = comp_key(before), comp_key(after)
    if cb != ca:
        for k in sorted(set(cb) ^ set(ca)):
            viol.append(f"compute-changed: outputs {list(k)}")
        for k in sorted(set(cb) & set(ca)):
            if cb[k] != ca[k]:
                viol.append(f"compute-changed: outputs {list(k)}")

    def coll_bytes(g: WorkloadGraph) -> dict[str, int]:
        tot: dict[str, int] = {}
        for n in g.nodes:
            if n.kind == NodeKind.COLL:
                tot[n.coll.kind.value] = tot.get(n.coll.kind.value, 0) + n.coll.comm_bytes
        return tot

    if coll_bytes(before) != coll_bytes(after):
        viol.append(f"collective-bytes-changed: {coll_bytes(before)} -> {coll_bytes(after)}")

    producer_after: dict[int, int] = {}
    for n in after.nodes:
        for t in n.outputs:
            producer_after[t] = n.node_id
    try:
        masks = _ancestor_masks(after)
    except Exception as exc:   # cycle already reported by validate; belt and braces
        viol.append(f"after-not-orderable: {exc}")
        return viol

    before_map = before.node_map()
    for v in before.nodes:
        if not v.outputs:
            continue
        img_v = producer_after.get(v.outputs[0])
        if img_v is None:
            viol.append(f"lost-producer: tensor {v.outputs[0]}")
            continue
        for d in v.data_deps:
            u = before_map[d]
            if not u.outputs:
                continue   # host side of a dual dependency; its coll twin is checked
            img_u = producer_after.get(u.outputs[0])
            if img_u is None:
                viol.append(f"lost-producer: tensor {u.outputs[0]}")
            elif img_u != img_v and not masks[img_v] >> img_u & 1:
                viol.append(
                    f"lost-dep: node {v.node_id} no longer reaches producer of "
                    f"tensor {u.outputs[0]}")
    return viol
