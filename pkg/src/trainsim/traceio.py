"""Raw IR export ingestion, workload-graph files, and kernel cost lookup.

Three on-disk formats live here:

* raw IR export (``raw-ir/1``): the flat post-autograd operator list a capture
  frontend dumps, one file per rank;
* workload graph (``workload-graph/1``): the canonical graph format every other
  stage produces and consumes (integer-only JSON, sorted keys, nodes in
  node_id order, so equal graphs serialize to identical bytes);
* profile table: measured kernel durations plus the device peak used by the
  analytical fallback.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from .errors import (
    FormatError,
    MissingShapeError,
    UnknownOperatorError,
    UnresolvedReferenceError,
)
from .graph import (
    CollectiveKind,
    CollSpec,
    Dtype,
    Node,
    NodeKind,
    P2pSpec,
    TensorMeta,
    WorkloadGraph,
    tensor_bytes,
)

log = logging.getLogger(__name__)

RAW_FORMAT_VERSION = "raw-ir/1"
GRAPH_FORMAT_VERSION = "workload-graph/1"

_DTYPE_ALIASES = {
    "float32": "f32",
    "float16": "f16",
    "bfloat16": "bf16",
    "int64": "i64",
    "int32": "i32",
    "bool": "bool",
}


def parse_dtype(tag: str) -> Dtype:
    # captured exports stringify framework dtypes as e.g. "torch.float16"
    if tag.startswith("torch."):
        tag = tag[len("torch."):]
    tag = _DTYPE_ALIASES.get(tag, tag)
    try:
        return Dtype(tag)
    except ValueError:
        raise FormatError(f"unknown dtype tag {tag!r}") from None


def round_half_up_ns(x: float) -> int:
    """Durations are integer nanoseconds; ties round away from zero."""
    return int(math.floor(x + 0.5))


def shape_str(shapes: list[list[int]]) -> str:
    """Canonical signature string, e.g. ``[64,64]x[64,64]``."""
    return "x".join("[" + ",".join(str(d) for d in s) + "]" for s in shapes)


# ---------------------------------------------------------------------------
# device model and profile tables


@dataclass
class DeviceSpec:
    peak_flops: float
    efficiency: float


DEFAULT_DEVICE = DeviceSpec(peak_flops=1.0e12, efficiency=1.0)


@dataclass
class ProfileTable:
    device: DeviceSpec
    entries: dict[tuple[str, str, str], int] = field(default_factory=dict)

    def lookup(self, op: str, shapes: list[list[int]], dtype: Dtype) -> Optional[int]:
        return self.entries.get((op, shape_str(shapes), dtype.value))


def load_profile(path: str | Path) -> ProfileTable:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"cannot read profile {path}: {e}") from e
    if not isinstance(doc, dict) or "device" not in doc:
        raise FormatError("profile must be an object with a 'device' section")
    dev = doc["device"]
    try:
        peak = float(dev["peak_flops"])
        eff = float(dev["efficiency"])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"bad device section: {e}") from e
    if peak <= 0:
        raise FormatError(f"peak_flops must be positive, got {peak}")
    if not (0.0 < eff <= 1.0):
        raise FormatError(f"efficiency must be in (0, 1], got {eff}")
    table = ProfileTable(DeviceSpec(peak, eff))
    for i, ent in enumerate(doc.get("entries", [])):
        try:
            key = (str(ent["op"]), str(ent["shape"]), parse_dtype(str(ent["dtype"])).value)
            ns = ent["ns"]
        except KeyError as e:
            raise FormatError(f"profile entry {i} missing {e}") from e
        if not isinstance(ns, int) or ns <= 0:
            raise FormatError(f"profile entry {i}: ns must be a positive integer, got {ns!r}")
        if key in table.entries:
            log.warning("profile: duplicate signature %s, keeping last entry", key)
        table.entries[key] = ns
    return table


_FLOPS_CLASSES = {"matmul", "attention", "elementwise"}


def op_flops(flops_class: str, in_shapes: list[list[int]], out_shape: Optional[list[int]]) -> int:
    """Operation cost in floating point operations.

    matmul: 2*m*k*n over the last two stacked operands (batch dims multiply);
    attention: 2 * batch * heads * seq^2 * head_dim, twice (QK^T and PV);
    elementwise: one op per output element.
    """
    if flops_class == "matmul":
        mats = [s for s in in_shapes if len(s) >= 2]
        if len(mats) < 2:
            raise MissingShapeError(f"matmul cost needs two 2d+ operands, got {in_shapes}")
        a, b = mats[-2], mats[-1]
        batch = math.prod(a[:-2]) if len(a) > 2 else 1
        m, k = a[-2], a[-1]
        n = b[-1]
        return 2 * batch * m * k * n
    if flops_class == "attention":
        four_d = [s for s in in_shapes if len(s) == 4]
        if not four_d:
            raise MissingShapeError(f"attention cost needs [batch, heads, seq, head_dim] input, got {in_shapes}")
        bsz, heads, seq, hd = four_d[0]
        return 2 * bsz * heads * seq * seq * hd * 2
    if flops_class == "elementwise":
        ref = out_shape if out_shape else (in_shapes[0] if in_shapes else [1])
        return math.prod(ref)
    raise UnknownOperatorError(f"no cost rule for flops class {flops_class!r}")


def analytical_duration(
    op_name: str,
    in_shapes: list[list[int]],
    dtype: Dtype,
    device: DeviceSpec,
    out_shape: Optional[list[int]] = None,
    flops_class: Optional[str] = None,
) -> int:
    """Fallback kernel duration in integer ns from the device peak."""
    if flops_class is None:
        from .graph import OpClass, classify_op

        cls = classify_op(op_name)
        flops_class = {
            OpClass.MM: "matmul",
            OpClass.ATTN: "attention",
            OpClass.ELEMENTWISE: "elementwise",
        }.get(cls)
        if flops_class is None:
            raise UnknownOperatorError(f"no analytical cost model for op {op_name!r}")
    flops = op_flops(flops_class, in_shapes, out_shape)
    return round_half_up_ns(flops / (device.peak_flops * device.efficiency) * 1e9)


# ---------------------------------------------------------------------------
# operator mapping table (ships as package data)


@dataclass
class OpsMap:
    compute: dict[str, dict]
    collective: dict[str, dict]
    elide: set[str]


_OPS_MAP: Optional[OpsMap] = None


def load_ops_map() -> OpsMap:
    global _OPS_MAP
    if _OPS_MAP is None:
        doc = json.loads(resources.files(__package__).joinpath("ops_map.json").read_text())
        _OPS_MAP = OpsMap(
            compute=doc["compute"],
            collective=doc["collective"],
            elide=set(doc["elide"]),
        )
    return _OPS_MAP


def normalize_target(target: str) -> str:
    """Collapse an operator reference to namespace.opname (drops overloads)."""
    t = target
    if t.startswith("torch.ops."):
        t = t[len("torch.ops."):]
    parts = t.split(".")
    if len(parts) >= 2:
        return ".".join(parts[:2])
    return t


# ---------------------------------------------------------------------------
# raw IR exports


RAW_KINDS = ("PLACEHOLDER", "CALL", "WAIT", "OUTPUT")


@dataclass
class RawIrNode:
    name: str
    kind: str
    target: str
    arg_names: list[str]
    tensor_out: Optional[dict] = None   # {"shape": [...], "dtype": tag}
    coll_attrs: Optional[dict] = None   # {"kind": tag, "group": [ranks]}


@dataclass
class RawExport:
    rank: int
    world_size: int
    nodes: list[RawIrNode]


def read_raw_export(path: str | Path) -> RawExport:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"cannot read raw export {path}: {e}") from e
    return parse_raw_export(doc, source=str(path))


def parse_raw_export(doc: dict, source: str = "<memory>") -> RawExport:
    if not isinstance(doc, dict):
        raise FormatError(f"{source}: raw export must be a JSON object")
    if doc.get("format_version") != RAW_FORMAT_VERSION:
        raise FormatError(f"{source}: unknown format_version {doc.get('format_version')!r}")
    try:
        rank = int(doc["rank"])
        world = int(doc["world_size"])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{source}: bad rank/world_size: {e}") from e
    raw_nodes = doc.get("nodes")
    if not isinstance(raw_nodes, list) or not raw_nodes:
        raise FormatError(f"{source}: node list is empty or missing")
    nodes: list[RawIrNode] = []
    seen: set[str] = set()
    for i, nd in enumerate(raw_nodes):
        try:
            name = str(nd["name"])
            kind = str(nd["kind"])
            target = str(nd.get("target", ""))
            arg_names = [str(a) for a in nd.get("arg_names", [])]
        except (KeyError, TypeError) as e:
            raise FormatError(f"{source}: node {i} malformed: {e}") from e
        if kind not in RAW_KINDS:
            raise FormatError(f"{source}: node {name!r} has unknown kind {kind!r}")
        if name in seen:
            raise FormatError(f"{source}: duplicate node name {name!r}")
        for a in arg_names:
            if a not in seen:
                raise UnresolvedReferenceError(f"{source}: node {name!r} references unseen name {a!r}")
        seen.add(name)
        nodes.append(RawIrNode(name, kind, target, arg_names,
                               nd.get("tensor_out"), nd.get("coll_attrs")))
    return RawExport(rank=rank, world_size=world, nodes=nodes)


def write_raw_export(export: RawExport, path: str | Path) -> None:
    doc = {
        "format_version": RAW_FORMAT_VERSION,
        "rank": export.rank,
        "world_size": export.world_size,
        "nodes": [
            {
                "name": n.name,
                "kind": n.kind,
                "target": n.target,
                "arg_names": n.arg_names,
                "tensor_out": n.tensor_out,
                "coll_attrs": n.coll_attrs,
            }
            for n in export.nodes
        ],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# conversion raw export -> workload graph


@dataclass
class _Binding:
    tensor_id: Optional[int]
    dep_ids: list[int]


def convert(
    raw: RawExport,
    profile: Optional[ProfileTable] = None,
    device: Optional[DeviceSpec] = None,
) -> WorkloadGraph:
    """Lower a raw operator list to a workload graph.

    Compute calls become HOST+COMP pairs joined by a "launch" ctrl edge;
    collective calls become HOST+COLL pairs; WAIT nodes vanish, with
    consumers of the waited tensor depending on both the HOST and COLL node;
    PLACEHOLDERs become graph-input tensor entries and OUTPUT records its
    dependency set in meta["graph_outputs"].
    """
    ops = load_ops_map()
    dev = device or (profile.device if profile else DEFAULT_DEVICE)

    nodes: list[Node] = []
    tensors: dict[int, TensorMeta] = {}
    env: dict[str, _Binding] = {}
    coll_pair: dict[int, tuple[int, int]] = {}   # tensor -> (host id, coll id)
    graph_inputs: list[int] = []
    graph_outputs: list[dict] = []

    def new_tensor(spec: Optional[dict], owner: str) -> TensorMeta:
        if not spec or "shape" not in spec or "dtype" not in spec:
            raise MissingShapeError(f"node {owner!r} carries no tensor shape")
        shape = [int(d) for d in spec["shape"]]
        if not shape:
            shape = [1]
        tm = TensorMeta.make(len(tensors), shape, parse_dtype(str(spec["dtype"])))
        tensors[tm.tensor_id] = tm
        return tm

    raw_by_name = {rn.name: rn for rn in raw.nodes}

    def arg_bindings(rn: RawIrNode) -> list[_Binding]:
        return [env[a] for a in rn.arg_names if env[a].tensor_id is not None]

    def site_shape(name: str, bound: _Binding) -> list[int]:
        # shape as seen at the consuming call: an elided view between the
        # producer and this use can change rank, so the argument node's own
        # recorded shape wins over the bound storage's shape
        spec = raw_by_name[name].tensor_out if name in raw_by_name else None
        if spec and "shape" in spec:
            return [int(d) for d in spec["shape"]] or [1]
        return tensors[bound.tensor_id].shape

    def emit_pair(kind: NodeKind, op: str, inputs: list[int], outputs: list[int],
                  data_deps: list[int], **extra) -> tuple[Node, Node]:
        host = Node(len(nodes), NodeKind.HOST, op)
        nodes.append(host)
        work = Node(len(nodes), kind, op, inputs=inputs, outputs=outputs,
                    data_deps=sorted(set(data_deps)),
                    ctrl_deps=[(host.node_id, "launch")], **extra)
        nodes.append(work)
        return host, work

    for rn in raw.nodes:
        if rn.kind == "PLACEHOLDER":
            tm = new_tensor(rn.tensor_out, rn.name)
            graph_inputs.append(tm.tensor_id)
            env[rn.name] = _Binding(tm.tensor_id, [])
            continue
        if rn.kind == "WAIT":
            args = arg_bindings(rn)
            if not args:
                raise FormatError(f"WAIT node {rn.name!r} has no tensor argument")
            b = args[0]
            pair = coll_pair.get(b.tensor_id)
            env[rn.name] = _Binding(b.tensor_id, list(pair) if pair else list(b.dep_ids))
            continue
        if rn.kind == "OUTPUT":
            for b in arg_bindings(rn):
                graph_outputs.append({"tensor_id": b.tensor_id, "deps": sorted(set(b.dep_ids))})
            continue

        # CALL
        target = normalize_target(rn.target)
        if target in ops.elide:
            args = arg_bindings(rn)
            if not args:
                raise FormatError(f"elided call {rn.name!r} has no tensor argument")
            env[rn.name] = args[0]
            continue
        if target in ("aten.copy", "aten.copy_"):
            # functionalized in-place write: the result's VALUE is the source
            # (last arg); keep the destination's producers so ordering survives
            args = arg_bindings(rn)
            if not args:
                raise FormatError(f"copy {rn.name!r} has no tensor argument")
            src = args[-1]
            deps = sorted({d for b in args for d in b.dep_ids})
            env[rn.name] = _Binding(src.tensor_id, deps)
            continue
        if target in ops.compute:
            entry = ops.compute[target]
            names = [a for a in rn.arg_names if env[a].tensor_id is not None]
            args = [env[a] for a in names]
            in_ids = [b.tensor_id for b in args]
            deps = [d for b in args for d in b.dep_ids]
            out_tm = new_tensor(rn.tensor_out, rn.name)
            in_shapes = [site_shape(a, b) for a, b in zip(names, args)]
            dur = profile.lookup(entry["op"], in_shapes, out_tm.dtype) if profile else None
            if dur is None:
                dur = analytical_duration(entry["op"], in_shapes, out_tm.dtype, dev,
                                          out_shape=out_tm.shape, flops_class=entry["flops"])
            _, comp = emit_pair(NodeKind.COMP, entry["op"], in_ids, [out_tm.tensor_id],
                                deps, duration_ns=dur)
            env[rn.name] = _Binding(out_tm.tensor_id, [comp.node_id])
            continue
        if target in ops.collective:
            entry = ops.collective[target]
            names = [a for a in rn.arg_names if env[a].tensor_id is not None]
            args = [env[a] for a in names]
            if not args:
                raise FormatError(f"collective {rn.name!r} has no tensor argument")
            in_ids = [b.tensor_id for b in args]
            deps = [d for b in args for d in b.dep_ids]
            attrs = rn.coll_attrs or {}
            if "group" not in attrs:
                raise FormatError(f"collective {rn.name!r} carries no group ranks")
            group = [int(r) for r in attrs["group"]]
            kind = CollectiveKind(entry["kind"])
            if "kind" in attrs and str(attrs["kind"]) != kind.value:
                raise FormatError(
                    f"collective {rn.name!r}: coll_attrs kind {attrs['kind']!r} contradicts target {target!r}")
            out_tm = new_tensor(rn.tensor_out, rn.name)
            nbytes = tensor_bytes(site_shape(names[0], args[0]),
                                  tensors[in_ids[0]].dtype)
            host, coll = emit_pair(
                NodeKind.COLL, entry["op"], in_ids, [out_tm.tensor_id], deps,
                coll=CollSpec(kind, group, nbytes))
            coll_pair[out_tm.tensor_id] = (host.node_id, coll.node_id)
            env[rn.name] = _Binding(out_tm.tensor_id, [coll.node_id])
            continue
        raise UnknownOperatorError(f"target {rn.target!r} (normalized {target!r}) is not mapped")

    meta = {
        "source": "capture",
        "graph_inputs": graph_inputs,
        "graph_outputs": graph_outputs,
    }
    return WorkloadGraph(rank=raw.rank, world_size=raw.world_size,
                         nodes=nodes, tensors=tensors, meta=meta)


# ---------------------------------------------------------------------------
# workload graph files


def _no_floats(obj, path="$"):
    if isinstance(obj, float):
        raise FormatError(f"floating point value at {path}; graph files are integer-only")
    if isinstance(obj, dict):
        for k, v in obj.items():
            _no_floats(v, f"{path}.{k}")
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            _no_floats(v, f"{path}[{i}]")


def graph_to_doc(g: WorkloadGraph) -> dict:
    nodes = []
    for n in sorted(g.nodes, key=lambda n: n.node_id):
        nd: dict = {
            "node_id": n.node_id,
            "kind": n.kind.value,
            "op_name": n.op_name,
            "inputs": list(n.inputs),
            "outputs": list(n.outputs),
            "data_deps": list(n.data_deps),
            "ctrl_deps": [[d, lbl] for d, lbl in n.ctrl_deps],
        }
        if n.duration_ns is not None:
            nd["duration_ns"] = n.duration_ns
        if n.coll is not None:
            nd["coll"] = {"kind": n.coll.kind.value, "group": list(n.coll.group),
                          "comm_bytes": n.coll.comm_bytes}
        if n.p2p is not None:
            nd["p2p"] = {"peer_rank": n.p2p.peer_rank, "comm_bytes": n.p2p.comm_bytes,
                         "channel_tag": n.p2p.channel_tag}
        nodes.append(nd)
    return {
        "format_version": GRAPH_FORMAT_VERSION,
        "rank": g.rank,
        "world_size": g.world_size,
        "tensors": {
            str(tid): {"shape": list(tm.shape), "dtype": tm.dtype.value, "bytes": tm.bytes}
            for tid, tm in sorted(g.tensors.items())
        },
        "nodes": nodes,
        "meta": g.meta,
    }


def dumps_graph(g: WorkloadGraph) -> str:
    doc = graph_to_doc(g)
    _no_floats(doc)
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def write_graph(g: WorkloadGraph, path: str | Path) -> None:
    Path(path).write_text(dumps_graph(g))


def doc_to_graph(doc: dict, source: str = "<memory>") -> WorkloadGraph:
    if not isinstance(doc, dict) or doc.get("format_version") != GRAPH_FORMAT_VERSION:
        raise FormatError(f"{source}: unknown format_version "
                          f"{doc.get('format_version') if isinstance(doc, dict) else None!r}")
    try:
        tensors = {
            int(tid): TensorMeta(int(tid), [int(d) for d in tm["shape"]],
                                 parse_dtype(str(tm["dtype"])), int(tm["bytes"]))
            for tid, tm in doc["tensors"].items()
        }
        nodes = []
        for nd in doc["nodes"]:
            coll = None
            if nd.get("coll") is not None:
                c = nd["coll"]
                coll = CollSpec(CollectiveKind(c["kind"]), [int(r) for r in c["group"]],
                                int(c["comm_bytes"]))
            p2p = None
            if nd.get("p2p") is not None:
                p = nd["p2p"]
                p2p = P2pSpec(int(p["peer_rank"]), int(p["comm_bytes"]), int(p["channel_tag"]))
            nodes.append(Node(
                node_id=int(nd["node_id"]),
                kind=NodeKind(nd["kind"]),
                op_name=str(nd["op_name"]),
                inputs=[int(t) for t in nd.get("inputs", [])],
                outputs=[int(t) for t in nd.get("outputs", [])],
                data_deps=[int(d) for d in nd.get("data_deps", [])],
                ctrl_deps=[(int(d), str(lbl)) for d, lbl in nd.get("ctrl_deps", [])],
                duration_ns=nd.get("duration_ns"),
                coll=coll,
                p2p=p2p,
            ))
        return WorkloadGraph(rank=int(doc["rank"]), world_size=int(doc["world_size"]),
                             nodes=nodes, tensors=tensors, meta=doc.get("meta", {}))
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{source}: malformed graph document: {e}") from e


def read_graph(path: str | Path) -> WorkloadGraph:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"cannot read graph {path}: {e}") from e
    return doc_to_graph(doc, source=str(path))


def rank_filename(rank: int) -> str:
    return f"rank_{rank:04d}.json"


def write_graph_dir(graphs: list[WorkloadGraph], out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for g in graphs:
        p = out / rank_filename(g.rank)
        write_graph(g, p)
        paths.append(p)
    return paths


def read_graph_dir(in_dir: str | Path) -> list[WorkloadGraph]:
    files = sorted(Path(in_dir).glob("rank_*.json"))
    if not files:
        raise FormatError(f"no rank_*.json graph files under {in_dir}")
    graphs = [read_graph(p) for p in files]
    graphs.sort(key=lambda g: g.rank)
    return graphs
