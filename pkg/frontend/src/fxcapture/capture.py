"""torch.compile backend that writes captured graphs to raw IR files.

The backend sits behind AOT Autograd, so each compiled region hands it
up to three lowered graphs: forward, backward, and inference.  Every
graph is serialized to a ``raw-ir/1`` JSON file and returned to the
framework unchanged.  Initializing the model on the meta device makes
capture allocation free: tracing records shapes and dtypes only, and no
parameter or activation data ever exists.

Typical use inside each rank of a distributed launch::

    cfg = CaptureConfig(output_dir=Path("exports"))
    step = torch.compile(train_step, backend=register_backend(cfg),
                         fullgraph=True, dynamic=False)

The shim does no graph surgery and never runs the graphs it exports.
Operators the downstream converter does not understand are rejected at
capture time in strict mode, or emitted with a warning in lenient mode,
so problems surface here rather than at ingest.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import torch
import torch.fx
from torch._dynamo.backends.common import aot_autograd
from torch.utils._pytree import tree_leaves

log = logging.getLogger(__name__)

FORMAT_VERSION = "raw-ir/1"


class UnmappedOperatorError(RuntimeError):
    """An operator the downstream converter has no mapping for."""

    def __init__(self, target: str):
        super().__init__(f"unmapped operator {target!r}")
        self.target = target


@dataclass
class CaptureConfig:
    """Output location and rank identity for one capturing process.

    ``rank`` and ``world_size`` default to the RANK / WORLD_SIZE
    variables set by the standard distributed launchers, so a training
    script normally only names the output directory.
    """

    output_dir: Path
    rank: int = field(default_factory=lambda: int(os.environ.get("RANK", "0")))
    world_size: int = field(
        default_factory=lambda: int(os.environ.get("WORLD_SIZE", "1")))
    strict_ops: bool = True
    prefix: str = "capture"

    def __post_init__(self) -> None:
        self.output_dir = Path(self.output_dir)
        if self.world_size < 1:
            raise ValueError(f"world_size must be positive, got {self.world_size}")
        if not 0 <= self.rank < self.world_size:
            raise ValueError(
                f"rank {self.rank} outside world of size {self.world_size}")


# Operator zoo the downstream converter understands.  Matched on the
# first two dotted components of the qualified name, mirroring how the
# converter normalizes targets; kept in sync with its operator map.

_COMPUTE = frozenset({
    "aten._scaled_dot_product_efficient_attention",
    "aten._scaled_dot_product_flash_attention",
    "aten._softmax",
    "aten.add",
    "aten.add_",
    "aten.addmm",
    "aten.bmm",
    "aten.div",
    "aten.gelu",
    "aten.gelu_backward",
    "aten.layer_norm",
    "aten.linear",
    "aten.matmul",
    "aten.mean",
    "aten.mm",
    "aten.mul",
    "aten.native_layer_norm",
    "aten.ones_like",
    "aten.relu",
    "aten.relu_",
    "aten.scaled_dot_product_attention",
    "aten.sigmoid",
    "aten.silu",
    "aten.silu_backward",
    "aten.softmax",
    "aten.sub",
    "aten.sum",
    "aten.tanh",
    "aten.threshold_backward",
    "aten.zeros_like",
})

_ELIDED = frozenset({
    "_operator.getitem",
    "aten._to_copy",
    "aten.alias",
    "aten.clone",
    "aten.copy",        # functionalized in-place write
    "aten.copy_",
    "aten.detach",
    "aten.expand",
    "aten.permute",
    "aten.reshape",
    "aten.t",
    "aten.transpose",
    "aten.view",
})

_COLLECTIVE_NAMESPACES = ("c10d", "c10d_functional", "_c10d_functional")

_COLLECTIVE_KIND = {
    "all_reduce": "ALL_REDUCE",
    "all_reduce_": "ALL_REDUCE",
    "all_gather_into_tensor": "ALL_GATHER",
    "reduce_scatter_tensor": "REDUCE_SCATTER",
}


def _base(target: str) -> str:
    if target.startswith("torch.ops."):
        target = target[len("torch.ops."):]
    return ".".join(target.split(".")[:2])


def _target_str(node: torch.fx.Node) -> str:
    t = node.target
    if isinstance(t, str):
        return t
    if isinstance(t, (torch._ops.OpOverload, torch._ops.OpOverloadPacket)):
        return f"torch.ops.{t}"
    mod = getattr(t, "__module__", None) or "builtins"
    name = getattr(t, "__name__", None) or repr(t)
    return f"{mod}.{name}"


def _collective_kind(base: str) -> str | None:
    ns, _, op = base.partition(".")
    if ns in _COLLECTIVE_NAMESPACES:
        return _COLLECTIVE_KIND.get(op)
    return None


def _is_wait(base: str) -> bool:
    ns, _, op = base.partition(".")
    return ns in _COLLECTIVE_NAMESPACES and op == "wait_tensor"


def _is_known(base: str) -> bool:
    return (base in _COMPUTE or base in _ELIDED
            or _is_wait(base) or _collective_kind(base) is not None)


def _group_ranks(node: torch.fx.Node, world_size: int) -> list[int]:
    """Recover the ranks participating in a collective.

    Functional collectives carry the group as a registered name string;
    resolve it against the live process group registry.  Older call
    forms pass the rank list directly.  Fall back to the whole world.
    """
    import torch.distributed as dist

    for a in tree_leaves((node.args, node.kwargs)):
        if isinstance(a, str):
            try:
                pg = dist.distributed_c10d._resolve_process_group(a)
                return sorted(dist.get_process_group_ranks(pg))
            except Exception:
                continue
        if (isinstance(a, (list, tuple)) and a
                and all(isinstance(x, int) for x in a)):
            return sorted(a)
    return list(range(world_size))


def _tensor_out(node: torch.fx.Node) -> dict[str, Any] | None:
    val = node.meta.get("val")
    if isinstance(val, (tuple, list)):
        val = next((v for v in val if isinstance(v, torch.Tensor)), None)
    if not isinstance(val, torch.Tensor):
        return None
    return {"shape": [int(d) for d in val.shape], "dtype": str(val.dtype)}


def _arg_names(obj: Any) -> list[str]:
    # referenced graph nodes in argument order, deduplicated
    names = [a.name for a in tree_leaves(obj) if isinstance(a, torch.fx.Node)]
    return list(dict.fromkeys(names))


def serialize_fx(gm: torch.fx.GraphModule, cfg: CaptureConfig,
                 name: str = "graph") -> Path:
    """Write one lowered graph as a raw IR export file, return its path.

    Node kinds map one to one onto the file format: placeholders become
    PLACEHOLDER, ``wait_tensor`` calls become WAIT, the output node
    becomes OUTPUT, everything else a CALL carrying its operator target
    string.  Shapes and dtypes come from the tracing metadata, so the
    export is complete even though no tensor ever held data.
    """
    nodes: list[dict[str, Any]] = []
    non_meta: set[str] = set()
    for node in gm.graph.nodes:
        val = node.meta.get("val")
        for v in val if isinstance(val, (tuple, list)) else (val,):
            if isinstance(v, torch.Tensor) and v.device.type != "meta":
                non_meta.add(v.device.type)

        if node.op == "placeholder":
            doc: dict[str, Any] = {
                "name": node.name, "kind": "PLACEHOLDER",
                "target": node.name, "arg_names": []}
        elif node.op == "get_attr":
            # post-AOT graphs lift state to placeholders; keep the odd
            # straggler visible as a graph input rather than dropping it
            doc = {"name": node.name, "kind": "PLACEHOLDER",
                   "target": str(node.target), "arg_names": []}
        elif node.op == "output":
            doc = {"name": node.name, "kind": "OUTPUT", "target": "output",
                   "arg_names": _arg_names(node.args)}
        elif node.op == "call_function":
            target = _target_str(node)
            base = _base(target)
            if not _is_known(base):
                if cfg.strict_ops:
                    raise UnmappedOperatorError(target)
                log.warning("unmapped operator %s emitted as-is", target)
            doc = {"name": node.name,
                   "kind": "WAIT" if _is_wait(base) else "CALL",
                   "target": target, "arg_names": _arg_names((node.args,
                                                              node.kwargs))}
            kind = _collective_kind(base)
            if kind is not None:
                doc["coll_attrs"] = {
                    "kind": kind,
                    "group": _group_ranks(node, cfg.world_size)}
        else:
            # call_module / call_method never survive AOT lowering
            target = _target_str(node)
            if cfg.strict_ops:
                raise UnmappedOperatorError(target)
            log.warning("unlowered %s node %s emitted as-is", node.op, target)
            doc = {"name": node.name, "kind": "CALL", "target": target,
                   "arg_names": _arg_names((node.args, node.kwargs))}

        out = _tensor_out(node)
        if out is not None and node.op != "output":
            doc["tensor_out"] = out
        nodes.append(doc)

    if non_meta:
        log.warning(
            "captured tensors live on %s, not meta; capture cannot prevent "
            "real allocation on those devices", ", ".join(sorted(non_meta)))

    export = {"format_version": FORMAT_VERSION, "rank": cfg.rank,
              "world_size": cfg.world_size, "nodes": nodes}
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.output_dir / f"{cfg.prefix}_{name}_rank{cfg.rank}.json"
    path.write_text(json.dumps(export, indent=2, sort_keys=True) + "\n")
    log.info("wrote %d nodes to %s", len(nodes), path)
    return path


def register_backend(cfg: CaptureConfig):
    """Build a torch.compile backend that exports every graph it sees.

    The returned callable plugs straight into
    ``torch.compile(step, backend=register_backend(cfg))``.  Forward
    graphs are exported when the region first runs, backward graphs when
    the first ``.backward()`` forces their compilation.  Files are named
    ``{prefix}_{fwd|bwd|inf}{i}_rank{rank}.json``.

    Tracing failures propagate unchanged; with ``fullgraph=True`` the
    raised error names the construct that broke the graph.
    """
    from functorch.compile import make_boxed_func

    counts = {"fwd": 0, "bwd": 0, "inf": 0}

    def compiler(tag: str):
        def compile_fn(gm: torch.fx.GraphModule, example_inputs):
            serialize_fx(gm, cfg, name=f"{tag}{counts[tag]}")
            counts[tag] += 1
            return make_boxed_func(gm.forward)
        return compile_fn

    return aot_autograd(fw_compiler=compiler("fwd"),
                        bw_compiler=compiler("bwd"),
                        inference_compiler=compiler("inf"))
