"""Synthetic transformer training-step graphs.

Builds the per-rank graph directly (no capture in the loop) for one training
iteration of a decoder block stack: per layer, a QKV projection, scaled-dot-
product attention, the output projection, and a two-matmul FFN, each emitted
as a HOST+COMP pair; the backward pass mirrors the forward one node per node
in reverse order with equal duration. Parallelism is woven in as explicit
collectives:

* dp:    one ALL_REDUCE of the layer's weight gradients per layer;
* fsdp:  weights live as 1/degree shards; an ALL_GATHER materializes full
         weights before each layer's forward and again before its backward,
         and a REDUCE_SCATTER shards the weight gradients. In DELAYED mode
         each gather carries an "fsdp-sync" ctrl edge from the previous
         layer's last compute, pinning it to the layer boundary;
* tp:    attention heads and FFN inner dim are sharded; partial block outputs
         are ALL_REDUCEd after each block in forward and mirrored in backward.

All ranks get structurally identical graphs (same ids, same tensors), so the
rank graphs differ only in their rank field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from .errors import UnsupportedComboError
from .graph import (
    CollectiveKind,
    CollSpec,
    Dtype,
    Node,
    NodeKind,
    TensorMeta,
    WorkloadGraph,
)
from .traceio import (
    DEFAULT_DEVICE,
    DeviceSpec,
    ProfileTable,
    analytical_duration,
)


class Strategy(Enum):
    DP = "dp"
    FSDP = "fsdp"
    TP = "tp"


class FsdpMode(Enum):
    DELAYED = "delayed"
    NONE = "none"


@dataclass
class ModelConfig:
    layers: int
    hidden_dim: int
    num_heads: int
    ffn_mult: int = 4
    seq_len: int = 128
    micro_batch: int = 1
    dtype: Dtype = Dtype.F16
    ffn_inner: Optional[int] = None   # presets override the ffn_mult product
    name: str = "custom"

    def __post_init__(self):
        if min(self.layers, self.hidden_dim, self.num_heads, self.ffn_mult,
               self.seq_len, self.micro_batch) < 1:
            raise UnsupportedComboError("model dimensions must be positive")
        if self.hidden_dim % self.num_heads != 0:
            raise UnsupportedComboError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")

    @property
    def ffn(self) -> int:
        return self.ffn_inner if self.ffn_inner is not None else self.ffn_mult * self.hidden_dim

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


@dataclass
class ParallelConfig:
    strategy: Strategy
    degree: int
    fsdp_mode: FsdpMode = FsdpMode.DELAYED


PRESETS: dict[str, ModelConfig] = {
    "tiny": ModelConfig(layers=8, hidden_dim=256, num_heads=4, ffn_mult=4,
                        seq_len=128, micro_batch=1, dtype=Dtype.F16, name="tiny"),
    "llama-8b-like": ModelConfig(layers=32, hidden_dim=4096, num_heads=32,
                                 ffn_inner=14336, seq_len=2048, micro_batch=1,
                                 dtype=Dtype.BF16, name="llama-8b-like"),
    "llama-70b-like": ModelConfig(layers=80, hidden_dim=8192, num_heads=64,
                                  ffn_inner=28672, seq_len=2048, micro_batch=1,
                                  dtype=Dtype.BF16, name="llama-70b-like"),
}


class _Emitter:
    """Accumulates nodes/tensors with producer bookkeeping.

    dep_ids maps a tensor to the nodes a consumer must wait on: the producer
    for plain tensors, both the HOST and COLL node for collective outputs.
    """

    def __init__(self, dtype: Dtype):
        self.dtype = dtype
        self.nodes: list[Node] = []
        self.tensors: dict[int, TensorMeta] = {}
        self.dep_ids: dict[int, list[int]] = {}
        self.graph_inputs: list[int] = []

    def tensor(self, shape: list[int]) -> int:
        tm = TensorMeta.make(len(self.tensors), shape, self.dtype)
        self.tensors[tm.tensor_id] = tm
        return tm.tensor_id

    def input_tensor(self, shape: list[int]) -> int:
        tid = self.tensor(shape)
        self.graph_inputs.append(tid)
        self.dep_ids[tid] = []
        return tid

    def _deps(self, inputs: list[int]) -> list[int]:
        return sorted({d for t in inputs for d in self.dep_ids[t]})

    def comp(self, op: str, inputs: list[int], out_shapes: list[list[int]],
             duration_ns: int) -> tuple[int, list[int]]:
        host = Node(len(self.nodes), NodeKind.HOST, op)
        self.nodes.append(host)
        outs = [self.tensor(s) for s in out_shapes]
        node = Node(len(self.nodes), NodeKind.COMP, op, inputs=list(inputs), outputs=outs,
                    data_deps=self._deps(inputs), ctrl_deps=[(host.node_id, "launch")],
                    duration_ns=duration_ns)
        self.nodes.append(node)
        for t in outs:
            self.dep_ids[t] = [node.node_id]
        return node.node_id, outs

    def coll(self, op: str, kind: CollectiveKind, inputs: list[int],
             out_shapes: list[list[int]], comm_bytes: int, group: list[int],
             extra_ctrl: Optional[list[tuple[int, str]]] = None) -> tuple[int, list[int]]:
        host = Node(len(self.nodes), NodeKind.HOST, op)
        self.nodes.append(host)
        outs = [self.tensor(s) for s in out_shapes]
        ctrl = [(host.node_id, "launch")] + list(extra_ctrl or [])
        node = Node(len(self.nodes), NodeKind.COLL, op, inputs=list(inputs), outputs=outs,
                    data_deps=self._deps(inputs), ctrl_deps=ctrl,
                    coll=CollSpec(kind, list(group), comm_bytes))
        self.nodes.append(node)
        for t in outs:
            self.dep_ids[t] = [host.node_id, node.node_id]
        return node.node_id, outs


def synth_transformer(
    m: ModelConfig,
    p: ParallelConfig,
    world_size: int,
    profile: Optional[ProfileTable] = None,
    device: Optional[DeviceSpec] = None,
) -> list[WorkloadGraph]:
    """Build one graph per rank for the given model/parallelism combo."""
    if p.degree != world_size:
        raise UnsupportedComboError(
            f"parallel degree {p.degree} must equal world_size {world_size}")
    if p.degree < 2:
        raise UnsupportedComboError("parallel degree must be at least 2")
    if p.strategy == Strategy.TP:
        if m.num_heads % p.degree or m.hidden_dim % p.degree or m.ffn % p.degree:
            raise UnsupportedComboError(
                f"tp degree {p.degree} must divide heads {m.num_heads}, "
                f"hidden {m.hidden_dim} and ffn {m.ffn}")

    dev = device or (profile.device if profile else DEFAULT_DEVICE)
    group = list(range(world_size))
    width = m.dtype.byte_width
    bs = m.micro_batch * m.seq_len
    H, F, nh, hd = m.hidden_dim, m.ffn, m.num_heads, m.head_dim
    deg = p.degree
    tp = p.strategy == Strategy.TP
    nh_l = nh // deg if tp else nh          # local heads
    H_l = H // deg if tp else H             # local attention width
    F_l = F // deg if tp else F             # local ffn inner

    e = _Emitter(m.dtype)

    def dur(op: str, in_shapes: list[list[int]], out_shape: list[int]) -> int:
        got = profile.lookup(op, in_shapes, m.dtype) if profile else None
        if got is not None:
            return got
        return analytical_duration(op, in_shapes, m.dtype, dev, out_shape=out_shape)

    w_shapes = {
        "wqkv": [H, 3 * H_l] if tp else [H, 3 * H],
        "wo": [H_l, H],
        "w1": [H, F_l],
        "w2": [F_l, H],
    }
    layer_weight_elems = sum(math.prod(s) for s in w_shapes.values())
    layer_weight_bytes = layer_weight_elems * width
    fsdp = p.strategy == Strategy.FSDP
    shard_elems = -(-layer_weight_elems // deg) if fsdp else 0
    shard_bytes = shard_elems * width

    weights: list[dict[str, int]] = []      # per layer, name -> tensor id (dp/tp only)
    shards: list[int] = []                  # per layer shard tensor id (fsdp)
    if fsdp:
        for _ in range(m.layers):
            shards.append(e.input_tensor([shard_elems]))
    else:
        for _ in range(m.layers):
            weights.append({k: e.input_tensor(s) for k, s in w_shapes.items()})

    x0 = e.input_tensor([bs, H])
    seed = e.input_tensor([bs, H])

    ar_bytes = bs * H * width               # tp block-output allreduce size

    def gather(layer: int, sync_from: Optional[int]) -> dict[str, int]:
        extra = [(sync_from, "fsdp-sync")] if sync_from is not None else None
        _, outs = e.coll("all_gather", CollectiveKind.ALL_GATHER, [shards[layer]],
                         [w_shapes[k] for k in ("wqkv", "wo", "w1", "w2")],
                         shard_bytes, group, extra_ctrl=extra)
        return dict(zip(("wqkv", "wo", "w1", "w2"), outs))

    # ---- forward ----
    fwd: list[dict] = []
    x = x0
    for l in range(m.layers):
        rec: dict = {}
        if fsdp:
            sync = fwd[l - 1]["last_comp"] if (l > 0 and p.fsdp_mode == FsdpMode.DELAYED) else None
            rec["w"] = gather(l, sync)
        else:
            rec["w"] = weights[l]
        w = rec["w"]
        d_qkv = dur("addmm", [[bs, H], w_shapes["wqkv"]], [bs, 3 * H_l])
        n_qkv, qkv = e.comp("addmm", [x, w["wqkv"]],
                            [[m.micro_batch, nh_l, m.seq_len, hd]] * 3, d_qkv)
        d_attn = dur("scaled_dot_product_attention",
                     [[m.micro_batch, nh_l, m.seq_len, hd]] * 3, [bs, H_l])
        n_attn, (a_out,) = e.comp("scaled_dot_product_attention", qkv, [[bs, H_l]], d_attn)
        d_proj = dur("addmm", [[bs, H_l], w_shapes["wo"]], [bs, H])
        n_proj, (h_part,) = e.comp("addmm", [a_out, w["wo"]], [[bs, H]], d_proj)
        if tp:
            _, (h1,) = e.coll("all_reduce", CollectiveKind.ALL_REDUCE, [h_part],
                              [[bs, H]], ar_bytes, group)
        else:
            h1 = h_part
        d_ffn1 = dur("addmm", [[bs, H], w_shapes["w1"]], [bs, F_l])
        n_ffn1, (u,) = e.comp("addmm", [h1, w["w1"]], [[bs, F_l]], d_ffn1)
        d_ffn2 = dur("addmm", [[bs, F_l], w_shapes["w2"]], [bs, H])
        n_ffn2, (y_part,) = e.comp("addmm", [u, w["w2"]], [[bs, H]], d_ffn2)
        if tp:
            _, (y,) = e.coll("all_reduce", CollectiveKind.ALL_REDUCE, [y_part],
                             [[bs, H]], ar_bytes, group)
        else:
            y = y_part
        rec.update(x_in=x, qkv=qkv, a_out=a_out, h1=h1, u=u,
                   durs=(d_qkv, d_attn, d_proj, d_ffn1, d_ffn2),
                   last_comp=n_ffn2)
        fwd.append(rec)
        x = y

    # ---- backward, layers in reverse ----
    g = seed
    prev_last_grad: Optional[int] = None
    for l in range(m.layers - 1, -1, -1):
        rec = fwd[l]
        d_qkv, d_attn, d_proj, d_ffn1, d_ffn2 = rec["durs"]
        if fsdp:
            if p.fsdp_mode == FsdpMode.DELAYED:
                sync = prev_last_grad if prev_last_grad is not None else fwd[-1]["last_comp"]
            else:
                sync = None
            w = gather(l, sync)
        else:
            w = rec["w"]
        _, (gu, dw2) = e.comp("addmm_backward", [g, w["w2"], rec["u"]],
                              [[bs, F_l], w_shapes["w2"]], d_ffn2)
        _, (gh_part, dw1) = e.comp("addmm_backward", [gu, w["w1"], rec["h1"]],
                                   [[bs, H], w_shapes["w1"]], d_ffn1)
        if tp:
            _, (gh,) = e.coll("all_reduce", CollectiveKind.ALL_REDUCE, [gh_part],
                              [[bs, H]], ar_bytes, group)
        else:
            gh = gh_part
        _, (ga, dwo) = e.comp("addmm_backward", [gh, w["wo"], rec["a_out"]],
                              [[bs, H_l], w_shapes["wo"]], d_proj)
        _, gqkv = e.comp("scaled_dot_product_attention_backward", [ga] + rec["qkv"],
                         [[m.micro_batch, nh_l, m.seq_len, hd]] * 3, d_attn)
        n_qkv_b, (gx_part, dwqkv) = e.comp(
            "addmm_backward", gqkv + [w["wqkv"], rec["x_in"]],
            [[bs, H], w_shapes["wqkv"]], d_qkv)
        dws = [dwqkv, dwo, dw1, dw2]
        if p.strategy == Strategy.DP:
            e.coll("all_reduce", CollectiveKind.ALL_REDUCE, dws,
                   [w_shapes[k] for k in ("wqkv", "wo", "w1", "w2")],
                   layer_weight_bytes, group)
        elif fsdp:
            e.coll("reduce_scatter", CollectiveKind.REDUCE_SCATTER, dws,
                   [[shard_elems]], layer_weight_bytes, group)
        if tp:
            _, (gx,) = e.coll("all_reduce", CollectiveKind.ALL_REDUCE, [gx_part],
                              [[bs, H]], ar_bytes, group)
        else:
            gx = gx_part
        prev_last_grad = n_qkv_b
        g = gx

    meta = {
        "source": "synth",
        "model": {
            "name": m.name, "layers": m.layers, "hidden": m.hidden_dim,
            "heads": m.num_heads, "ffn_inner": m.ffn, "seq": m.seq_len,
            "batch": m.micro_batch, "dtype": m.dtype.value,
        },
        "parallel": f"{p.strategy.value}:{p.degree}",
        "fsdp_mode": p.fsdp_mode.value if fsdp else None,
        "graph_inputs": list(e.graph_inputs),
    }
    return [
        WorkloadGraph(rank=r, world_size=world_size, nodes=e.nodes,
                      tensors=e.tensors, meta=dict(meta))
        for r in range(world_size)
    ]


def parse_parallel(token: str) -> ParallelConfig:
    """Parse CLI parallel specs like dp:8, fsdp:16, tp:4."""
    parts = token.split(":")
    if len(parts) != 2:
        raise UnsupportedComboError(f"parallel spec {token!r} must be strategy:degree")
    try:
        strat = Strategy(parts[0])
    except ValueError:
        raise UnsupportedComboError(f"unknown strategy {parts[0]!r}") from None
    try:
        degree = int(parts[1])
    except ValueError:
        raise UnsupportedComboError(f"bad degree {parts[1]!r}") from None
    return ParallelConfig(strat, degree)
