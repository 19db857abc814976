"""Cluster topologies the simulator and collective planner run against.

SWITCH: every rank has one egress and one ingress link into a non-blocking
core, so any pair can talk at NIC speed and a message occupies exactly
egress(src) + ingress(dst).

MESH2D: rows x cols grid, rank = row * cols + col, directed links between
4-neighbors only. Messages route dimension-ordered: along the row to the
target column, then along the column.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .errors import FormatError


class TopologyKind(Enum):
    SWITCH = "switch"
    MESH2D = "mesh"


@dataclass
class Topology:
    kind: TopologyKind
    world_size: int
    bw_bytes_per_s: float
    latency_ns: int
    rows: int = 0
    cols: int = 0

    @classmethod
    def switch(cls, num_ranks: int, nic_bw_bytes_per_s: float, latency_ns: int) -> "Topology":
        if num_ranks < 1:
            raise ValueError("switch needs at least one rank")
        return cls(TopologyKind.SWITCH, num_ranks, float(nic_bw_bytes_per_s), int(latency_ns))

    @classmethod
    def mesh2d(cls, rows: int, cols: int, link_bw_bytes_per_s: float, latency_ns: int) -> "Topology":
        if rows < 1 or cols < 1:
            raise ValueError("mesh needs positive dimensions")
        return cls(TopologyKind.MESH2D, rows * cols, float(link_bw_bytes_per_s),
                   int(latency_ns), rows=rows, cols=cols)

    @property
    def beta_ns_per_byte(self) -> float:
        return 1e9 / self.bw_bytes_per_s

    @property
    def alpha_ns(self) -> int:
        return self.latency_ns

    def coords(self, rank: int) -> tuple[int, int]:
        return divmod(rank, self.cols)

    def rank_at(self, row: int, col: int) -> int:
        return row * self.cols + col

    def adjacent(self, a: int, b: int) -> bool:
        if self.kind != TopologyKind.MESH2D:
            return a != b
        ra, ca = self.coords(a)
        rb, cb = self.coords(b)
        return abs(ra - rb) + abs(ca - cb) == 1

    def route(self, src: int, dst: int) -> list[str]:
        """Ordered directed links a src->dst message occupies."""
        if src == dst:
            return []
        if self.kind == TopologyKind.SWITCH:
            return [f"eg{src}", f"in{dst}"]
        r0, c0 = self.coords(src)
        r1, c1 = self.coords(dst)
        links = []
        r, c = r0, c0
        while c != c1:
            c2 = c + (1 if c1 > c else -1)
            links.append(f"{self.rank_at(r, c)}->{self.rank_at(r, c2)}")
            c = c2
        while r != r1:
            r2 = r + (1 if r1 > r else -1)
            links.append(f"{self.rank_at(r, c)}->{self.rank_at(r2, c)}")
            r = r2
        return links

    def hops(self, src: int, dst: int) -> int:
        if self.kind == TopologyKind.SWITCH:
            return 1
        r0, c0 = self.coords(src)
        r1, c1 = self.coords(dst)
        return abs(r0 - r1) + abs(c0 - c1)

    def transfer_ns(self, src: int, dst: int, nbytes: int) -> int:
        """Contention-free message time: per-hop latency plus one serialization."""
        from .traceio import round_half_up_ns

        if src == dst:
            return 0
        hops = self.hops(src, dst)
        return round_half_up_ns(hops * self.latency_ns + nbytes * self.beta_ns_per_byte)


def parse_topology(spec: str) -> Topology:
    """Parse CLI topology specs: switch:<N>:<bw>:<lat> or mesh:<R>x<C>:<bw>:<lat>."""
    parts = spec.split(":")
    if len(parts) != 4:
        raise FormatError(f"topology spec {spec!r} must have 4 colon-separated fields")
    kind, size, bw, lat = parts
    if kind == "switch":
        try:
            n = int(size)
        except ValueError:
            raise FormatError(f"bad rank count {size!r} in {spec!r}") from None
        return Topology.switch(n, parse_bandwidth(bw), parse_latency(lat))
    if kind == "mesh":
        dims = size.split("x")
        if len(dims) != 2:
            raise FormatError(f"mesh size must be RxC, got {size!r}")
        try:
            rows, cols = int(dims[0]), int(dims[1])
        except ValueError:
            raise FormatError(f"bad mesh size {size!r}") from None
        return Topology.mesh2d(rows, cols, parse_bandwidth(bw), parse_latency(lat))
    raise FormatError(f"unknown topology kind {kind!r}")


_BW_UNITS = {"": 1.0, "B": 1.0, "KB": 1e3, "MB": 1e6, "GB": 1e9, "TB": 1e12}
_LAT_UNITS = {"": 1, "ns": 1, "us": 1000, "ms": 1000 * 1000, "s": 1000 * 1000 * 1000}


def parse_bandwidth(token: str) -> float:
    """Bandwidth in bytes/s; accepts plain numbers or KB/MB/GB/TB suffixes."""
    t = token.strip()
    for unit in sorted(_BW_UNITS, key=len, reverse=True):
        if unit and t.endswith(unit):
            num = t[: -len(unit)]
            break
    else:
        unit, num = "", t
    try:
        val = float(num)
    except ValueError:
        raise FormatError(f"bad bandwidth {token!r}") from None
    if val <= 0:
        raise FormatError(f"bandwidth must be positive, got {token!r}")
    return val * _BW_UNITS[unit]


def parse_latency(token: str) -> int:
    """Latency in integer ns; accepts ns/us/ms/s suffixes."""
    t = token.strip()
    for unit in sorted(_LAT_UNITS, key=len, reverse=True):
        if unit and t.endswith(unit):
            num = t[: -len(unit)]
            break
    else:
        unit, num = "", t
    try:
        val = float(num)
    except ValueError:
        raise FormatError(f"bad latency {token!r}") from None
    if val < 0:
        raise FormatError(f"latency must be non-negative, got {token!r}")
    return int(round(val * _LAT_UNITS[unit]))
