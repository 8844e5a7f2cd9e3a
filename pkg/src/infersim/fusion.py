"""Tile-level dependency analysis and fused partitioning of operator graphs.

Every operator is tiled only along dimensions with no cross-tile data
dependency; reduced dimensions stay inside a tile. A producer/consumer pair
may share a kernel when each consumer tile reads exactly one producer tile.
Tile indices are abstract integers: legality depends only on the dependency
structure, not on physical tile sizes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Mapping, Optional, Sequence

from .costmodel import KernelCost, kernel_time
from .hardware import DeviceSpec


class OpKind(str, Enum):
    ELEMENTWISE = "elementwise"
    REDUCTION = "reduction"
    TRANSPOSE = "transpose"
    GEMM = "gemm"
    QUANTIZE = "quantize"


class Regime(str, Enum):
    SMALL_BATCH = "small_batch"
    LARGE_BATCH = "large_batch"


class GraphError(ValueError):
    pass


TileDep = Mapping[int, frozenset]


@dataclass(frozen=True)
class OpNode:
    name: str
    kind: OpKind
    iter_dims: Mapping[str, int]
    tileable_dims: tuple[str, ...]
    reduce_dims: tuple[str, ...] = ()
    num_tiles: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", OpKind(self.kind))
        object.__setattr__(self, "iter_dims", dict(self.iter_dims))
        object.__setattr__(self, "tileable_dims", tuple(self.tileable_dims))
        object.__setattr__(self, "reduce_dims", tuple(self.reduce_dims))
        dims = set(self.iter_dims)
        if not set(self.tileable_dims) <= dims:
            raise GraphError(f"{self.name}: tileable dims must be iteration dims")
        if not set(self.reduce_dims) <= dims:
            raise GraphError(f"{self.name}: reduce dims must be iteration dims")
        if set(self.reduce_dims) & set(self.tileable_dims):
            raise GraphError(f"{self.name}: a reduction dim cannot be tiled")
        if self.num_tiles < 1:
            raise GraphError(f"{self.name}: num_tiles must be >= 1")

    @property
    def out_elems(self) -> int:
        return math.prod(v for k, v in self.iter_dims.items() if k not in self.reduce_dims)


@dataclass(frozen=True)
class Edge:
    producer: str
    consumer: str
    tile_dep: TileDep

    def __post_init__(self):
        object.__setattr__(
            self, "tile_dep", {int(c): frozenset(int(p) for p in ps) for c, ps in self.tile_dep.items()}
        )


@dataclass
class OpGraph:
    nodes: list[OpNode]
    edges: list[Edge] = field(default_factory=list)
    dtype_bytes: int = 2

    def __post_init__(self):
        names = [n.name for n in self.nodes]
        if len(set(names)) != len(names):
            raise GraphError("duplicate node names")
        self._by_name = {n.name: n for n in self.nodes}
        for e in self.edges:
            if e.producer not in self._by_name or e.consumer not in self._by_name:
                raise GraphError(f"edge {e.producer}->{e.consumer} references an unknown node")
        self.topological_order()

    def node(self, name: str) -> OpNode:
        return self._by_name[name]

    def in_edges(self, name: str) -> list[Edge]:
        return [e for e in self.edges if e.consumer == name]

    def out_edges(self, name: str) -> list[Edge]:
        return [e for e in self.edges if e.producer == name]

    def topological_order(self) -> list[str]:
        """Kahn's algorithm, breaking ties by declaration order."""
        index = {n.name: i for i, n in enumerate(self.nodes)}
        indeg = {n.name: 0 for n in self.nodes}
        for e in self.edges:
            indeg[e.consumer] += 1
        ready = sorted((index[n] for n, d in indeg.items() if d == 0))
        order = []
        while ready:
            name = self.nodes[ready.pop(0)].name
            order.append(name)
            for e in self.out_edges(name):
                indeg[e.consumer] -= 1
                if indeg[e.consumer] == 0:
                    ready.append(index[e.consumer])
                    ready.sort()
        if len(order) != len(self.nodes):
            raise GraphError("operator graph contains a cycle")
        return order

    def to_dict(self) -> dict:
        return {
            "dtype_bytes": self.dtype_bytes,
            "nodes": [
                {
                    "name": n.name,
                    "kind": n.kind.value,
                    "iter_dims": n.iter_dims,
                    "tileable_dims": list(n.tileable_dims),
                    "reduce_dims": list(n.reduce_dims),
                    "num_tiles": n.num_tiles,
                }
                for n in self.nodes
            ],
            "edges": [
                {
                    "producer": e.producer,
                    "consumer": e.consumer,
                    "tile_dep": sorted([c, p] for c, ps in e.tile_dep.items() for p in ps),
                }
                for e in self.edges
            ],
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "OpGraph":
        nodes = [OpNode(**n) for n in raw["nodes"]]
        edges = []
        for e in raw.get("edges", []):
            dep: dict[int, set] = {}
            for c, p in e["tile_dep"]:
                dep.setdefault(c, set()).add(p)
            edges.append(Edge(e["producer"], e["consumer"], dep))
        return cls(nodes, edges, raw.get("dtype_bytes", 2))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "OpGraph":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class FusionRegion:
    members: tuple[str, ...]
    launch_count: int = 1


def fusable(producer: OpNode, consumer: OpNode, tile_dep: TileDep) -> bool:
    return all(len(tile_dep.get(t, ())) == 1 for t in range(consumer.num_tiles))


def _can_join(graph: OpGraph, region: list[str], name: str, regime: Regime) -> bool:
    node = graph.node(name)
    if regime is Regime.LARGE_BATCH:
        if node.kind is OpKind.GEMM or graph.node(region[-1]).kind is OpKind.GEMM:
            return False
    members = set(region)
    links = [e for e in graph.in_edges(name) if e.producer in members]
    if not links:
        return False
    return all(fusable(graph.node(e.producer), node, e.tile_dep) for e in links)


def partition_layer(graph: OpGraph, regime: Regime | str = Regime.SMALL_BATCH) -> list[FusionRegion]:
    """Greedy maximal fusable runs along the topological order.

    In the large-batch regime GeMMs go to a vendor library and stay unfused,
    so each GeMM is a region by itself.
    """
    regime = Regime(regime)
    regions: list[list[str]] = []
    for name in graph.topological_order():
        if regions and _can_join(graph, regions[-1], name, regime):
            regions[-1].append(name)
        else:
            regions.append([name])
    return [FusionRegion(tuple(r)) for r in regions]


def _region_of(regions: Sequence[FusionRegion]) -> dict[str, int]:
    return {m: i for i, r in enumerate(regions) for m in r.members}


def global_traffic_bytes(graph: OpGraph, regions: Optional[Sequence[FusionRegion]] = None) -> int:
    """Intermediate bytes moved through global memory.

    A node's output is written once if any consumer lives in another region
    (or it has no consumer); every cross-region edge reads it back once.
    """
    if regions is None:
        regions = [FusionRegion((n.name,)) for n in graph.nodes]
    where = _region_of(regions)
    total = 0
    for n in graph.nodes:
        size = n.out_elems * graph.dtype_bytes
        outs = graph.out_edges(n.name)
        if not outs or any(where[e.consumer] != where[n.name] for e in outs):
            total += size
        total += size * sum(where[e.consumer] != where[n.name] for e in outs)
    return total


def fusion_savings(
    regions: Sequence[FusionRegion],
    unfused_graph: OpGraph,
    device: Optional[DeviceSpec] = None,
) -> tuple[int, int]:
    """(kernel launches saved, global-memory bytes saved) versus one kernel per op."""
    covered = sorted(m for r in regions for m in r.members)
    if covered != sorted(n.name for n in unfused_graph.nodes):
        raise GraphError("regions must partition the graph's nodes")
    launches = len(unfused_graph.nodes) - len(regions)
    saved = global_traffic_bytes(unfused_graph) - global_traffic_bytes(unfused_graph, regions)
    return launches, saved


def layer_kernel_cost(
    graph: OpGraph,
    regions: Sequence[FusionRegion],
    device: DeviceSpec,
    weight_bytes: float = 0.0,
    flops: float = 0.0,
    cuda_graph: bool = False,
) -> KernelCost:
    """Roofline cost of one layer executed as the given regions."""
    traffic = weight_bytes + global_traffic_bytes(graph, regions)
    return kernel_time(flops, traffic, device, len(regions), cuda_graph, graph.dtype_bytes)


# -- canonical transformer layer ---------------------------------------------

Box = dict  # dim -> (lo, hi)


def _tiles(dims: Mapping[str, int], tile_sizes: Mapping[str, int]) -> list[Box]:
    """Row-major tile boxes over the tiled dims; other dims are whole."""
    axes = []
    for d, size in dims.items():
        step = tile_sizes.get(d)
        if step is None:
            axes.append([(d, (0, size))])
        else:
            axes.append([(d, (lo, min(size, lo + step))) for lo in range(0, size, step)])
    boxes: list[Box] = [{}]
    for axis in axes:
        boxes = [{**b, d: r} for b in boxes for d, r in axis]
    return boxes


def _deps(
    producer_tiles: Sequence[Box],
    consumer_tiles: Sequence[Box],
    needs: Callable[[Box], Iterable[Box]],
) -> dict[int, set]:
    def overlaps(a: Box, b: Box) -> bool:
        return all(a[d][0] < b[d][1] and b[d][0] < a[d][1] for d in b if d in a)

    dep = {}
    for ci, ct in enumerate(consumer_tiles):
        dep[ci] = {
            pi for pi, pt in enumerate(producer_tiles) if any(overlaps(pt, req) for req in needs(ct))
        }
    return dep


class _Builder:
    def __init__(self, dtype_bytes: int):
        self.nodes: list[OpNode] = []
        self.edges: list[Edge] = []
        self.tiles: dict[str, list[Box]] = {}
        self.dtype_bytes = dtype_bytes

    def op(self, name, kind, dims, tile_sizes, reduce=(), out_dims=None):
        tileable = tuple(d for d in dims if d in tile_sizes)
        # tiles cover the output space; reduced dims are never tiled
        space = {d: v for d, v in dims.items() if d not in reduce}
        self.tiles[name] = _tiles(space, tile_sizes)
        self.nodes.append(OpNode(name, kind, dims, tileable, tuple(reduce), len(self.tiles[name])))

    def edge(self, producer, consumer, needs=None):
        if needs is None:
            def needs(ct):
                return [ct]
        self.edges.append(Edge(producer, consumer, _deps(self.tiles[producer], self.tiles[consumer], needs)))


def canonical_layer(
    hidden_dim: int,
    num_heads: int,
    tokens: int = 1,
    dtype_bytes: int = 2,
    token_tile: int = 8,
    col_tile: int = 32,
    ffn_mult: int = 4,
    int8: bool = False,
) -> OpGraph:
    """Operator graph of one pre-LN decoder layer at micro-op granularity.

    Decomposition (an assumption where the layer is not itemised further):
    input layer-norm as mean/var/normalise micro-ops, QKV GeMM, per-head
    transpose + scores + softmax + context, attention-output GeMM with its
    bias/residual add, post-attention layer-norm, intermediate GeMM + GeLU,
    output GeMM + bias/residual add. The attention-output GeMM is tiled by
    token only (the whole row is produced by one block, which is what lets
    the following layer-norm and intermediate GeMM join it). With ``int8`` a
    quantize op precedes every GeMM.
    """
    if hidden_dim % num_heads:
        raise ValueError("hidden_dim must be divisible by num_heads")
    H, T, F, nh, hd = hidden_dim, tokens, ffn_mult * hidden_dim, num_heads, hidden_dim // num_heads
    b = _Builder(dtype_bytes)
    tok = {"tok": token_tile}
    tok_col = {"tok": token_tile, "col": col_tile}
    full_tok = {"tok": (0, T)}

    def ln(prefix, source):
        b.op(f"{prefix}_mean", OpKind.REDUCTION, {"tok": T, "hid": H}, tok, reduce=("hid",))
        b.op(f"{prefix}_var", OpKind.REDUCTION, {"tok": T, "hid": H}, tok, reduce=("hid",))
        b.op(f"{prefix}_norm", OpKind.ELEMENTWISE, {"tok": T, "hid": H}, tok)
        if source is not None:
            b.edge(source, f"{prefix}_mean", lambda ct: [{"tok": ct["tok"]}])
            b.edge(source, f"{prefix}_var", lambda ct: [{"tok": ct["tok"]}])
            b.edge(source, f"{prefix}_norm", lambda ct: [{"tok": ct["tok"]}])
        b.edge(f"{prefix}_mean", f"{prefix}_var")
        b.edge(f"{prefix}_mean", f"{prefix}_norm")
        b.edge(f"{prefix}_var", f"{prefix}_norm")
        return f"{prefix}_norm"

    def gemm(name, source, out, inp, tiles, needs):
        if int8:
            b.op(f"{name}_quant", OpKind.QUANTIZE, {"tok": T, "hid": inp}, tok)
            b.edge(source, f"{name}_quant", needs)
            source, needs = f"{name}_quant", (lambda ct: [{"tok": ct["tok"]}])
        b.op(name, OpKind.GEMM, {"tok": T, "col": out, "in": inp}, tiles, reduce=("in",))
        b.edge(source, name, needs)
        return name

    x = ln("ln_in", None)
    gemm("qkv_gemm", x, 3 * H, H, tok_col, lambda ct: [{"tok": ct["tok"]}])

    def head_cols(ct):
        h0, h1 = ct["head"]
        return [{**full_tok, "col": (s * H + h0 * hd, s * H + h1 * hd)} for s in range(3)]

    b.op("qkv_transpose", OpKind.TRANSPOSE, {"head": nh, "tok": T, "qkv": 3 * hd}, {"head": 1})
    b.edge("qkv_gemm", "qkv_transpose", head_cols)
    b.op("attn_scores", OpKind.REDUCTION, {"head": nh, "q": T, "k": T, "hd": hd}, {"head": 1}, reduce=("hd",))
    b.edge("qkv_transpose", "attn_scores")
    b.op("attn_softmax", OpKind.REDUCTION, {"head": nh, "q": T, "k": T}, {"head": 1})
    b.edge("attn_scores", "attn_softmax")
    b.op("attn_context", OpKind.REDUCTION, {"head": nh, "q": T, "k": T, "hd": hd}, {"head": 1}, reduce=("k",))
    b.edge("attn_softmax", "attn_context")
    b.edge("qkv_transpose", "attn_context")

    gemm("attn_out_gemm", "attn_context", H, H, tok, lambda ct: [{}])
    b.op("attn_bias_residual", OpKind.ELEMENTWISE, {"tok": T, "col": H}, tok)
    b.edge("attn_out_gemm", "attn_bias_residual")
    x = ln("ln_post", "attn_bias_residual")
    gemm("ff1_gemm", x, F, H, tok_col, lambda ct: [{"tok": ct["tok"]}])
    b.op("ff1_gelu", OpKind.ELEMENTWISE, {"tok": T, "col": F}, tok_col)
    b.edge("ff1_gemm", "ff1_gelu")
    gemm("ff2_gemm", "ff1_gelu", H, F, tok_col, lambda ct: [{"tok": ct["tok"]}])
    b.op("ff2_bias_residual", OpKind.ELEMENTWISE, {"tok": T, "col": H}, tok_col)
    b.edge("ff2_gemm", "ff2_bias_residual")
    b.edge("attn_bias_residual", "ff2_bias_residual")
    return OpGraph(b.nodes, b.edges, dtype_bytes)


# membership used to label the four small-batch regions
CANONICAL_REGION_LABELS = (
    ("input layer-norm + QKV GeMM", "qkv_gemm"),
    ("transpose + attention", "attn_softmax"),
    ("post-attention layer-norm + intermediate GeMM", "ff1_gemm"),
    ("bias + residual add", "ff2_bias_residual"),
)
