"""Roofline kernel estimates and collective-communication costs.

Compute and memory traffic are assumed to overlap perfectly, so a kernel
costs ``max(compute, memory)`` plus its launch overhead. Collectives use a
ring all-reduce / all-gather, pairwise all-to-all and binomial broadcast,
all timed on the slowest link the group spans.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

from .hardware import DeviceSpec, Topology, group_link
from .model import ModelConfig, param_bytes


class CollectiveKind(str, Enum):
    ALLREDUCE = "allreduce"
    ALLGATHER = "allgather"
    ALLTOALL = "alltoall"
    BROADCAST = "broadcast"
    P2P = "p2p"


class Regime(str, Enum):
    MEMORY_BOUND = "memory_bound"
    COMPUTE_BOUND = "compute_bound"


class InfeasiblePlanError(ValueError):
    """The requested parallel plan does not fit in device memory."""


@dataclass(frozen=True)
class KernelCost:
    compute_time: float
    memory_time: float
    launch_overhead: float

    @property
    def total(self) -> float:
        return max(self.compute_time, self.memory_time) + self.launch_overhead

    @property
    def regime(self) -> Regime:
        if self.compute_time >= self.memory_time:
            return Regime.COMPUTE_BOUND
        return Regime.MEMORY_BOUND


def kernel_time(
    flops: float,
    bytes_moved: float,
    device: DeviceSpec,
    fused_launches: int = 1,
    cuda_graph: bool = False,
    dtype: int | str = "fp16",
) -> KernelCost:
    if flops < 0 or bytes_moved < 0:
        raise ValueError("flops and bytes_moved must be non-negative")
    if fused_launches < 1:
        raise ValueError("fused_launches must be >= 1")
    launch = 0.0 if cuda_graph else fused_launches * device.kernel_launch_overhead
    return KernelCost(
        compute_time=flops / device.peak_flops(dtype),
        memory_time=bytes_moved / device.mem_bw,
        launch_overhead=launch,
    )


def collective_time(
    kind: CollectiveKind | str,
    bytes_per_rank: float,
    group: Sequence[int],
    topo: Topology,
) -> float:
    """Time of one collective over ``group``.

    ``bytes_per_rank`` is the buffer each rank holds: the reduced vector for
    all-reduce, the gathered output for all-gather, the whole send buffer
    (split evenly across peers) for all-to-all.
    """
    kind = CollectiveKind(kind)
    if not group:
        raise ValueError("empty group")
    if bytes_per_rank < 0:
        raise ValueError("bytes_per_rank must be non-negative")
    for d in group:
        topo.node_of(d)
    link = group_link(topo, group)
    if link is None:
        return 0.0
    n = len(set(group))
    bw, lat = link.bandwidth, link.latency
    if kind is CollectiveKind.ALLREDUCE:
        return 2 * (n - 1) / n * bytes_per_rank / bw + (n - 1) * lat
    if kind is CollectiveKind.ALLGATHER:
        return (n - 1) / n * bytes_per_rank / bw + (n - 1) * lat
    if kind is CollectiveKind.ALLTOALL:
        return (n - 1) * (lat + bytes_per_rank / n / bw)
    if kind is CollectiveKind.BROADCAST:
        return math.ceil(math.log2(n)) * (lat + bytes_per_rank / bw)
    return lat + bytes_per_rank / bw


def min_latency_bound(
    model: ModelConfig,
    plan_degrees: Mapping[str, int],
    topo: Topology,
) -> float:
    """Per-token generation floor: time to stream the weights once.

    Tensor parallelism splits each layer's weights across ``tp`` devices that
    read concurrently; pipeline stages run one after another, so ``pp`` only
    affects whether the plan fits in memory.
    """
    tp = plan_degrees.get("tp", 1)
    pp = plan_degrees.get("pp", 1)
    if tp < 1 or pp < 1:
        raise ValueError("parallel degrees must be >= 1")
    total = param_bytes(model)
    per_device = total / (tp * pp)
    if per_device > topo.device.mem_bytes:
        raise InfeasiblePlanError(
            f"{per_device / 1e9:.1f} GB of weights per device exceeds "
            f"{topo.device.mem_bytes / 1e9:.1f} GB device memory (tp={tp}, pp={pp})"
        )
    return total / tp / topo.device.mem_bw


def classify(flops: float, bytes_moved: float, device: DeviceSpec, dtype: int | str = "fp16") -> Regime:
    return kernel_time(flops, bytes_moved, device, dtype=dtype).regime


def layer_stage_time(
    model: ModelConfig,
    tokens: int,
    context_len: int,
    device: DeviceSpec,
    layers: int,
    tp: int = 1,
    launches_per_layer: int = 4,
    cuda_graph: bool = False,
) -> float:
    """Roofline time for ``layers`` transformer layers over ``tokens`` tokens.

    Helper for building pipeline stage-time functions: weights are read once
    per micro-batch, activations are ignored.
    """
    h = model.hidden_dim
    flops = (24 * h * h * tokens + 4 * tokens * context_len * h) / tp
    weight_bytes = 12 * h * h * model.dtype_bytes / tp
    cost = kernel_time(flops, weight_bytes, device, launches_per_layer, cuda_graph, model.dtype_bytes)
    return layers * cost.total
