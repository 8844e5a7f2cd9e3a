"""Weight-streaming inference planner.

Weights are pinned in host DRAM when they fit, otherwise on NVMe, and each
layer is fetched into GPU memory when needed. With ``prefetch_depth >= 1``
the next layer's fetch overlaps the current layer's compute. A fetch group
of N GPUs splits every layer N ways, each GPU reading its share from the
tier and all-gathering the rest over the GPU interconnect; every GPU then
runs its own batch on the full layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

from .costmodel import CollectiveKind, InfeasiblePlanError, collective_time
from .hardware import DeviceSpec, Topology
from .model import ModelConfig, Phase, SeqWorkload, layer_flops, layer_param_bytes, param_bytes


class Tier(str, Enum):
    DRAM = "DRAM"
    NVME = "NVMe"


class Bound(str, Enum):
    COMPUTE = "compute"
    FETCH = "fetch"


@dataclass(frozen=True)
class OffloadPlan:
    pin_tier: Tier
    tier_bandwidth: float
    prefetch_depth: int = 1
    resident_layers: int = 2
    fetch_group: tuple[int, ...] = (0,)

    def __post_init__(self):
        if self.prefetch_depth < 0:
            raise ValueError("prefetch_depth must be >= 0")
        if self.resident_layers < 1 + self.prefetch_depth:
            raise ValueError(
                f"resident_layers {self.resident_layers} cannot hold the current layer "
                f"plus {self.prefetch_depth} prefetched"
            )
        if self.tier_bandwidth <= 0:
            raise ValueError("tier bandwidth must be positive")
        if not self.fetch_group or len(set(self.fetch_group)) != len(self.fetch_group):
            raise ValueError("fetch_group must list distinct devices")

    @property
    def partitioned_fetch(self) -> bool:
        return len(self.fetch_group) > 1

    def to_dict(self) -> dict:
        return {
            "pin_tier": self.pin_tier.value,
            "tier_bandwidth": self.tier_bandwidth,
            "prefetch_depth": self.prefetch_depth,
            "resident_layers": self.resident_layers,
            "partitioned_fetch": self.partitioned_fetch,
            "fetch_group": list(self.fetch_group),
        }


@dataclass(frozen=True)
class ThroughputReport:
    compute_time: float  # first (prompt) pass, per layer
    fetch_time: float
    per_layer_time: float
    total_time: float
    tokens_per_sec: float  # summed over the fetch group
    achieved_flops: float  # per GPU
    bound: Bound

    def to_dict(self) -> dict:
        return {
            "compute_time": self.compute_time,
            "fetch_time": self.fetch_time,
            "per_layer_time": self.per_layer_time,
            "total_time": self.total_time,
            "tokens_per_sec": self.tokens_per_sec,
            "achieved_flops": self.achieved_flops,
            "bound": self.bound.value,
        }


def plan(
    model: ModelConfig,
    topo: Topology,
    batch: int = 1,
    prefetch_depth: int = 1,
    resident_layers: Optional[int] = None,
    fetch_group: Optional[Sequence[int]] = None,
    tier_bandwidth: Optional[float] = None,
    seq_len: Optional[int] = None,
) -> OffloadPlan:
    if model.num_layers < 1:
        raise ValueError("model has no layers to stream")
    if layer_param_bytes(model) > topo.device.mem_bytes:
        raise InfeasiblePlanError(
            f"one layer ({layer_param_bytes(model) / 1e9:.1f} GB) exceeds device memory"
        )
    total = param_bytes(model)
    dram, nvme = topo.tiers.get("DRAM"), topo.tiers.get("NVMe")
    if dram is not None and total <= dram.capacity:
        tier, spec = Tier.DRAM, dram
    elif nvme is not None and total <= nvme.capacity:
        tier, spec = Tier.NVME, nvme
    else:
        raise InfeasiblePlanError(f"{total / 1e9:.1f} GB of weights fit in no host memory tier")
    group = tuple(fetch_group) if fetch_group is not None else (0,)
    for d in group:
        topo.node_of(d)
    p = OffloadPlan(
        pin_tier=tier,
        tier_bandwidth=tier_bandwidth if tier_bandwidth is not None else spec.bandwidth,
        prefetch_depth=prefetch_depth,
        resident_layers=resident_layers if resident_layers is not None else 1 + prefetch_depth,
        fetch_group=group,
    )
    if batch > max_batch(model, p, topo.device, seq_len):
        raise InfeasiblePlanError(f"batch {batch} does not fit beside the resident layers")
    return p


def sequence_bytes(model: ModelConfig, seq_len: int) -> int:
    """GPU bytes one sequence pins: its KV cache over all layers plus the
    widest activation (the 4h feed-forward intermediate)."""
    h, b = model.hidden_dim, model.dtype_bytes
    return 2 * model.num_layers * seq_len * h * b + 4 * seq_len * h * b


def max_batch(
    model: ModelConfig,
    plan: OffloadPlan,
    device: DeviceSpec,
    seq_len: Optional[int] = None,
) -> int:
    seq = model.max_seq if seq_len is None else seq_len
    free = device.mem_bytes - plan.resident_layers * layer_param_bytes(model)
    per_seq = sequence_bytes(model, seq)
    b = int(free // per_seq) if free > 0 else 0
    if b < 1:
        raise InfeasiblePlanError(
            f"no batch fits: {plan.resident_layers} resident layers leave "
            f"{max(free, 0) / 1e9:.2f} GB, one sequence needs {per_seq / 1e9:.2f} GB"
        )
    return b


def fetch_time(model: ModelConfig, plan: OffloadPlan, topo: Topology) -> float:
    layer = layer_param_bytes(model)
    n = len(plan.fetch_group)
    t = layer / plan.tier_bandwidth / n
    if plan.partitioned_fetch:
        t += collective_time(CollectiveKind.ALLGATHER, layer, plan.fetch_group, topo)
    return t


def per_layer_time(compute: float, fetch: float, prefetch_depth: int) -> float:
    return max(compute, fetch) if prefetch_depth >= 1 else compute + fetch


def _compute_time(model: ModelConfig, flops: float, device: DeviceSpec) -> float:
    # weights already in GPU memory are read once per pass
    return max(flops / device.peak_flops(model.dtype_bytes), layer_param_bytes(model) / device.mem_bw)


def throughput(
    model: ModelConfig,
    plan: OffloadPlan,
    workload: SeqWorkload,
    topo: Topology,
) -> ThroughputReport:
    """Stream the model once for the prompt and once per generated token.

    Fetches run back to back across passes, so only the very first fetch is
    exposed as pipeline fill.
    """
    if workload.batch < 1:
        raise ValueError("batch must be >= 1")
    device = topo.device
    fetch = fetch_time(model, plan, topo)
    passes = [layer_flops(model, workload, Phase.PROMPT)]
    for i in range(workload.gen_tokens):
        passes.append(
            layer_flops(model, workload, Phase.GENERATION, context_len=max(workload.prompt_len + i, 1))
        )
    total = fetch
    flops = 0.0
    for f in passes:
        total += model.num_layers * per_layer_time(_compute_time(model, f, device), fetch, plan.prefetch_depth)
        flops += model.num_layers * f
    first = _compute_time(model, passes[0], device)
    tokens = workload.batch * (workload.prompt_len + workload.gen_tokens)
    return ThroughputReport(
        compute_time=first,
        fetch_time=fetch,
        per_layer_time=per_layer_time(first, fetch, plan.prefetch_depth),
        total_time=total,
        tokens_per_sec=len(plan.fetch_group) * tokens / total,
        achieved_flops=flops / total,
        bound=Bound.COMPUTE if first >= fetch else Bound.FETCH,
    )
