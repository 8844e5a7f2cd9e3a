"""Cluster topology: homogeneous devices, intra/inter-node links and PCIe sharing."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional, Sequence


class LinkKind(str, Enum):
    INTRA_NODE = "intra_node"
    INTER_NODE = "inter_node"
    PCIE = "pcie"


DTYPE_NAMES = {1: "int8", 2: "fp16", 4: "fp32"}


@dataclass(frozen=True)
class DeviceSpec:
    mem_bytes: float
    mem_bw: float
    peak_flops_by_dtype: Mapping[str, float]
    sm_count: int
    kernel_launch_overhead: float = 5e-6

    def __post_init__(self):
        if min(self.mem_bytes, self.mem_bw, self.sm_count, self.kernel_launch_overhead) <= 0:
            raise ValueError("device parameters must be positive")
        peaks = self.peak_flops_by_dtype
        missing = set(DTYPE_NAMES.values()) - set(peaks)
        if missing:
            raise ValueError(f"peak_flops_by_dtype missing {sorted(missing)}")
        if any(v <= 0 for v in peaks.values()):
            raise ValueError("peak flops must be positive")
        if not peaks["int8"] >= peaks["fp16"] >= peaks["fp32"]:
            raise ValueError("expected peak_flops int8 >= fp16 >= fp32")

    def peak_flops(self, dtype: int | str = "fp16") -> float:
        if isinstance(dtype, int):
            dtype = DTYPE_NAMES[dtype]
        return self.peak_flops_by_dtype[dtype]


@dataclass(frozen=True)
class LinkSpec:
    bandwidth: float
    latency: float
    kind: LinkKind

    def __post_init__(self):
        if self.bandwidth <= 0 or self.latency < 0:
            raise ValueError("link bandwidth must be positive and latency non-negative")
        object.__setattr__(self, "kind", LinkKind(self.kind))


@dataclass(frozen=True)
class MemoryTier:
    capacity: float
    bandwidth: float


@dataclass(frozen=True)
class Topology:
    num_nodes: int
    gpus_per_node: int
    device: DeviceSpec
    intra: LinkSpec
    inter: LinkSpec
    pcie: LinkSpec
    pcie_share_pairs: tuple[tuple[int, int], ...] = ()
    tiers: Mapping[str, MemoryTier] = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        seen: set[int] = set()
        for pair in self.pcie_share_pairs:
            for d in pair:
                self._check_id(d)
                if d in seen:
                    raise ValueError(f"device {d} appears in more than one PCIe share pair")
                seen.add(d)
        if self.num_nodes > 1 and self.intra.bandwidth < self.inter.bandwidth:
            raise ValueError("intra-node bandwidth must not be below inter-node bandwidth")

    @property
    def num_devices(self) -> int:
        return self.num_nodes * self.gpus_per_node

    @property
    def device_ids(self) -> range:
        return range(self.num_devices)

    def node_of(self, device_id: int) -> int:
        self._check_id(device_id)
        return device_id // self.gpus_per_node

    def pcie_partner(self, device_id: int) -> Optional[int]:
        for a, b in self.pcie_share_pairs:
            if device_id == a:
                return b
            if device_id == b:
                return a
        return None

    def pcie_group(self, device_id: int) -> tuple[int, ...]:
        """Devices sharing ``device_id``'s PCIe link (itself included), sorted."""
        partner = self.pcie_partner(device_id)
        return (device_id,) if partner is None else tuple(sorted((device_id, partner)))

    def _check_id(self, device_id: int) -> None:
        if not 0 <= device_id < self.num_devices:
            raise ValueError(f"invalid device id {device_id} (have {self.num_devices})")


def build_topology(
    nodes: int,
    gpus_per_node: int,
    device: DeviceSpec,
    intra: LinkSpec,
    inter: LinkSpec,
    pcie: LinkSpec,
    pcie_share_pairs: Optional[Sequence[tuple[int, int]]] = None,
    tiers: Optional[Mapping[str, MemoryTier]] = None,
    name: str = "",
) -> Topology:
    """Assemble a topology; by default devices (2i, 2i+1) within a node share PCIe."""
    if nodes < 1 or gpus_per_node < 1:
        raise ValueError("nodes and gpus_per_node must be >= 1")
    if pcie_share_pairs is None:
        pairs = []
        for node in range(nodes):
            base = node * gpus_per_node
            pairs.extend((base + i, base + i + 1) for i in range(0, gpus_per_node - 1, 2))
    else:
        pairs = [tuple(p) for p in pcie_share_pairs]
    return Topology(
        num_nodes=nodes,
        gpus_per_node=gpus_per_node,
        device=device,
        intra=intra,
        inter=inter,
        pcie=pcie,
        pcie_share_pairs=tuple(pairs),
        tiers=dict(tiers or {}),
        name=name,
    )


def link_between(topo: Topology, a: int, b: int) -> LinkSpec:
    if a == b:
        raise ValueError("link_between needs two distinct devices")
    return topo.intra if topo.node_of(a) == topo.node_of(b) else topo.inter


def group_link(topo: Topology, group: Sequence[int]) -> Optional[LinkSpec]:
    """Slowest link spanned by ``group``; None for a single device."""
    nodes = {topo.node_of(d) for d in group}
    if len(set(group)) < 2:
        return None
    return topo.inter if len(nodes) > 1 else topo.intra
