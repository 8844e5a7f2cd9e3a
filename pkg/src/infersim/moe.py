"""Mixture-of-experts inference: gating tables, dense scatter/gather, and
parallelism-coordinated all-to-all routing.

Gating is top-1 with capacity ``c_e = ceil(capacity_factor * S / E)``;
overflow tokens are dropped in ascending token order and ride the residual
path unchanged.

Device layout used throughout: device ``d`` belongs to tensor-parallel group
``d // L`` with tensor rank ``d % L``; for experts it is expert rank
``d // expert_slicing`` holding slice ``d % expert_slicing`` of each of its
experts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .hardware import Topology
from .model import ModelConfig, expert_ffn_params, expert_param_count, param_count

DROPPED = -1

ExpertFn = Callable[[int, np.ndarray], np.ndarray]


class RoutingError(ValueError):
    pass


# -- gating ---------------------------------------------------------------------


@dataclass
class GateAssignment:
    token_to_expert: np.ndarray
    expert_to_token: list[list[int]]
    capacity: int

    @property
    def num_tokens(self) -> int:
        return len(self.token_to_expert)

    @property
    def num_experts(self) -> int:
        return len(self.expert_to_token)

    @property
    def assigned(self) -> int:
        return int(np.count_nonzero(self.token_to_expert != DROPPED))

    def check(self) -> None:
        for e, toks in enumerate(self.expert_to_token):
            if len(toks) > self.capacity:
                raise RoutingError(f"expert {e} holds {len(toks)} tokens, capacity {self.capacity}")
            if list(toks) != sorted(toks):
                raise RoutingError(f"expert {e} token list is not in token order")
            for t in toks:
                if not 0 <= t < self.num_tokens or self.token_to_expert[t] != e:
                    raise RoutingError(f"token {t} listed under expert {e} but mapped elsewhere")
        listed = sum(len(t) for t in self.expert_to_token)
        if listed != self.assigned:
            raise RoutingError("token-to-expert and expert-to-token tables disagree")


def expert_capacity(num_tokens: int, num_experts: int, capacity_factor: float) -> int:
    return math.ceil(capacity_factor * num_tokens / num_experts)


def gate_top1(
    logits: np.ndarray,
    capacity_factor: float = 1.0,
    capacity: Optional[int] = None,
) -> GateAssignment:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] < 1:
        raise ValueError("logits must be S x E with E >= 1")
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    S, E = logits.shape
    c_e = expert_capacity(S, E, capacity_factor) if capacity is None else capacity
    choice = np.argmax(logits, axis=1) if S else np.zeros(0, dtype=int)
    token_to_expert = np.full(S, DROPPED, dtype=np.int64)
    expert_to_token: list[list[int]] = [[] for _ in range(E)]
    # inverse table in one pass over the token table
    for t, e in enumerate(choice):
        if len(expert_to_token[e]) < c_e:
            expert_to_token[e].append(t)
            token_to_expert[t] = e
    return GateAssignment(token_to_expert, expert_to_token, c_e)


# -- dense (table-driven) scatter / gather -----------------------------------


@dataclass
class ScatterBuffer:
    blocks: np.ndarray  # E x c_e x M
    fill: np.ndarray  # tokens held per expert


def scatter(tokens: np.ndarray, assign: GateAssignment) -> tuple[ScatterBuffer, int]:
    tokens = np.asarray(tokens, dtype=np.float64)
    S, M = tokens.shape
    if S != assign.num_tokens:
        raise RoutingError(f"{S} token rows but gate covers {assign.num_tokens}")
    blocks = np.zeros((assign.num_experts, assign.capacity, M))
    fill = np.zeros(assign.num_experts, dtype=np.int64)
    copies = 0
    for e, toks in enumerate(assign.expert_to_token):
        for slot, t in enumerate(toks):
            blocks[e, slot] = tokens[t]
            copies += M
        fill[e] = len(toks)
    return ScatterBuffer(blocks, fill), copies


def gather(processed: np.ndarray, tokens: np.ndarray, assign: GateAssignment) -> tuple[np.ndarray, int]:
    out = np.array(tokens, dtype=np.float64, copy=True)
    copies = 0
    for e, toks in enumerate(assign.expert_to_token):
        for slot, t in enumerate(toks):
            out[t] = processed[e, slot]
            copies += out.shape[1]
    return out, copies


def apply_experts(blocks: np.ndarray, expert_fn: ExpertFn) -> np.ndarray:
    """Run each expert over its whole (zero-padded) capacity block."""
    return np.stack([np.asarray(expert_fn(e, blocks[e]), dtype=np.float64) for e in range(len(blocks))]) \
        if len(blocks) else blocks.copy()


def scatter_gather_dense(
    tokens: np.ndarray,
    assign: GateAssignment,
    expert_fn: ExpertFn,
) -> tuple[np.ndarray, int]:
    """MoE layer through the routing tables; returns (output, element copies)."""
    assign.check()
    buf, n_scatter = scatter(tokens, assign)
    processed = apply_experts(buf.blocks, expert_fn)
    out, n_gather = gather(processed, tokens, assign)
    return out, n_scatter + n_gather


def sparse_oracle(
    tokens: np.ndarray,
    logits: np.ndarray,
    capacity_factor: float,
    expert_fn: ExpertFn,
    capacity: Optional[int] = None,
) -> tuple[np.ndarray, int]:
    """One-hot / cumsum / einsum formulation; returns (output, multiply-adds).

    Both einsums contract over an S x E x c_e dispatch mask, so each costs
    S*E*c_e*M multiply-adds regardless of how sparse the mask is.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    S, M = tokens.shape
    E = logits.shape[1]
    c_e = expert_capacity(S, E, capacity_factor) if capacity is None else capacity
    mask = np.zeros((S, E), dtype=np.int64)
    if S:
        mask[np.arange(S), np.argmax(logits, axis=1)] = 1
    position = np.cumsum(mask, axis=0) * mask - 1  # slot within the chosen expert
    keep = mask * (position < c_e)
    dispatch = np.zeros((S, E, c_e))
    for c in range(c_e):
        dispatch[:, :, c] = keep * (position == c)
    blocks = np.einsum("sec,sm->ecm", dispatch, tokens)
    processed = apply_experts(blocks, expert_fn)
    combined = np.einsum("sec,ecm->sm", dispatch, processed)
    kept = keep.sum(axis=1)[:, None] > 0
    out = np.where(kept, combined, tokens)
    return out, 2 * S * E * c_e * M


# -- parallel layout -----------------------------------------------------------


@dataclass(frozen=True)
class RankGrid:
    """``p`` devices with ``tp`` (L) way tensor slicing of the non-expert part
    (data-parallel across ``p / L`` groups) and ``ep_degree``-way expert
    parallelism, each expert split over ``expert_slicing`` devices."""

    p: int
    tp: int = 1
    ep_degree: Optional[int] = None
    expert_slicing: int = 1

    def __post_init__(self):
        if self.p < 1 or self.tp < 1 or self.expert_slicing < 1:
            raise ValueError("grid degrees must be >= 1")
        if self.p % self.tp:
            raise ValueError(f"p={self.p} not divisible by tensor degree {self.tp}")
        if self.ep_degree is None:
            if self.p % self.expert_slicing:
                raise ValueError("p not divisible by expert_slicing")
            object.__setattr__(self, "ep_degree", self.p // self.expert_slicing)
        if self.ep_degree * self.expert_slicing != self.p:
            raise ValueError(
                f"ep_degree {self.ep_degree} x expert_slicing {self.expert_slicing} != p {self.p}"
            )

    @property
    def L(self) -> int:
        return self.tp

    @property
    def dp_degree(self) -> int:
        return self.p // self.tp

    def coord(self, device: int) -> tuple[int, int]:
        """(tensor-parallel group, tensor rank)."""
        if not 0 <= device < self.p:
            raise ValueError(f"device {device} outside grid of {self.p}")
        return divmod(device, self.tp)

    def device(self, group: int, tp_rank: int) -> int:
        return group * self.tp + tp_rank

    def expert_coord(self, device: int) -> tuple[int, int]:
        """(expert rank, slice index)."""
        return divmod(device, self.expert_slicing)

    def tp_group(self, group: int) -> list[int]:
        return [self.device(group, r) for r in range(self.tp)]

    def same_rank_group(self, tp_rank: int) -> list[int]:
        return [self.device(g, tp_rank) for g in range(self.dp_degree)]

    def expert_owner(self, expert: int, num_experts: int) -> int:
        """Device holding ``expert`` (requires unsliced experts)."""
        if self.expert_slicing != 1:
            raise RoutingError("token routing is modelled for unsliced experts only")
        if num_experts % self.ep_degree:
            raise RoutingError(f"{num_experts} experts do not divide over {self.ep_degree} ranks")
        if not 0 <= expert < num_experts:
            raise RoutingError(f"unknown expert {expert}")
        return expert // (num_experts // self.ep_degree)


# -- PCC -------------------------------------------------------------------------


class StepKind(str, Enum):
    LOCAL_SPLIT = "local_split"
    GROUPED_ALLTOALL = "grouped_alltoall"
    ALLGATHER = "allgather"
    LOCAL_TRANSFORM = "local_transform"


class Direction(str, Enum):
    FORWARD = "forward"  # tensor-sliced -> expert
    REVERSE = "reverse"  # expert -> tensor-sliced


@dataclass(frozen=True)
class PCCStep:
    kind: StepKind
    groups: tuple[tuple[int, ...], ...]


@dataclass(frozen=True)
class PCCPlan:
    direction: Direction
    steps: tuple[PCCStep, ...]

    def step(self, kind: StepKind) -> Optional[PCCStep]:
        return next((s for s in self.steps if s.kind is kind), None)

    def to_dict(self) -> dict:
        return {
            "direction": self.direction.value,
            "steps": [{"kind": s.kind.value, "groups": [list(g) for g in s.groups]} for s in self.steps],
        }


def pcc_plan(grid: RankGrid, direction: Direction | str = Direction.FORWARD) -> PCCPlan:
    direction = Direction(direction)
    singles = tuple((d,) for d in range(grid.p))
    a2a = tuple(tuple(grid.same_rank_group(r)) for r in range(grid.tp))
    steps = [PCCStep(StepKind.LOCAL_SPLIT, singles), PCCStep(StepKind.GROUPED_ALLTOALL, a2a)]
    if direction is Direction.REVERSE:
        ag = tuple(tuple(grid.tp_group(g)) for g in range(grid.dp_degree))
        steps.append(PCCStep(StepKind.ALLGATHER, ag))
    steps.append(PCCStep(StepKind.LOCAL_TRANSFORM, singles))
    return PCCPlan(direction, tuple(steps))


Payload = tuple  # (payload_id, expert) forward; (payload_id, source_group) reverse


@dataclass
class PCCTrace:
    """Per-device holdings after routing plus per-step message statistics."""

    delivered: dict[int, list[Payload]]
    messages: dict[str, int] = field(default_factory=dict)


def _check_replicated(payloads: Mapping[int, Sequence[Payload]], grid: RankGrid) -> None:
    for g in range(grid.dp_degree):
        members = grid.tp_group(g)
        ref = list(payloads.get(members[0], []))
        for d in members[1:]:
            if list(payloads.get(d, [])) != ref:
                raise RoutingError(
                    f"inputs of tensor group {g} are not replicated (device {d} differs from {members[0]})"
                )


def pcc_simulate(
    plan: PCCPlan,
    payloads: Mapping[int, Sequence[Payload]],
    grid: RankGrid,
    num_experts: Optional[int] = None,
) -> PCCTrace:
    """Route payloads step by step through ``plan``.

    Forward: ``payloads[d]`` lists ``(payload_id, expert)`` and must be
    identical across each tensor group; each payload ends at the device
    owning its expert exactly once.

    Reverse: ``payloads[d]`` lists ``(payload_id, source_group)`` results held
    by expert devices; each ends replicated on every device of its source
    tensor group.
    """
    if any(not 0 <= d < grid.p for d in payloads):
        raise RoutingError("payload held by a device outside the grid")
    if plan.direction is Direction.FORWARD:
        if num_experts is None:
            raise ValueError("forward routing needs num_experts")
        _check_replicated(payloads, grid)

        def dest(d: int, item: Payload) -> int:
            return grid.expert_owner(item[1], num_experts)

        # local split: tensor rank r forwards only what lands on rank-r devices
        outbox = {
            d: [it for it in payloads.get(d, []) if dest(d, it) % grid.tp == grid.coord(d)[1]]
            for d in range(grid.p)
        }
    else:
        for d, items in payloads.items():
            for it in items:
                if not 0 <= it[1] < grid.dp_degree:
                    raise RoutingError(f"payload {it[0]} names unknown tensor group {it[1]}")

        def dest(d: int, item: Payload) -> int:
            return grid.device(item[1], grid.coord(d)[1])

        outbox = {d: list(payloads.get(d, [])) for d in range(grid.p)}

    held: dict[int, list[tuple[int, Payload]]] = {d: [] for d in range(grid.p)}
    messages = {"alltoall": 0, "allgather": 0}
    a2a = plan.step(StepKind.GROUPED_ALLTOALL)
    for group in a2a.groups:
        members = set(group)
        for src in group:
            for it in outbox[src]:
                dst = dest(src, it)
                if dst not in members:
                    raise RoutingError(f"payload {it[0]} would leave all-to-all group {group}")
                held[dst].append((src, it))
                if dst != src:
                    messages["alltoall"] += 1

    ag = plan.step(StepKind.ALLGATHER)
    if ag is not None:
        gathered = {}
        for group in ag.groups:
            pool = [x for d in group for x in held[d]]
            for d in group:
                gathered[d] = list(pool)
            messages["allgather"] += len(pool) * (len(group) - 1)
        held = gathered

    # local transform: order by origin device, then arrival order
    delivered = {
        d: [it for _, it in sorted(items, key=lambda x: x[0])] for d, items in held.items()
    }
    return PCCTrace(delivered, messages)


def pcc_latency(
    grid: RankGrid,
    C1: float,
    C2: float,
    C3: float = 0.0,
    direction: Direction | str = Direction.FORWARD,
) -> float:
    """All-to-all latency restricted to same-rank groups of size p/L; the
    reverse direction adds an allgather across the L tensor ranks."""
    direction = Direction(direction)
    t = (grid.p / grid.tp) * C1 + C2
    if direction is Direction.REVERSE:
        t += grid.tp * C3
    return t


def baseline_alltoall_latency(p: int, C1: float, C2: float) -> float:
    return p * C1 + C2


def pcc_constants(topo: Topology, message_bytes: float, inter_node: bool = True) -> tuple[float, float, float]:
    """(C1, C2, C3) from link parameters: per-peer message time, fixed
    latency, per-rank allgather step over the intra-node link."""
    link = topo.inter if inter_node and topo.num_nodes > 1 else topo.intra
    c1 = message_bytes / link.bandwidth
    c2 = link.latency
    c3 = topo.intra.latency + message_bytes / topo.intra.bandwidth
    return c1, c2, c3


# -- orchestration -----------------------------------------------------------------


@dataclass
class Placement:
    grid: RankGrid
    per_device_bytes: list[float]
    non_expert_bytes: list[float]
    expert_bytes: list[float]
    expert_ownership: dict[int, list[tuple[int, int]]]  # device -> [(expert, slice)]
    tp_shard: dict[int, tuple[int, int]]  # device -> (group, tp rank)

    def to_dict(self) -> dict:
        return {
            "p": self.grid.p,
            "tp": self.grid.tp,
            "ep_degree": self.grid.ep_degree,
            "expert_slicing": self.grid.expert_slicing,
            "per_device_bytes": self.per_device_bytes,
            "experts_per_device": {d: len(v) for d, v in self.expert_ownership.items()},
        }


class PlacementError(ValueError):
    pass


def orchestrate(model: ModelConfig, grid: RankGrid, topo: Topology) -> Placement:
    """Shard the non-expert weights L ways (replicated over data-parallel
    groups) and spread experts over expert ranks, slicing each expert across
    ``expert_slicing`` devices."""
    E = model.moe.num_experts if model.moe else 1
    if E % grid.ep_degree:
        raise PlacementError(f"{E} experts do not divide over ep_degree {grid.ep_degree}")
    if grid.p > topo.num_devices:
        raise PlacementError(f"grid needs {grid.p} devices, topology has {topo.num_devices}")
    b = model.dtype_bytes
    expert_params = expert_param_count(model)
    non_expert = (param_count(model) - expert_params) * b
    per_expert = model.num_expert_layers * expert_ffn_params(model.hidden_dim) * b
    per_rank = E // grid.ep_degree

    ownership, tp_shard, ne, ex, total = {}, {}, [], [], []
    for d in range(grid.p):
        rank, piece = grid.expert_coord(d)
        ownership[d] = [(e, piece) for e in range(rank * per_rank, (rank + 1) * per_rank)]
        tp_shard[d] = grid.coord(d)
        ne.append(non_expert / grid.tp)
        ex.append(per_rank * per_expert / grid.expert_slicing)
        total.append(ne[-1] + ex[-1])
        if total[-1] > topo.device.mem_bytes:
            raise PlacementError(
                f"device {d} needs {total[-1] / 1e9:.1f} GB, has {topo.device.mem_bytes / 1e9:.1f} GB"
            )
    return Placement(grid, total, ne, ex, ownership, tp_shard)
