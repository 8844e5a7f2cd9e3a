"""Pipeline-parallel schedules for autoregressive generation.

A schedule is a DAG of units ``(micro_batch, token, stage)``; token 0 is the
prompt pass and every later token is one generation step. Three modes:

* ``baseline``: every token waits for all micro-batches to drain the
  pipeline (a full flush between tokens).
* ``dynamic``: a micro-batch re-enters stage 0 as soon as its own previous
  token leaves the last stage.
* ``hybrid``: dynamic, but the prompt pass uses ``mb_prompt`` micro-batches
  and generation re-splits the batch into ``mb_gen`` micro-batches, with a
  barrier at the phase boundary.

``simulate`` runs a deterministic list scheduler over the DAG, and
``plan_kv_offload`` schedules KV-cache transfers over shared PCIe links.
"""

from __future__ import annotations

import bisect
import heapq
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, Optional

from .hardware import Topology
from .model import Phase, SeqWorkload


class ScheduleMode(str, Enum):
    BASELINE = "baseline"
    DYNAMIC = "dynamic"
    HYBRID = "hybrid"


class OffloadInfeasibleError(RuntimeError):
    """A restore cannot complete before the cache entry is needed again."""

    def __init__(self, device: int, layer: int, micro_batch: int, token: int, detail: str = ""):
        self.device, self.layer, self.micro_batch, self.token = device, layer, micro_batch, token
        msg = (
            f"KV restore for layer {layer} on device {device} "
            f"(micro-batch {micro_batch}, token {token}) misses its deadline"
        )
        super().__init__(msg + (f": {detail}" if detail else ""))


@dataclass(frozen=True)
class PipelineConfig:
    stages: int
    mb_prompt: Optional[int] = None
    mb_gen: Optional[int] = None

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if self.mb_gen is None:
            object.__setattr__(self, "mb_gen", self.stages)
        if self.mb_prompt is None:
            object.__setattr__(self, "mb_prompt", self.mb_gen)
        if self.mb_prompt < 1 or self.mb_gen < 1:
            raise ValueError("micro-batch counts must be >= 1")

    @classmethod
    def hybrid_default(cls, stages: int) -> "PipelineConfig":
        """Twice the pipeline depth for the prompt, the depth itself for generation."""
        return cls(stages, mb_prompt=2 * stages, mb_gen=stages)


@dataclass(frozen=True, order=True)
class Unit:
    token: int
    micro_batch: int
    stage: int


@dataclass
class Schedule:
    config: PipelineConfig
    workload: SeqWorkload
    mode: ScheduleMode
    units: list[Unit]
    deps: dict[Unit, tuple[Unit, ...]]
    mb_sizes: dict[int, list[int]]
    uneven: bool = False

    def phase_of(self, unit: Unit) -> Phase:
        return Phase.PROMPT if unit.token == 0 else Phase.GENERATION

    def size_of(self, unit: Unit) -> int:
        return self.mb_sizes[0 if unit.token == 0 else 1][unit.micro_batch]


@dataclass(frozen=True)
class ScheduleEvent:
    stage: int
    start: float
    duration: float
    micro_batch: int
    token_index: int
    phase: str

    @property
    def end(self) -> float:
        return self.start + self.duration


@dataclass
class SimTimeline:
    events: list[ScheduleEvent]
    stages: int
    total_latency: float
    bubble_time: float
    prompt_latency: float
    generation_latency: float
    schedule: Optional[Schedule] = field(default=None, repr=False)

    @property
    def busy_time(self) -> float:
        return sum(e.duration for e in self.events)

    @property
    def idle_fraction(self) -> float:
        """Share of stage-time spent idle over the whole run, fill and drain included."""
        if self.total_latency == 0:
            return 0.0
        return 1.0 - self.busy_time / (self.stages * self.total_latency)

    def stage_events(self, stage: int) -> list[ScheduleEvent]:
        return [e for e in self.events if e.stage == stage]

    def to_dict(self) -> dict:
        return {
            "stages": self.stages,
            "total_latency": self.total_latency,
            "bubble_time": self.bubble_time,
            "idle_fraction": self.idle_fraction,
            "prompt_latency": self.prompt_latency,
            "generation_latency": self.generation_latency,
            "events": [asdict(e) for e in self.events],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def gantt(self, slot: Optional[float] = None) -> str:
        """One text row per stage; each character is one ``slot`` of time.

        Busy slots show the micro-batch id (base 36), idle slots ``.``.
        """
        if not self.events:
            return ""
        if slot is None:
            slot = min(e.duration for e in self.events)
        width = round(self.total_latency / slot)
        digits = "0123456789abcdefghijklmnopqrstuvwxyz"
        rows = []
        for s in range(self.stages):
            row = ["."] * width
            for e in self.stage_events(s):
                a, b = round(e.start / slot), round(e.end / slot)
                for i in range(a, b):
                    row[i] = digits[e.micro_batch % 36]
            rows.append(f"S{s} |{''.join(row)}|")
        return "\n".join(rows)


def split_batch(batch: int, parts: int) -> list[int]:
    """Near-equal micro-batch sizes; the first ``batch % parts`` get one extra."""
    base, extra = divmod(batch, parts)
    return [base + (i < extra) for i in range(parts)]


def build_schedule(
    cfg: PipelineConfig,
    workload: SeqWorkload,
    mode: ScheduleMode | str = ScheduleMode.DYNAMIC,
) -> Schedule:
    mode = ScheduleMode(mode)
    G, P = workload.gen_tokens, cfg.stages
    if G < 1:
        raise ValueError("gen_tokens must be >= 1")
    if mode is not ScheduleMode.HYBRID and cfg.mb_prompt != cfg.mb_gen:
        raise ValueError(f"{mode.value} mode uses one micro-batch count; got {cfg.mb_prompt} and {cfg.mb_gen}")
    n_prompt, n_gen = cfg.mb_prompt, cfg.mb_gen
    if workload.batch < max(n_prompt, n_gen):
        raise ValueError(f"batch {workload.batch} is smaller than the micro-batch count")
    sizes = {0: split_batch(workload.batch, n_prompt), 1: split_batch(workload.batch, n_gen)}
    uneven = workload.batch % n_prompt != 0 or workload.batch % n_gen != 0
    repartition = n_prompt != n_gen

    units: list[Unit] = []
    deps: dict[Unit, tuple[Unit, ...]] = {}
    for t in range(G):
        count = n_prompt if t == 0 else n_gen
        prev_count = n_prompt if t == 1 else n_gen
        for m in range(count):
            for s in range(P):
                u = Unit(t, m, s)
                units.append(u)
                if s > 0:
                    pred = [Unit(t, m, s - 1)]
                elif t == 0:
                    pred = []
                elif mode is ScheduleMode.BASELINE or (t == 1 and repartition):
                    pred = [Unit(t - 1, mm, P - 1) for mm in range(prev_count)]
                else:
                    pred = [Unit(t - 1, m, P - 1)]
                deps[u] = tuple(pred)
    return Schedule(cfg, workload, mode, units, deps, sizes, uneven)


def simulate(
    schedule: Schedule,
    stage_time_fn: Callable[[Phase, int], float],
) -> SimTimeline:
    """Event-driven list scheduling: one unit per stage at a time, ready
    units served first-come first-served, ties by (token, micro_batch)."""
    P = schedule.config.stages
    remaining = {u: len(p) for u, p in schedule.deps.items()}
    succs: dict[Unit, list[Unit]] = defaultdict(list)
    for u, preds in schedule.deps.items():
        for p in preds:
            succs[p].append(u)

    ready: list[list] = [[] for _ in range(P)]  # per stage heap of (ready_time, token, mb, unit)
    for u in schedule.units:
        if remaining[u] == 0:
            heapq.heappush(ready[u.stage], (0.0, u.token, u.micro_batch, u))
    busy_until = [0.0] * P
    idle = [True] * P
    completions: list = []  # (end, token, mb, stage, unit)
    events: list[ScheduleEvent] = []
    now = 0.0

    def dispatch(t: float) -> None:
        for s in range(P):
            if idle[s] and ready[s] and ready[s][0][0] <= t:
                _, _, _, u = heapq.heappop(ready[s])
                phase = schedule.phase_of(u)
                dur = stage_time_fn(phase, schedule.size_of(u))
                if not dur > 0:
                    raise ValueError(f"stage time must be positive, got {dur}")
                events.append(ScheduleEvent(s, t, dur, u.micro_batch, u.token, phase.value))
                idle[s] = False
                busy_until[s] = t + dur
                heapq.heappush(completions, (t + dur, u.token, u.micro_batch, s, u))

    dispatch(now)
    while completions:
        now = completions[0][0]
        while completions and completions[0][0] == now:
            _, _, _, s, u = heapq.heappop(completions)
            idle[s] = True
            for v in succs[u]:
                remaining[v] -= 1
                if remaining[v] == 0:
                    heapq.heappush(ready[v.stage], (now, v.token, v.micro_batch, v))
        dispatch(now)
    assert len(events) == len(schedule.units), "dependency cycle in schedule"

    total = max((e.end for e in events), default=0.0)
    bubble = 0.0
    for s in range(P):
        evs = sorted((e for e in events if e.stage == s), key=lambda e: e.start)
        bubble += sum(b.start - a.end for a, b in zip(evs, evs[1:]))
    prompt_end = max((e.end for e in events if e.token_index == 0), default=0.0)
    gen = total - prompt_end if any(e.token_index > 0 for e in events) else 0.0
    return SimTimeline(events, P, total, bubble, prompt_end, gen, schedule)


def check_dependencies(timeline: SimTimeline) -> bool:
    """Every unit starts no earlier than all its predecessors end."""
    sched = timeline.schedule
    by_unit = {Unit(e.token_index, e.micro_batch, e.stage): e for e in timeline.events}
    return all(
        by_unit[p].end <= by_unit[u].start + 1e-12
        for u, preds in sched.deps.items()
        for p in preds
    )


# -- KV-cache offloading ------------------------------------------------------


class Direction(str, Enum):
    TO_HOST = "to_host"
    TO_DEVICE = "to_device"


@dataclass(frozen=True)
class OffloadAction:
    device: int
    layer: int
    bytes: float
    window: tuple[float, float]
    direction: Direction
    micro_batch: int
    token: int


class _Link:
    """Reservation calendar of one PCIe link."""

    def __init__(self):
        self.starts: list[float] = []
        self.ends: list[float] = []

    def _insert(self, a: float, b: float) -> tuple[float, float]:
        i = bisect.bisect_left(self.starts, a)
        self.starts.insert(i, a)
        self.ends.insert(i, b)
        return a, b

    def earliest(self, release: float, dur: float) -> tuple[float, float]:
        t = release
        i = max(0, bisect.bisect_right(self.starts, t) - 1)
        while i < len(self.starts):
            if self.ends[i] <= t:
                i += 1
                continue
            if self.starts[i] >= t + dur:
                break
            t = self.ends[i]
            i += 1
        return self._insert(t, t + dur)

    def latest(self, lo: float, deadline: float, dur: float) -> Optional[tuple[float, float]]:
        t = deadline
        i = bisect.bisect_left(self.starts, t) - 1
        while i >= 0:
            if self.starts[i] >= t:
                i -= 1
                continue
            if self.ends[i] <= t - dur:
                break
            t = self.starts[i]
            i -= 1
        if t - dur < lo - 1e-12:
            return None
        return self._insert(t - dur, t)


def plan_kv_offload(
    timeline: SimTimeline,
    topo: Topology,
    kv_bytes_per_layer: float,
    threshold_bytes: float,
    layers_per_stage: int = 4,
) -> list[OffloadAction]:
    """Offload KV entries between a micro-batch's consecutive visits to a stage.

    Stage ``s`` runs on device ``s``; each unit's duration splits evenly over
    ``layers_per_stage`` layers. ``kv_bytes_per_layer`` is one micro-batch's
    KV at one layer. A device whose resident KV exceeds the threshold
    offloads only layers whose (local) index has its own parity, lowest
    first, until it fits. Transfers on a shared PCIe link are serialised:
    offloads as early as possible, restores as late as possible before the
    layer is used again. Raises :class:`OffloadInfeasibleError` when a
    restore cannot make its deadline.
    """
    if threshold_bytes < 0:
        raise ValueError("threshold must be non-negative")
    if timeline.stages > topo.num_devices:
        raise ValueError("more pipeline stages than devices")
    if math.isinf(threshold_bytes):
        return []
    bw, lat = topo.pcie.bandwidth, topo.pcie.latency
    dur = kv_bytes_per_layer / bw + lat
    sched = timeline.schedule
    n_mb = max(sched.config.mb_prompt, sched.config.mb_gen)

    chosen: dict[int, list[int]] = {}
    for d in range(timeline.stages):
        resident = layers_per_stage * n_mb * kv_bytes_per_layer
        layers = []
        for layer in range(d % 2, layers_per_stage, 2):
            if resident <= threshold_bytes:
                break
            layers.append(layer)
            resident -= n_mb * kv_bytes_per_layer
        if layers:
            chosen[d] = layers

    by_key = {(e.stage, e.micro_batch, e.token_index): e for e in timeline.events}
    same_split = sched.config.mb_prompt == sched.config.mb_gen
    requests = []  # (release, deadline, device, layer, mb, token)
    for d, layers in chosen.items():
        for (s, m, t), e in by_key.items():
            if s != d or (t == 0 and not same_split):
                continue
            nxt = by_key.get((s, m, t + 1))
            if nxt is None:
                continue
            a, b = e.duration / layers_per_stage, nxt.duration / layers_per_stage
            for layer in layers:
                release = e.start + (layer + 1) * a
                deadline = nxt.start + layer * b
                requests.append((release, deadline, d, layer, m, t))
    requests.sort()

    links: dict[tuple[int, ...], _Link] = defaultdict(_Link)
    actions = []
    offload_end = {}
    for release, deadline, d, layer, m, t in requests:
        a, b = links[topo.pcie_group(d)].earliest(release, dur)
        offload_end[(d, layer, m, t)] = b
        actions.append(OffloadAction(d, layer, kv_bytes_per_layer, (a, b), Direction.TO_HOST, m, t))
    for release, deadline, d, layer, m, t in sorted(requests, key=lambda r: -r[1]):
        lo = offload_end[(d, layer, m, t)]
        win = links[topo.pcie_group(d)].latest(lo, deadline, dur)
        if win is None:
            raise OffloadInfeasibleError(
                d, layer, m, t + 1,
                f"transfer takes {dur:.3g}s, reuse gap is {deadline - release:.3g}s",
            )
        actions.append(OffloadAction(d, layer, kv_bytes_per_layer, win, Direction.TO_DEVICE, m, t + 1))
    actions.sort(key=lambda x: (x.window[0], x.device, x.layer, x.direction.value))
    return actions
