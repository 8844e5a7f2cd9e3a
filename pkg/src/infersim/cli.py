"""``infersim`` command line: read TOML/JSON inputs, run one analysis, print a
report.

Exit codes: 0 success, 1 unknown subcommand, 2 bad configuration,
3 infeasible plan. Reports are fully built before anything is printed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

from . import costmodel, fusion, gemm, moe, offload, pipeline
from .config import ConfigError, load_model, load_topology
from .model import (
    Phase,
    SeqWorkload,
    expert_param_count,
    kv_cache_bytes,
    layer_param_bytes,
    param_bytes,
    param_count,
)

SCHEMA_VERSION = 1
FORMATS = ("json", "csv", "text")

# keys every report of a command carries, besides schema_version and command
REPORT_KEYS = {
    "params": ("model", "param_count", "param_bytes", "layer_bytes", "expert_params"),
    "estimate": ("model", "plan", "prompt_latency", "token_latency", "total_latency", "min_latency_bound"),
    "schedule": ("config", "timeline"),
    "gemm-schedule": ("shape", "schedule"),
    "fuse": ("regime", "regions", "launches_saved", "bytes_saved"),
    "moe-sim": ("gate", "op_count", "outputs_match", "deliveries", "latency"),
    "pcc": ("grid", "forward", "reverse", "latency"),
    "offload-plan": ("model", "plan", "max_batch", "throughput"),
}


class Infeasible(Exception):
    pass


def validate_report(report: dict) -> None:
    """Raise ValueError unless ``report`` has the published top-level shape."""
    if report.get("schema_version") != SCHEMA_VERSION:
        raise ValueError("missing or unknown schema_version")
    cmd = report.get("command")
    if cmd not in REPORT_KEYS:
        raise ValueError(f"unknown command {cmd!r}")
    missing = [k for k in REPORT_KEYS[cmd] if k not in report]
    if missing:
        raise ValueError(f"{cmd} report lacks {missing}")


# -- formatting -------------------------------------------------------------------


def _flatten(obj: Any, prefix: str = "") -> list[tuple[str, Any]]:
    if isinstance(obj, dict):
        out = []
        for k in sorted(obj, key=str):
            out += _flatten(obj[k], f"{prefix}.{k}" if prefix else str(k))
        return out
    if isinstance(obj, (list, tuple)):
        out = []
        for i, v in enumerate(obj):
            out += _flatten(v, f"{prefix}[{i}]")
        return out or [(prefix, "[]")]
    return [(prefix, obj)]


def render(report: dict, fmt: str, text: Optional[str] = None, table: Optional[list[dict]] = None) -> str:
    if fmt == "json":
        return json.dumps(report, indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        if table:
            cols = sorted(table[0])
            w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            w.writerows(table)
        else:
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["key", "value"])
            w.writerows(_flatten(report))
        return buf.getvalue()
    lines = [f"{k}: {v}" for k, v in _flatten(report) if not k.startswith("timeline.events")]
    if text:
        lines = [text, ""] + lines
    return "\n".join(lines) + "\n"


def _report(command: str, **fields) -> dict:
    return {"schema_version": SCHEMA_VERSION, "command": command, **fields}


def _group(text: Optional[str]) -> Optional[list[int]]:
    if text is None:
        return None
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad device list {text!r}") from exc


# -- subcommands -------------------------------------------------------------------


def cmd_params(args) -> tuple[dict, Optional[str], Optional[list]]:
    preset = load_model(args.model)
    m = preset.config
    rep = _report(
        "params",
        model=m.name or str(args.model),
        param_count=param_count(m),
        param_bytes=param_bytes(m),
        layer_bytes=layer_param_bytes(m),
        expert_params=expert_param_count(m),
        reference_params=preset.reference_params,
    )
    return rep, None, None


def cmd_estimate(args):
    m = load_model(args.model).config
    topo = load_topology(args.topology, args.nodes)
    wl = SeqWorkload(args.batch, args.prompt, args.gen)
    wl.check(m)
    tp, pp = args.tp, args.pp
    if tp * pp > topo.num_devices:
        raise ConfigError(f"tp*pp = {tp * pp} exceeds {topo.num_devices} devices")
    try:
        floor = costmodel.min_latency_bound(m, {"tp": tp, "pp": pp}, topo)
    except costmodel.InfeasiblePlanError as exc:
        raise Infeasible(str(exc)) from exc
    dev, h, b = topo.device, m.hidden_dim, m.dtype_bytes
    group = list(range(tp))

    def pass_time(tokens: int, ctx: int) -> float:
        t = costmodel.layer_stage_time(m, tokens, ctx, dev, m.num_layers, tp, cuda_graph=args.cuda_graph)
        t += 2 * m.num_layers * costmodel.collective_time("allreduce", tokens * h * b, group, topo)
        if pp > 1:
            t += (pp - 1) * costmodel.collective_time("p2p", tokens * h * b, [0, tp], topo)
        return t

    prompt = pass_time(wl.batch * wl.prompt_len, wl.prompt_len) if wl.prompt_len else 0.0
    token = pass_time(wl.batch, max(wl.total_tokens, 1))
    per_layer_gen = costmodel.kernel_time(
        24 * h * h * wl.batch / tp, 12 * h * h * b / tp, dev, dtype=b
    )
    rep = _report(
        "estimate",
        model=m.name or str(args.model),
        topology=topo.name,
        plan={"tp": tp, "pp": pp, "cuda_graph": args.cuda_graph},
        workload={"batch": wl.batch, "prompt": wl.prompt_len, "gen": wl.gen_tokens},
        weights_per_device=param_bytes(m) / (tp * pp),
        kv_cache_bytes=kv_cache_bytes(m, wl),
        prompt_latency=prompt,
        token_latency=token,
        total_latency=prompt + wl.gen_tokens * token,
        min_latency_bound=floor,
        generation_regime=per_layer_gen.regime.value,
    )
    return rep, None, None


def cmd_schedule(args):
    mb_gen = args.mb_gen or args.micro_batches or args.stages
    if args.mb_prompt:
        mb_prompt = args.mb_prompt
    else:
        mb_prompt = 2 * mb_gen if args.mode == "hybrid" else mb_gen
    cfg = pipeline.PipelineConfig(args.stages, mb_prompt, mb_gen)
    batch = args.batch or max(mb_prompt, mb_gen)
    wl = SeqWorkload(batch, args.prompt, args.tokens)
    sched = pipeline.build_schedule(cfg, wl, args.mode)

    def stage_time(phase: Phase, size: int) -> float:
        if phase is Phase.PROMPT and args.prompt_time_per_seq is not None:
            return args.prompt_time_per_seq * size
        return args.stage_time

    tl = pipeline.simulate(sched, stage_time)
    offloads = None
    if args.kv_threshold is not None:
        if args.topology is None:
            raise ConfigError("--kv-threshold needs --topology")
        topo = load_topology(args.topology)
        try:
            acts = pipeline.plan_kv_offload(tl, topo, args.kv_bytes, args.kv_threshold, args.layers_per_stage)
        except pipeline.OffloadInfeasibleError as exc:
            raise Infeasible(str(exc)) from exc
        offloads = [
            {
                "device": a.device,
                "layer": a.layer,
                "direction": a.direction.value,
                "start": a.window[0],
                "end": a.window[1],
                "micro_batch": a.micro_batch,
                "token": a.token,
            }
            for a in acts
        ]
    rep = _report(
        "schedule",
        config={
            "stages": cfg.stages,
            "mb_prompt": cfg.mb_prompt,
            "mb_gen": cfg.mb_gen,
            "mode": sched.mode.value,
            "batch": batch,
            "tokens": args.tokens,
        },
        timeline=tl.to_dict(),
    )
    if offloads is not None:
        rep["kv_offload"] = offloads
    return rep, tl.gantt(), rep["timeline"]["events"]


_DTYPES = {"fp16": 2, "int8": 1, "fp32": 4}


def cmd_gemm(args):
    topo = load_topology(args.topology)
    shape = gemm.GemmShape(args.out_dim, args.in_dim, args.batch, _DTYPES[args.dtype])
    s = gemm.derive_schedule(shape, topo.device)
    rep = _report(
        "gemm-schedule",
        shape={"out_dim": shape.out_dim, "in_dim": shape.in_dim, "batch": shape.batch, "dtype": args.dtype},
        sm_count=topo.device.sm_count,
        schedule=s.to_dict(),
    )
    return rep, None, None


def cmd_fuse(args):
    if args.graph:
        try:
            graph = fusion.OpGraph.from_json(Path(args.graph).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"graph file not found: {args.graph}") from exc
    else:
        graph = fusion.canonical_layer(args.hidden, args.heads, args.tokens, int8=args.int8)
    regions = fusion.partition_layer(graph, args.regime)
    launches, saved = fusion.fusion_savings(regions, graph)
    rep = _report(
        "fuse",
        regime=args.regime,
        nodes=len(graph.nodes),
        regions=[list(r.members) for r in regions],
        launches_saved=launches,
        bytes_saved=saved,
        traffic_unfused=fusion.global_traffic_bytes(graph),
    )
    return rep, None, None


def _load_json(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"instance file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc


def cmd_moe_sim(args):
    """Instance keys: logits (S x E), tokens (S x M), capacity_factor,
    grid {p, tp}, optional C1/C2/C3. Expert ``e`` scales its rows by e+1;
    token ``t`` originates in tensor group ``t % (p / tp)``."""
    inst = _load_json(args.instance)
    try:
        logits = np.asarray(inst["logits"], dtype=np.float64)
        tokens = np.asarray(inst["tokens"], dtype=np.float64)
        cf = float(inst.get("capacity_factor", 1.0))
        grid = moe.RankGrid(int(inst["grid"]["p"]), int(inst["grid"].get("tp", 1)))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed moe instance: {exc!r}") from exc
    if logits.ndim != 2 or tokens.ndim != 2 or len(logits) != len(tokens):
        raise ConfigError("logits and tokens must be S x E and S x M")
    E = logits.shape[1]

    def expert_fn(e, rows):
        return rows * (e + 1)

    assign = moe.gate_top1(logits, cf)
    dense, n_dense = moe.scatter_gather_dense(tokens, assign, expert_fn)
    oracle, n_oracle = moe.sparse_oracle(tokens, logits, cf, expert_fn)

    payloads = {d: [] for d in range(grid.p)}
    for t, e in enumerate(assign.token_to_expert):
        if e == moe.DROPPED:
            continue
        for d in grid.tp_group(t % grid.dp_degree):
            payloads[d].append((t, int(e)))
    trace = moe.pcc_simulate(moe.pcc_plan(grid), payloads, grid, E)
    c1, c2, c3 = (float(inst.get(k, 0.0)) for k in ("C1", "C2", "C3"))
    rep = _report(
        "moe-sim",
        gate={
            "capacity": assign.capacity,
            "token_to_expert": assign.token_to_expert.tolist(),
            "dropped": int(np.count_nonzero(assign.token_to_expert == moe.DROPPED)),
        },
        op_count={
            "dense": n_dense,
            "oracle": n_oracle,
            "ratio": (n_oracle / n_dense) if n_dense else None,
        },
        outputs_match=bool(np.array_equal(dense, oracle)),
        output=dense.tolist(),
        deliveries={str(d): [list(p) for p in v] for d, v in sorted(trace.delivered.items())},
        messages=trace.messages,
        latency={
            "forward": moe.pcc_latency(grid, c1, c2, c3, "forward"),
            "reverse": moe.pcc_latency(grid, c1, c2, c3, "reverse"),
            "baseline": moe.baseline_alltoall_latency(grid.p, c1, c2),
        },
    )
    return rep, None, None


def cmd_pcc(args):
    grid = moe.RankGrid(args.p, args.tp)
    if args.topology:
        topo = load_topology(args.topology, args.nodes)
        c1, c2, c3 = moe.pcc_constants(topo, args.message_bytes)
    else:
        c1, c2, c3 = args.C1, args.C2, args.C3
    rep = _report(
        "pcc",
        grid={"p": grid.p, "tp": grid.tp, "ep_degree": grid.ep_degree, "dp_degree": grid.dp_degree},
        constants={"C1": c1, "C2": c2, "C3": c3},
        forward=moe.pcc_plan(grid, "forward").to_dict(),
        reverse=moe.pcc_plan(grid, "reverse").to_dict(),
        latency={
            "forward": moe.pcc_latency(grid, c1, c2, c3, "forward"),
            "reverse": moe.pcc_latency(grid, c1, c2, c3, "reverse"),
            "baseline": moe.baseline_alltoall_latency(grid.p, c1, c2),
        },
    )
    return rep, None, None


def cmd_offload(args):
    m = load_model(args.model).config
    topo = load_topology(args.topology)
    wl = SeqWorkload(args.batch, args.prompt, args.gen)
    seq = wl.total_tokens or None
    try:
        p = offload.plan(
            m,
            topo,
            args.batch,
            prefetch_depth=args.prefetch,
            resident_layers=args.resident_layers,
            fetch_group=_group(args.fetch_group),
            tier_bandwidth=args.tier_bw,
            seq_len=seq,
        )
        mb = offload.max_batch(m, p, topo.device, seq)
    except costmodel.InfeasiblePlanError as exc:
        raise Infeasible(str(exc)) from exc
    tr = offload.throughput(m, p, wl, topo)
    rep = _report(
        "offload-plan",
        model=m.name or str(args.model),
        topology=topo.name,
        workload={"batch": wl.batch, "prompt": wl.prompt_len, "gen": wl.gen_tokens},
        plan=p.to_dict(),
        max_batch=mb,
        throughput=tr.to_dict(),
        peak_flops=topo.device.peak_flops(m.dtype_bytes),
    )
    return rep, None, None


# -- parser ---------------------------------------------------------------------------


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="infersim", description="Analytic transformer inference simulator.")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND")

    def add(name: str, fn: Callable, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        p.add_argument("--format", choices=FORMATS, default="json")
        p.set_defaults(func=fn)
        return p

    p = add("params", cmd_params, "parameter count of a model")
    p.add_argument("--model", required=True, help="preset name or TOML path")

    p = add("estimate", cmd_estimate, "roofline latency of a tensor/pipeline plan")
    p.add_argument("--model", required=True)
    p.add_argument("--topology", default="dgx_a100_8x")
    p.add_argument("--nodes", type=_positive)
    p.add_argument("--batch", type=_positive, default=1)
    p.add_argument("--prompt", type=_nonneg, default=128)
    p.add_argument("--gen", type=_nonneg, default=32)
    p.add_argument("--tp", type=_positive, default=1)
    p.add_argument("--pp", type=_positive, default=1)
    p.add_argument("--cuda-graph", action="store_true")

    p = add("schedule", cmd_schedule, "simulate a pipeline schedule")
    p.add_argument("--stages", type=_positive, default=4)
    p.add_argument("--micro-batches", type=_positive)
    p.add_argument("--mb-prompt", type=_positive)
    p.add_argument("--mb-gen", type=_positive)
    p.add_argument("--mode", choices=[m.value for m in pipeline.ScheduleMode], default="dynamic")
    p.add_argument("--batch", type=_positive)
    p.add_argument("--prompt", type=_nonneg, default=0)
    p.add_argument("--tokens", type=_positive, default=1, help="token steps, the prompt pass included")
    p.add_argument("--stage-time", type=float, default=1.0)
    p.add_argument("--prompt-time-per-seq", type=float)
    p.add_argument("--topology")
    p.add_argument("--kv-threshold", type=float)
    p.add_argument("--kv-bytes", type=float, default=0.0, help="KV bytes per micro-batch per layer")
    p.add_argument("--layers-per-stage", type=_positive, default=4)

    p = add("gemm-schedule", cmd_gemm, "small-batch GeMM tiling")
    p.add_argument("--out-dim", type=_positive, required=True)
    p.add_argument("--in-dim", type=_positive, required=True)
    p.add_argument("--batch", type=_positive, default=1)
    p.add_argument("--dtype", choices=sorted(_DTYPES), default="fp16")
    p.add_argument("--topology", default="dgx_a100_8x")

    p = add("fuse", cmd_fuse, "fusion regions of a layer graph")
    p.add_argument("--graph", help="operator graph JSON (default: canonical layer)")
    p.add_argument("--hidden", type=_positive, default=256)
    p.add_argument("--heads", type=_positive, default=4)
    p.add_argument("--tokens", type=_positive, default=8)
    p.add_argument("--int8", action="store_true")
    p.add_argument("--regime", choices=[r.value for r in fusion.Regime], default="small_batch")

    p = add("moe-sim", cmd_moe_sim, "gate, scatter/gather and route one MoE instance")
    p.add_argument("--instance", required=True, help="JSON instance file")

    p = add("pcc", cmd_pcc, "coordinated all-to-all plan and latency")
    p.add_argument("--p", type=_positive, required=True)
    p.add_argument("--tp", type=_positive, default=1)
    p.add_argument("--C1", type=float, default=1.0)
    p.add_argument("--C2", type=float, default=0.0)
    p.add_argument("--C3", type=float, default=0.0)
    p.add_argument("--topology")
    p.add_argument("--nodes", type=_positive)
    p.add_argument("--message-bytes", type=float, default=1e6)

    p = add("offload-plan", cmd_offload, "weight-streaming plan and throughput")
    p.add_argument("--model", required=True)
    p.add_argument("--topology", default="a6000_lambda")
    p.add_argument("--batch", type=_positive, default=1)
    p.add_argument("--prompt", type=_nonneg, default=512)
    p.add_argument("--gen", type=_nonneg, default=0)
    p.add_argument("--tier-bw", type=float)
    p.add_argument("--prefetch", type=_nonneg, default=1)
    p.add_argument("--resident-layers", type=_positive)
    p.add_argument("--fetch-group", help="comma-separated device ids, e.g. 0,1")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    names = set(REPORT_KEYS)
    first = next((a for a in argv if not a.startswith("-")), None)
    if first not in names:
        if argv and argv[0] in ("-h", "--help"):
            ap.print_help()
            return 0
        if first is not None:
            print(f"infersim: unknown subcommand {first!r}", file=sys.stderr)
        ap.print_usage(sys.stderr)
        return 1
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    try:
        report, text, table = args.func(args)
        validate_report(report)
        out = render(report, args.format, text, table)
    except Infeasible as exc:
        print(f"infersim: infeasible: {exc}", file=sys.stderr)
        return 3
    except (moe.PlacementError, costmodel.InfeasiblePlanError) as exc:
        print(f"infersim: infeasible: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"infersim: config error: {exc}", file=sys.stderr)
        return 2
    sys.stdout.write(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
