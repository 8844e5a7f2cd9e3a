"""Serving a mixture-of-experts layer.

Top-1 gating with a capacity, a table-driven scatter/gather that replaces
the one-hot einsums, and an all-to-all restricted to devices sharing a
tensor-parallel rank.
"""
import numpy as np

from infersim.config import load_model, load_topology
from infersim.moe import (
    RankGrid,
    baseline_alltoall_latency,
    gate_top1,
    orchestrate,
    pcc_latency,
    pcc_plan,
    scatter_gather_dense,
    sparse_oracle,
)

rng = np.random.default_rng(1)
S, E, M = 64, 8, 16
logits, tokens = rng.normal(size=(S, E)), rng.normal(size=(S, M))
expert = lambda e, rows: rows * (e + 1)  # noqa: E731

# %% Gating and the two kernels
assign = gate_top1(logits, capacity_factor=1.0)
print(f"capacity {assign.capacity}, dropped {int((assign.token_to_expert < 0).sum())} of {S}")
dense, n_dense = scatter_gather_dense(tokens, assign, expert)
oracle, n_oracle = sparse_oracle(tokens, logits, 1.0, expert)
print(f"identical outputs: {np.array_equal(dense, oracle)}; work {n_oracle} vs {n_dense} ({n_oracle / n_dense:.0f}x)")

# %% Coordinated all-to-all on 128 GPUs with 8-way tensor slicing
grid = RankGrid(128, 8)
plan = pcc_plan(grid, "reverse")
for step in plan.steps:
    print(f"{step.kind.value:>17}: {len(step.groups)} groups of {len(step.groups[0])}")
c1, c2, c3 = 10e-6, 5e-6, 2e-6
print(f"latency {pcc_latency(grid, c1, c2) * 1e6:.0f} us vs {baseline_alltoall_latency(128, c1, c2) * 1e6:.0f} us")

# %% Placing the 24B+MoE-128 model on 256 GPUs
preset = load_model("moe_24b_128")
pl = preset.parallel
grid = RankGrid(pl.num_gpus, pl.mp_degree, pl.ep_degree, pl.expert_slicing)
placement = orchestrate(preset.config, grid, load_topology("dgx_a100_8x", num_nodes=32))
print(f"per-GPU weights {max(placement.per_device_bytes) / 1e9:.1f} GB; GPU 0 holds {placement.expert_ownership[0]}")
