"""Moving KV cache to host memory between a micro-batch's visits.

Two GPUs behind one PCIe switch would fight over the link, so even GPUs
only offload even layers and odd GPUs odd layers, and the planner
serialises transfers on each shared link.
"""
from dataclasses import replace

from infersim.config import load_topology
from infersim.model import SeqWorkload
from infersim.pipeline import OffloadInfeasibleError, PipelineConfig, build_schedule, plan_kv_offload, simulate

topo = load_topology("a6000_lambda")
tl = simulate(build_schedule(PipelineConfig(2), SeqWorkload(4, 512, 4)), lambda phase, size: 0.02)

# %% A plan under pressure
actions = plan_kv_offload(tl, topo, kv_bytes_per_layer=50e6, threshold_bytes=0.0)
for d in (0, 1):
    print(f"GPU {d} offloads layers {sorted({a.layer for a in actions if a.device == d})}")
for a in actions[:6]:
    print(f"  {a.direction.value:>9} GPU{a.device} layer {a.layer}: {a.window[0] * 1e3:6.2f}-{a.window[1] * 1e3:6.2f} ms")

# %% A link too slow to bring the cache back in time
slow = replace(topo, pcie=replace(topo.pcie, bandwidth=1e9))
try:
    plan_kv_offload(tl, slow, 50e6, 0.0)
except OffloadInfeasibleError as exc:
    print("\ninfeasible:", exc)
