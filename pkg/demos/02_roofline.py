"""Latency floors and why token generation is memory bound.

A kernel costs max(compute, memory) plus its launch overhead. At batch 1 a
generation step barely touches the tensor cores, so the weights' read time
sets the floor; tensor slicing divides that floor across devices.
"""
from infersim.config import load_model, load_topology
from infersim.costmodel import InfeasiblePlanError, collective_time, kernel_time, min_latency_bound

topo = load_topology("dgx_a100_8x", num_nodes=2)
dev = topo.device
cfg = load_model("gpt_neox_20b").config
h, b = cfg.hidden_dim, cfg.dtype_bytes

# %% One layer's generation step as batch grows
print("batch  compute(us)  memory(us)  regime")
for batch in (1, 16, 128, 1024):
    c = kernel_time(24 * h * h * batch, 12 * h * h * b, dev, dtype=b)
    print(f"{batch:>5}  {c.compute_time * 1e6:>11.1f}  {c.memory_time * 1e6:>10.1f}  {c.regime.value}")

# %% Per-token floor under tensor slicing
for tp in (1, 2, 4, 8):
    try:
        floor = min_latency_bound(cfg, {"tp": tp}, topo)
        print(f"tp={tp}: {floor * 1e3:.2f} ms per token")
    except InfeasiblePlanError as exc:
        print(f"tp={tp}: {exc}")

# %% The price of slicing: two all-reduces per layer
msg = 8 * h * b
for group in ([0, 1], list(range(8)), list(range(16))):
    t = collective_time("allreduce", msg, group, topo)
    print(f"all-reduce over {len(group):>2} GPUs: {t * 1e6:.1f} us")
