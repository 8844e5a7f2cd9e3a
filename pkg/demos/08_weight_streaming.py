"""Running models larger than the GPU by streaming layers from host memory.

Only a couple of layers live on the GPU, so nearly all of its memory goes
to the batch. Big batches make each layer's compute outlast its fetch.
"""
from infersim.config import load_model, load_topology
from infersim.model import SeqWorkload
from infersim.offload import max_batch, plan, throughput

topo = load_topology("a6000_lambda")
peak = topo.device.peak_flops("fp16")

# %% Where the weights live
for name in ("gpt_neox_20b", "gpt_50b", "lm_175b"):
    m = load_model(name).config
    p = plan(m, topo, seq_len=512)
    print(f"{name:>13}: pinned in {p.pin_tier.value}, max batch {max_batch(m, p, topo.device, 512)}")

# %% Throughput against batch for the 175B model on NVMe
m = load_model("lm_175b").config
p = plan(m, topo, seq_len=512)
for batch in (1, 4, 16):
    r = throughput(m, p, SeqWorkload(batch, 512), topo)
    print(f"batch {batch:>2}: {r.achieved_flops / 1e12:6.1f} TFLOPS ({r.achieved_flops / peak:.0%} of peak), {r.bound.value}-bound")

# %% Prefetch matters most when fetch dominates
for depth in (0, 1):
    r = throughput(m, plan(m, topo, prefetch_depth=depth, resident_layers=2, seq_len=512), SeqWorkload(16, 512), topo)
    print(f"prefetch {depth}: {r.per_layer_time * 1e3:.0f} ms per layer")

# %% Splitting each fetch across both GPUs
for group in ([0], [0, 1]):
    r = throughput(m, plan(m, topo, fetch_group=group, seq_len=512), SeqWorkload(16, 512), topo)
    print(f"fetch group {group}: {r.tokens_per_sec:.1f} tokens/s")
