"""Fusing a transformer layer at tile granularity.

Two operators fuse when every tile of the consumer reads exactly one tile
of the producer. Greedily extending regions along the layer gives four
kernels at small batch; at large batch the GeMMs stay on their own.
"""
from infersim.fusion import canonical_layer, fusion_savings, partition_layer

graph = canonical_layer(hidden_dim=1600, num_heads=25, tokens=1)
print(f"{len(graph.nodes)} micro-ops in the unfused layer\n")

# %% Small batch: four regions
regions = partition_layer(graph, "small_batch")
for i, r in enumerate(regions, 1):
    print(f"kernel {i}: {', '.join(r.members)}")
launches, saved = fusion_savings(regions, graph)
print(f"\n{launches} launches and {saved / 1024:.1f} KiB of global traffic saved")

# %% Large batch: GeMMs go to the vendor library unfused
big = canonical_layer(1600, 25, tokens=32)
for r in partition_layer(big, "large_batch"):
    print("  ", " + ".join(r.members))
