"""A skinny GeMM schedule and a functional run of it.

With few output columns there are too few tiles to keep every SM busy, so
the input dimension is split too and a second kernel reduces the partials.
Weights are packed so each lane reads a full cache line.
"""
import numpy as np

from infersim.config import load_topology
from infersim.gemm import GemmShape, derive_schedule, exec_reference, pack_weights

dev = load_topology("dgx_a100_8x").device

# %% Schedules for a few shapes
for n, k, dtype in [(12288, 12288, 2), (1024, 4096, 2), (256, 4096, 2), (256, 4096, 1)]:
    s = derive_schedule(GemmShape(n, k, 1, dtype), dev)
    print(f"N={n:>5} K={k:>5} {['', 'int8', 'fp16', '', 'fp32'][dtype]}: {s.to_dict()}")

# %% Execute a 2D schedule and compare with numpy
rng = np.random.default_rng(0)
w = rng.integers(-8, 9, size=(256, 4096)).astype(float)
x = rng.integers(-8, 9, size=(2, 4096)).astype(float)
s = derive_schedule(GemmShape(256, 4096, 2), dev)
y = exec_reference(pack_weights(w, s.pack_M), x, s)
print(f"\n{s.mode.value} with {s.input_tiles} input tiles matches x @ W.T:", np.array_equal(y, x @ w.T))
