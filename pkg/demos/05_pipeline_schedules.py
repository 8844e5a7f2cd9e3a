"""Pipelining autoregressive generation.

Flushing the pipeline between tokens pays the fill/drain bubble every
token. Letting each micro-batch start its next token as soon as it leaves
the last stage pays it once. Using more micro-batches for the prompt than
for generation helps both phases.
"""
from infersim.model import Phase, SeqWorkload
from infersim.pipeline import PipelineConfig, build_schedule, simulate

unit = lambda phase, size: 1.0  # noqa: E731

# %% Three tokens, four stages, four micro-batches
for mode in ("baseline", "dynamic"):
    tl = simulate(build_schedule(PipelineConfig(4), SeqWorkload(4, 128, 3), mode), unit)
    print(f"{mode}: {tl.total_latency:.0f} slots")
    print(tl.gantt(), "\n")

# %% The bubble amortises over long generations
for G in (1, 4, 16, 64):
    tl = simulate(build_schedule(PipelineConfig(4), SeqWorkload(4, 128, G)), unit)
    print(f"G={G:>2}: idle {tl.idle_fraction:.1%}")

# %% Hybrid micro-batching when prompt cost scales with batch and token cost doesn't
cost = lambda phase, size: float(size) if phase is Phase.PROMPT else 1.0  # noqa: E731
wl = SeqWorkload(32, 128, 10)
for label, cfg, mode in [
    ("uniform P", PipelineConfig(4, 4, 4), "dynamic"),
    ("uniform 2P", PipelineConfig(4, 8, 8), "dynamic"),
    ("hybrid", PipelineConfig.hybrid_default(4), "hybrid"),
]:
    tl = simulate(build_schedule(cfg, wl, mode), cost)
    print(f"{label:>10}: prompt {tl.prompt_latency:5.1f}  generation {tl.generation_latency:5.1f}")
