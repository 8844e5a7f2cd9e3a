"""How big are these models, and where does the work go?

Walks the bundled presets: parameter counts against their published sizes,
then the FLOPs of one layer for a long prompt versus a single generated token.
"""
from infersim.config import list_presets, load_model
from infersim.model import Phase, SeqWorkload, kv_cache_bytes, layer_flops, param_count

# %% Parameter counts: 12h^2 per layer plus a tied embedding
print(f"{'preset':<16}{'computed':>12}{'reference':>12}{'error':>8}")
for name in list_presets("models"):
    preset = load_model(name)
    n = param_count(preset.config)
    ref = preset.reference_params
    print(f"{name:<16}{n / 1e9:>11.1f}B{ref / 1e9:>11.1f}B{(n - ref) / ref:>8.1%}")

# %% One 175B layer: prompt of 2048 tokens versus one generated token
cfg = load_model("lm_175b").config
prompt = layer_flops(cfg, SeqWorkload(1, 2048), Phase.PROMPT)
token = layer_flops(cfg, SeqWorkload(1, 2048), Phase.GENERATION)
print(f"\nprompt pass: {prompt / 1e12:.2f} TFLOP per layer")
print(f"one token:   {token / 1e9:.2f} GFLOP per layer ({prompt / token:.0f}x less work)")

# %% The KV cache grows with batch and sequence length
for batch in (1, 8, 64):
    kv = kv_cache_bytes(cfg, SeqWorkload(batch, 2048, 64))
    print(f"KV cache, batch {batch:>2}: {kv / 1e9:7.1f} GB")
