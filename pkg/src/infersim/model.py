"""Architecture descriptors and parameter / FLOP / byte accounting.

Dense layers are counted as 12*h^2 weights (QKV, attention output and the
two 4h feed-forward matrices). An MoE layer carries ``num_experts`` copies
of the 8*h^2 feed-forward block instead of one. Embeddings are tied and
counted once.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

VALID_DTYPE_BYTES = (1, 2, 4)


class Phase(str, Enum):
    PROMPT = "prompt"
    GENERATION = "generation"


@dataclass(frozen=True)
class MoEConfig:
    num_experts: int
    expert_interval: int = 2
    capacity_factor: float = 1.0
    top_k: int = 1

    def __post_init__(self):
        if self.num_experts < 1:
            raise ValueError(f"num_experts must be >= 1, got {self.num_experts}")
        if self.expert_interval < 1:
            raise ValueError(f"expert_interval must be >= 1, got {self.expert_interval}")
        if not self.capacity_factor > 0:
            raise ValueError(f"capacity_factor must be positive, got {self.capacity_factor}")
        if self.top_k != 1:
            raise ValueError("only top-1 gating is supported")


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int
    num_layers: int
    num_heads: int
    vocab_size: int = 50257
    max_seq: int = 2048
    dtype_bytes: int = 2
    moe: Optional[MoEConfig] = None
    name: str = ""

    def __post_init__(self):
        if self.hidden_dim < 1 or self.num_heads < 1:
            raise ValueError("hidden_dim and num_heads must be positive")
        if self.num_layers < 0 or self.vocab_size < 0 or self.max_seq < 1:
            raise ValueError("num_layers/vocab_size must be >= 0 and max_seq >= 1")
        if self.hidden_dim % self.num_heads:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.dtype_bytes not in VALID_DTYPE_BYTES:
            raise ValueError(f"dtype_bytes must be one of {VALID_DTYPE_BYTES}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def num_expert_layers(self) -> int:
        """Every ``expert_interval``-th layer is an MoE layer; the rest are dense."""
        if self.moe is None:
            return 0
        return self.num_layers // self.moe.expert_interval


@dataclass(frozen=True)
class SeqWorkload:
    batch: int
    prompt_len: int
    gen_tokens: int = 0

    def __post_init__(self):
        if self.batch < 0 or self.prompt_len < 0 or self.gen_tokens < 0:
            raise ValueError("batch, prompt_len and gen_tokens must be non-negative")

    @property
    def total_tokens(self) -> int:
        return self.prompt_len + self.gen_tokens

    def check(self, cfg: ModelConfig) -> None:
        if self.total_tokens > cfg.max_seq:
            raise ValueError(
                f"prompt_len + gen_tokens = {self.total_tokens} exceeds max_seq {cfg.max_seq}"
            )


def dense_layer_params(hidden_dim: int) -> int:
    return 12 * hidden_dim * hidden_dim


def expert_ffn_params(hidden_dim: int) -> int:
    """Weights of one feed-forward expert (h x 4h and 4h x h)."""
    return 8 * hidden_dim * hidden_dim


def param_count(cfg: ModelConfig) -> int:
    total = cfg.num_layers * dense_layer_params(cfg.hidden_dim)
    total += cfg.vocab_size * cfg.hidden_dim
    if cfg.moe is not None:
        total += cfg.num_expert_layers * (cfg.moe.num_experts - 1) * expert_ffn_params(cfg.hidden_dim)
    return total


def expert_param_count(cfg: ModelConfig) -> int:
    """Parameters living inside experts (all copies of the MoE feed-forward blocks)."""
    if cfg.moe is None:
        return 0
    return cfg.num_expert_layers * cfg.moe.num_experts * expert_ffn_params(cfg.hidden_dim)


def param_bytes(cfg: ModelConfig) -> int:
    return param_count(cfg) * cfg.dtype_bytes


def layer_param_bytes(cfg: ModelConfig) -> int:
    """Bytes of the largest transformer layer's weights."""
    n = dense_layer_params(cfg.hidden_dim)
    if cfg.num_expert_layers:
        n += (cfg.moe.num_experts - 1) * expert_ffn_params(cfg.hidden_dim)
    return n * cfg.dtype_bytes


def layer_flops(
    cfg: ModelConfig,
    workload: SeqWorkload,
    phase: Phase | str = Phase.PROMPT,
    context_len: Optional[int] = None,
) -> float:
    """FLOPs of one transformer layer (2 FLOPs per multiply-add).

    Prompt phase processes ``prompt_len`` tokens per sequence with the full
    causal-free ``4*B*s^2*h`` attention term. Generation processes one token
    per sequence attending over ``context_len`` cached positions, which
    defaults to ``max(prompt_len, 1)``.
    """
    phase = Phase(phase)
    h = cfg.hidden_dim
    b = workload.batch
    if phase is Phase.PROMPT:
        s = workload.prompt_len
        return float(2 * dense_layer_params(h) * b * s + 4 * b * s * s * h)
    ctx = max(workload.prompt_len, 1) if context_len is None else context_len
    return float(2 * dense_layer_params(h) * b + 4 * b * ctx * h)


def model_flops(cfg: ModelConfig, workload: SeqWorkload, phase: Phase | str = Phase.PROMPT) -> float:
    return cfg.num_layers * layer_flops(cfg, workload, phase)


def kv_cache_bytes(cfg: ModelConfig, workload: SeqWorkload) -> int:
    return (
        2 * cfg.num_layers * workload.batch * workload.total_tokens
        * cfg.hidden_dim * cfg.dtype_bytes
    )


def kv_bytes_per_token(cfg: ModelConfig) -> int:
    """KV bytes one sequence position adds across all layers."""
    return 2 * cfg.num_layers * cfg.hidden_dim * cfg.dtype_bytes
