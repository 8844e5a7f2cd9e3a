"""Small-batch GeMM schedule and a functional reference of its execution.

The weight matrix ``W`` is ``N x K`` (output x input). A block owns a
32-wide output tile and, in 2D mode, one slice of the input dimension; its
warps split the block's input range, each lane accumulates one output
column, partials are transposed through "shared memory" and reduced by a
single warp with a shuffle tree. 2D mode merges the input-tile partials in
a second kernel.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .hardware import DeviceSpec

TILE_WIDTH = 32
CACHE_LINE_BYTES = 128
MAX_WARPS_PER_BLOCK = 8


class TilingMode(str, Enum):
    ONE_D = "oneD"
    TWO_D = "twoD"


@dataclass(frozen=True)
class GemmShape:
    out_dim: int
    in_dim: int
    batch: int = 1
    dtype_bytes: int = 2

    def __post_init__(self):
        if min(self.out_dim, self.in_dim, self.batch, self.dtype_bytes) < 1:
            raise ValueError("GemmShape fields must be positive")


@dataclass(frozen=True)
class GemmSchedule:
    mode: TilingMode
    output_tiles: int
    input_tiles: int
    warps_per_block: int
    kernel_count: int
    pack_M: int

    def __post_init__(self):
        if self.pack_M not in (1, 2, 4):
            raise ValueError("pack_M must be 1, 2 or 4")
        if self.mode is TilingMode.ONE_D and (self.input_tiles != 1 or self.kernel_count != 1):
            raise ValueError("oneD schedules have one input tile and one kernel")
        if self.mode is TilingMode.TWO_D and self.kernel_count != 2:
            raise ValueError("twoD schedules need a second reduction kernel")

    @property
    def total_tiles(self) -> int:
        return self.output_tiles * self.input_tiles

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "output_tiles": self.output_tiles,
            "input_tiles": self.input_tiles,
            "warps_per_block": self.warps_per_block,
            "kernel_count": self.kernel_count,
            "pack_M": self.pack_M,
        }


@dataclass(frozen=True)
class PackedWeights:
    data: np.ndarray
    shape: GemmShape
    pack_M: int
    padded_in_dim: int

    @property
    def padding(self) -> int:
        return self.padded_in_dim - self.shape.in_dim


def pack_factor(dtype_bytes: int) -> int:
    """Elements per lane so a 32-lane warp read fills one 128-byte line."""
    return max(1, min(4, CACHE_LINE_BYTES // (TILE_WIDTH * dtype_bytes)))


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def derive_schedule(shape: GemmShape, device: DeviceSpec) -> GemmSchedule:
    m = pack_factor(shape.dtype_bytes)
    out_tiles = _ceil_div(shape.out_dim, TILE_WIDTH)
    k_groups = _ceil_div(shape.in_dim, m)
    if out_tiles >= device.sm_count:
        warps = max(1, min(k_groups // TILE_WIDTH, MAX_WARPS_PER_BLOCK))
        return GemmSchedule(TilingMode.ONE_D, out_tiles, 1, warps, 1, m)

    # smallest power of two reaching sm_count tiles, while every input tile
    # still gets a full warp's worth of packed groups
    max_in_tiles = max(1, k_groups // TILE_WIDTH)
    in_tiles = 1
    while out_tiles * in_tiles < device.sm_count and in_tiles * 2 <= max_in_tiles:
        in_tiles *= 2
    if in_tiles == 1:
        warps = max(1, min(k_groups // TILE_WIDTH, MAX_WARPS_PER_BLOCK))
        return GemmSchedule(TilingMode.ONE_D, out_tiles, 1, warps, 1, m)
    warps = max(1, min(k_groups // in_tiles // TILE_WIDTH, MAX_WARPS_PER_BLOCK))
    return GemmSchedule(TilingMode.TWO_D, out_tiles, in_tiles, warps, 2, m)


def pack_weights(matrix: np.ndarray, pack_M: int, dtype_bytes: int = 2) -> PackedWeights:
    """Relayout ``N x K`` weights so each column holds ``pack_M`` consecutive
    input rows contiguously: flat index ``(k // M) * N * M + n * M + k % M``.
    K is zero-padded up to a multiple of ``pack_M``."""
    w = np.asarray(matrix)
    if w.ndim != 2:
        raise ValueError("weights must be a 2-D matrix")
    if pack_M not in (1, 2, 4):
        raise ValueError("pack_M must be 1, 2 or 4")
    n, k = w.shape
    kp = _ceil_div(k, pack_M) * pack_M
    if kp != k:
        w = np.concatenate([w, np.zeros((n, kp - k), dtype=w.dtype)], axis=1)
    data = w.T.reshape(kp // pack_M, pack_M, n).transpose(0, 2, 1).ravel().copy()
    return PackedWeights(data, GemmShape(n, k, 1, dtype_bytes), pack_M, kp)


def unpack_weights(packed: PackedWeights) -> np.ndarray:
    n, m, kp = packed.shape.out_dim, packed.pack_M, packed.padded_in_dim
    w = packed.data.reshape(kp // m, n, m).transpose(0, 2, 1).reshape(kp, n).T
    return w[:, : packed.shape.in_dim].copy()


def _warp_shuffle_reduce(values: np.ndarray) -> np.ndarray:
    """Butterfly reduction over axis 0, as a single warp would do in registers."""
    vals = values
    width = 1
    while width < vals.shape[0]:
        width *= 2
    if width != vals.shape[0]:
        pad = np.zeros((width - vals.shape[0],) + vals.shape[1:], dtype=vals.dtype)
        vals = np.concatenate([vals, pad])
    while width > 1:
        width //= 2
        vals = vals[:width] + vals[width:]
    return vals[0]


def exec_reference(packed: PackedWeights, x: np.ndarray, schedule: GemmSchedule) -> np.ndarray:
    """Compute ``x @ W.T`` (B x N) by emulating the blocked kernel(s)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    n, k = packed.shape.out_dim, packed.shape.in_dim
    if x.ndim != 2 or x.shape[1] != k or x.shape[0] < 1:
        raise ValueError(f"input must be B x {k} with B >= 1, got {x.shape}")
    if schedule.pack_M != packed.pack_M:
        raise ValueError("schedule and packed weights disagree on pack_M")
    if schedule.output_tiles != _ceil_div(n, TILE_WIDTH):
        raise ValueError("schedule was derived for a different output dimension")
    m, kp = packed.pack_M, packed.padded_in_dim
    groups = kp // m
    w3 = packed.data.astype(np.float64).reshape(groups, n, m)
    xp = np.zeros((x.shape[0], kp))
    xp[:, :k] = x
    xg = xp.reshape(x.shape[0], groups, m)

    in_bounds = np.linspace(0, groups, schedule.input_tiles + 1).astype(int)
    # kernel 1: one block per (output tile, input tile)
    partial_out = np.zeros((schedule.input_tiles, x.shape[0], n))
    for it in range(schedule.input_tiles):
        g0, g1 = in_bounds[it], in_bounds[it + 1]
        warp_bounds = np.linspace(g0, g1, schedule.warps_per_block + 1).astype(int)
        for ot in range(_ceil_div(n, TILE_WIDTH)):
            c0, c1 = ot * TILE_WIDTH, min(n, (ot + 1) * TILE_WIDTH)
            # each warp: lane j owns column c0 + j, reads M contiguous elements per group
            warp_partials = np.zeros((schedule.warps_per_block, x.shape[0], c1 - c0))
            for w in range(schedule.warps_per_block):
                for g in range(warp_bounds[w], warp_bounds[w + 1]):
                    warp_partials[w] += xg[:, g, :] @ w3[g, c0:c1, :].T
            # shared-memory transpose puts a column's partials side by side,
            # then one warp reduces them
            smem = np.ascontiguousarray(np.moveaxis(warp_partials, 0, -1))
            partial_out[it, :, c0:c1] = _warp_shuffle_reduce(np.moveaxis(smem, -1, 0))
    if schedule.input_tiles == 1:
        return partial_out[0]
    # kernel 2: cross-tile reduction
    return _warp_shuffle_reduce(partial_out)

