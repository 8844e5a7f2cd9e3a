import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from infersim.gemm import (
    GemmSchedule,
    GemmShape,
    TilingMode,
    derive_schedule,
    exec_reference,
    pack_factor,
    pack_weights,
    unpack_weights,
)

from conftest import make_device
from oracles import naive_matmul


def dyadic(rng, shape):
    """Random multiples of 2**-8 in [-4, 4]: every partial sum is exact in double."""
    return rng.integers(-1024, 1025, size=shape) / 256.0


@pytest.mark.parametrize("dtype,m", [(2, 2), (1, 4), (4, 1)])
def test_pack_factor(dtype, m):
    assert pack_factor(dtype) == m
    assert derive_schedule(GemmShape(4096, 4096, 1, dtype), make_device(sm_count=108)).pack_M == m


def test_oned_when_enough_output_tiles():
    s = derive_schedule(GemmShape(108 * 32, 1024), make_device(sm_count=108))
    assert s.mode is TilingMode.ONE_D and s.kernel_count == 1 and s.input_tiles == 1


def test_twod_example_n256():
    s = derive_schedule(GemmShape(256, 4096), make_device(sm_count=108))
    assert (s.mode, s.output_tiles, s.input_tiles, s.kernel_count) == (TilingMode.TWO_D, 8, 16, 2)


def test_input_tiles_capped_by_k():
    # K=128 fp16 -> 64 packed groups -> at most 2 input tiles of a full warp each
    s = derive_schedule(GemmShape(32, 128), make_device(sm_count=108))
    assert s.input_tiles == 2


@given(n=st.integers(1, 6000), k=st.integers(1, 20000), sm=st.integers(1, 200), dtype=st.sampled_from([1, 2, 4]))
def test_schedule_invariants(n, k, sm, dtype):
    s = derive_schedule(GemmShape(n, k, 1, dtype), make_device(sm_count=sm))
    assert (s.kernel_count == 2) == (s.mode is TilingMode.TWO_D)
    assert 1 <= s.warps_per_block <= 8
    assert s.input_tiles & (s.input_tiles - 1) == 0
    cap = max(1, -(-k // s.pack_M) // 32)
    widest = 1 << (cap.bit_length() - 1)  # largest power of two input split allowed
    if s.output_tiles * widest >= sm:
        assert s.total_tiles >= sm


def test_schedule_invariant_checks():
    with pytest.raises(ValueError):
        GemmSchedule(TilingMode.ONE_D, 4, 2, 1, 1, 2)
    with pytest.raises(ValueError):
        GemmSchedule(TilingMode.TWO_D, 4, 2, 1, 1, 2)
    with pytest.raises(ValueError):
        GemmSchedule(TilingMode.ONE_D, 4, 1, 1, 1, 3)


def test_pack_identity_for_m1():
    w = np.arange(12.0).reshape(3, 4)
    assert np.array_equal(pack_weights(w, 1).data, w.T.ravel())


def test_pack_2x4_positions():
    w = np.arange(8.0).reshape(2, 4)  # N=2 outputs, K=4 inputs
    p = pack_weights(w, 2)
    for n in range(2):
        for k in range(4):
            assert p.data[(k // 2) * 2 * 2 + n * 2 + k % 2] == w[n, k]
    assert np.array_equal(unpack_weights(p), w)


def test_pack_zero_and_padding():
    p = pack_weights(np.zeros((3, 5)), 4)
    assert not p.data.any() and p.padding == 3 and len(p.data) == 3 * 8


@given(n=st.integers(1, 40), k=st.integers(1, 40), m=st.sampled_from([1, 2, 4]), seed=st.integers(0, 2**31))
def test_pack_roundtrip(n, k, m, seed):
    w = np.random.default_rng(seed).normal(size=(n, k))
    assert np.array_equal(unpack_weights(pack_weights(w, m)), w)


def test_identity_weights():
    x = np.arange(8.0).reshape(2, 4)
    p = pack_weights(np.eye(4), 2)
    s = derive_schedule(GemmShape(4, 4), make_device(sm_count=4))
    assert np.array_equal(exec_reference(p, x, s), x)


def test_zero_weights():
    p = pack_weights(np.zeros((5, 9)), 2)
    s = derive_schedule(GemmShape(5, 9), make_device())
    assert not exec_reference(p, np.ones((3, 9)), s).any()


@pytest.mark.parametrize("sm", [1, 64])
def test_random_8x8_both_modes(sm):
    rng = np.random.default_rng(1)
    w, x = dyadic(rng, (8, 8)), dyadic(rng, (2, 8))
    s = derive_schedule(GemmShape(8, 8), make_device(sm_count=sm))
    assert np.array_equal(exec_reference(pack_weights(w, 2), x, s), naive_matmul(x, w))


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(1, 96),
    k=st.integers(1, 600),
    b=st.integers(1, 3),
    dtype=st.sampled_from([1, 2, 4]),
    sm=st.integers(1, 64),
    seed=st.integers(0, 2**31),
)
def test_exec_matches_naive(n, k, b, dtype, sm, seed):
    rng = np.random.default_rng(seed)
    w, x = dyadic(rng, (n, k)), dyadic(rng, (b, k))
    s = derive_schedule(GemmShape(n, k, b, dtype), make_device(sm_count=sm))
    assert np.array_equal(exec_reference(pack_weights(w, s.pack_M), x, s), naive_matmul(x, w))


def test_exec_shape_errors():
    p = pack_weights(np.ones((4, 6)), 2)
    s = derive_schedule(GemmShape(4, 6), make_device())
    with pytest.raises(ValueError):
        exec_reference(p, np.ones((1, 5)), s)
    with pytest.raises(ValueError):
        exec_reference(pack_weights(np.ones((4, 6)), 4), np.ones((1, 6)), s)
    with pytest.raises(ValueError):
        exec_reference(p, np.ones((1, 6)), derive_schedule(GemmShape(64, 6), make_device()))
