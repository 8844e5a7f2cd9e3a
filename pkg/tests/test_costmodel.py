import math

import pytest
from hypothesis import given, strategies as st

from infersim.costmodel import (
    CollectiveKind,
    InfeasiblePlanError,
    Regime,
    classify,
    collective_time,
    kernel_time,
    min_latency_bound,
)
from infersim.model import ModelConfig, param_bytes

from conftest import make_device, make_topology


def test_kernel_roofline_regimes():
    dev = make_device(mem_bw=1e12, peak=100e12)
    c = kernel_time(100e12, 1e9, dev)
    assert c.compute_time == 1.0 and c.memory_time == 1e-3
    assert c.regime is Regime.COMPUTE_BOUND
    assert c.total == pytest.approx(1.0 + 5e-6)
    m = kernel_time(1e9, 1e12, dev, fused_launches=3)
    assert m.regime is Regime.MEMORY_BOUND
    assert m.total == pytest.approx(1.0 + 15e-6)
    assert kernel_time(1e9, 1e12, dev, fused_launches=3, cuda_graph=True).total == 1.0


def test_int8_peak_used():
    dev = make_device(peak=100e12)
    assert kernel_time(200e12, 0, dev, dtype="int8").compute_time == 1.0


@given(f=st.floats(0, 1e15), b=st.floats(0, 1e12))
def test_total_is_max_plus_overhead(f, b):
    dev = make_device()
    c = kernel_time(f, b, dev)
    assert c.total == max(f / dev.peak_flops(), b / dev.mem_bw) + dev.kernel_launch_overhead


def test_classify_boundary():
    dev = make_device(mem_bw=1e12, peak=100e12)
    assert classify(100, 1, dev) is Regime.COMPUTE_BOUND
    assert classify(99, 1, dev) is Regime.MEMORY_BOUND


def test_negative_inputs():
    with pytest.raises(ValueError):
        kernel_time(-1, 0, make_device())


# hand-evaluated on the toy cluster: intra 100 GB/s + 1 us, inter 10 GB/s + 10 us
@pytest.mark.parametrize(
    "kind,group,expected",
    [
        ("allreduce", range(4), 2 * 3 / 4 * 1e9 / 100e9 + 3 * 1e-6),
        ("allgather", range(4), 3 / 4 * 1e9 / 100e9 + 3 * 1e-6),
        ("alltoall", range(4), 3 * (1e-6 + 1e9 / 4 / 100e9)),
        ("broadcast", range(8), 3 * (1e-6 + 1e9 / 100e9)),
        ("broadcast", range(5), 3 * (1e-6 + 1e9 / 100e9)),
        ("p2p", [0, 1], 1e-6 + 1e9 / 100e9),
        ("allreduce", [0, 8], 2 * 1 / 2 * 1e9 / 10e9 + 10e-6),
    ],
)
def test_collective_formulas(kind, group, expected):
    topo = make_topology(nodes=2)
    assert collective_time(kind, 1e9, list(group), topo) == pytest.approx(expected)


def test_singleton_group_free(toy):
    for kind in CollectiveKind:
        assert collective_time(kind, 1e9, [3], toy) == 0.0


def test_collective_bad_group(toy):
    with pytest.raises(ValueError):
        collective_time("allreduce", 1, [], toy)
    with pytest.raises(ValueError):
        collective_time("allreduce", 1, [0, 99], toy)


def test_allreduce_monotone_in_group_size():
    topo = make_topology(nodes=1, gpus=16)
    times = [collective_time("allreduce", 1e8, range(n), topo) for n in range(1, 17)]
    assert times == sorted(times)


def test_min_latency_bound_tp_divides():
    cfg = ModelConfig(hidden_dim=1024, num_layers=8, num_heads=8)
    topo = make_topology(mem_bytes=80e9)
    t1 = min_latency_bound(cfg, {"tp": 1}, topo)
    assert t1 == param_bytes(cfg) / topo.device.mem_bw
    assert min_latency_bound(cfg, {"tp": 4}, topo) == pytest.approx(t1 / 4)
    assert min_latency_bound(cfg, {"tp": 2, "pp": 2}, topo) == pytest.approx(t1 / 2)


def test_min_latency_bound_infeasible():
    cfg = ModelConfig(hidden_dim=4096, num_layers=40, num_heads=32)
    topo = make_topology(mem_bytes=4e9)
    with pytest.raises(InfeasiblePlanError):
        min_latency_bound(cfg, {"tp": 2, "pp": 1}, topo)
    assert math.isfinite(min_latency_bound(cfg, {"tp": 4, "pp": 4}, topo))
