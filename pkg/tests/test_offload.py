import pytest
from hypothesis import given, settings, strategies as st

from infersim.config import load_model, load_topology
from infersim.costmodel import InfeasiblePlanError, collective_time
from infersim.model import ModelConfig, SeqWorkload, layer_param_bytes
from infersim.offload import (
    Bound,
    OffloadPlan,
    Tier,
    fetch_time,
    max_batch,
    per_layer_time,
    plan,
    throughput,
)

from conftest import make_topology


@pytest.fixture(scope="module")
def lam():
    return load_topology("a6000_lambda")


def test_pin_tiers_on_lambda(lam):
    assert plan(load_model("lm_175b").config, lam).pin_tier is Tier.NVME
    assert plan(load_model("gpt_neox_20b").config, lam).pin_tier is Tier.DRAM


def test_zero_layers_rejected(lam):
    with pytest.raises(ValueError):
        plan(ModelConfig(1024, 0, 8), lam)


def test_layer_too_big(lam):
    with pytest.raises(InfeasiblePlanError):
        plan(ModelConfig(65536, 2, 64), lam)


def test_model_too_big_for_nvme():
    topo = make_topology(gpus=1, mem_bytes=80e9)
    with pytest.raises(InfeasiblePlanError):
        plan(ModelConfig(20480, 1000, 128), topo)


def test_plan_defaults(lam):
    p = plan(load_model("gpt_neox_20b").config, lam, fetch_group=[0, 1])
    assert p.resident_layers == 2 and p.prefetch_depth == 1 and p.partitioned_fetch
    assert not plan(load_model("gpt_neox_20b").config, lam).partitioned_fetch


def test_plan_window_invariant():
    with pytest.raises(ValueError):
        OffloadPlan(Tier.DRAM, 1e9, prefetch_depth=2, resident_layers=2)


def test_per_layer_examples():
    assert per_layer_time(10e-3, 8e-3, 1) == 10e-3
    assert per_layer_time(10e-3, 8e-3, 0) == pytest.approx(18e-3)


def test_partitioned_fetch_divides(lam):
    m = load_model("gpt_neox_20b").config
    one = plan(m, lam, tier_bandwidth=1e9)
    two = plan(m, lam, tier_bandwidth=1e9, fetch_group=[0, 1])
    ag = collective_time("allgather", layer_param_bytes(m), [0, 1], lam)
    assert fetch_time(m, two, lam) == pytest.approx(fetch_time(m, one, lam) / 2 + ag)


def test_four_way_fetch_example():
    topo = make_topology(gpus=4, mem_bytes=80e9)
    m = ModelConfig(4096, 8, 32)
    bw = layer_param_bytes(m) / 8e-3  # single-GPU fetch of one layer takes 8 ms
    single = fetch_time(m, plan(m, topo, tier_bandwidth=bw), topo)
    four = fetch_time(m, plan(m, topo, tier_bandwidth=bw, fetch_group=[0, 1, 2, 3]), topo)
    assert single == pytest.approx(8e-3)
    ag = collective_time("allgather", layer_param_bytes(m), [0, 1, 2, 3], topo)
    assert four == pytest.approx(2e-3 + ag)


def test_max_batch_fully_resident_smallest(lam):
    m = load_model("gpt_neox_20b").config
    stream = plan(m, lam, seq_len=512)
    full = OffloadPlan(stream.pin_tier, stream.tier_bandwidth, 1, m.num_layers)
    assert max_batch(m, stream, lam.device, 512) > max_batch(m, full, lam.device, 512)
    values = [
        max_batch(m, OffloadPlan(stream.pin_tier, 1e9, 1, r), lam.device, 512) for r in range(2, m.num_layers + 1)
    ]
    assert values == sorted(values, reverse=True)


def test_max_batch_kv_alone_too_big(lam):
    m = load_model("lm_175b").config
    with pytest.raises(InfeasiblePlanError):
        max_batch(m, plan(m, lam, seq_len=16), lam.device, seq_len=200_000)


def test_bound_and_peak(lam):
    m = load_model("lm_175b").config
    p = plan(m, lam)
    small = throughput(m, p, SeqWorkload(1, 512), lam)
    big = throughput(m, p, SeqWorkload(256, 512), lam)
    assert small.bound is Bound.FETCH and big.bound is Bound.COMPUTE
    for r in (small, big):
        assert r.achieved_flops <= lam.device.peak_flops("fp16")


def test_prefetch_never_slower(lam):
    m = load_model("gpt_neox_20b").config
    for b in (1, 4, 16, 64):
        wl = SeqWorkload(b, 512, 2)
        with_pf = throughput(m, plan(m, lam, prefetch_depth=1), wl, lam)
        without = throughput(m, plan(m, lam, prefetch_depth=0, resident_layers=2), wl, lam)
        assert with_pf.total_time <= without.total_time


@settings(max_examples=40, deadline=None)
@given(f=st.floats(1e-6, 1.0), r=st.floats(1.0, 1e3), k=st.floats(1.0, 1e3))
def test_prefetch_benefit_shrinks(f, r, k):
    # sum/max = 1 + f/c once compute dominates, so it falls toward 1 as c/f grows
    ratio = lambda c: per_layer_time(c, f, 0) / per_layer_time(c, f, 1)  # noqa: E731
    assert ratio(r * f) >= 1.0
    assert ratio(r * k * f) <= ratio(r * f) + 1e-12
    assert ratio(1e9 * f) == pytest.approx(1.0)


def test_throughput_monotone_to_max_batch(lam):
    m = load_model("gpt_neox_20b").config
    p = plan(m, lam, seq_len=512)
    top = max_batch(m, p, lam.device, 512)
    rates = [throughput(m, p, SeqWorkload(b, 512), lam).tokens_per_sec for b in range(1, top + 1)]
    assert all(b >= a for a, b in zip(rates, rates[1:]))


def test_near_linear_scaling():
    topo = make_topology(gpus=8, mem_bytes=80e9)
    m = ModelConfig(8192, 8, 64)
    wl = SeqWorkload(1, 64)
    single = throughput(m, plan(m, topo, tier_bandwidth=0.5e9), wl, topo)
    for n in (2, 4, 8):
        p = plan(m, topo, tier_bandwidth=0.5e9, fetch_group=list(range(n)))
        ag = collective_time("allgather", layer_param_bytes(m), p.fetch_group, topo)
        assert ag <= 0.1 * fetch_time(m, p, topo)
        assert throughput(m, p, wl, topo).tokens_per_sec >= 0.9 * n * single.tokens_per_sec
