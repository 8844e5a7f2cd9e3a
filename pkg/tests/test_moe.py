from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from infersim.config import load_model, load_topology
from infersim.model import ModelConfig, MoEConfig, expert_param_count, param_count
from infersim.moe import (
    DROPPED,
    Direction,
    PlacementError,
    RankGrid,
    RoutingError,
    StepKind,
    baseline_alltoall_latency,
    gate_top1,
    orchestrate,
    pcc_latency,
    pcc_plan,
    pcc_simulate,
    scatter_gather_dense,
    sparse_oracle,
)

from conftest import make_topology
from oracles import baseline_alltoall, brute_gate


def scale(e, rows):
    return rows * (e + 1)


def test_gate_single_expert():
    a = gate_top1(np.zeros((5, 1)), capacity_factor=1.0)
    assert a.token_to_expert.tolist() == [0] * 5


def test_gate_example():
    a = gate_top1(np.array([[2, 1], [0, 3], [1, 0], [0, 1]]), 1.0)
    assert a.capacity == 2
    assert a.token_to_expert.tolist() == [0, 1, 0, 1]
    assert a.expert_to_token == [[0, 2], [1, 3]]


def test_gate_drops_in_token_order():
    a = gate_top1(np.array([[1, 0], [1, 0], [1, 0]]), 1.0)
    assert a.capacity == 2 and a.token_to_expert.tolist() == [0, 0, DROPPED]


def test_gate_tie_goes_low():
    assert gate_top1(np.array([[3.0, 3.0, 1.0]]), 1.0).token_to_expert.tolist() == [0]


def test_gate_rejects_nonfinite():
    with pytest.raises(ValueError):
        gate_top1(np.array([[np.nan, 0.0]]))
    with pytest.raises(ValueError):
        gate_top1(np.array([[np.inf, 0.0]]))


def test_gate_empty():
    a = gate_top1(np.zeros((0, 3)))
    assert a.num_tokens == 0 and a.expert_to_token == [[], [], []]


@settings(max_examples=100, deadline=None)
@given(S=st.integers(0, 40), E=st.integers(1, 8), cf=st.sampled_from([0.5, 1.0, 2.0]), seed=st.integers(0, 2**31))
def test_gate_matches_brute_force(S, E, cf, seed):
    logits = np.random.default_rng(seed).integers(-2, 3, size=(S, E)).astype(float)  # frequent ties
    a = gate_top1(logits, cf)
    a.check()
    assert a.token_to_expert.tolist() == brute_gate(logits, a.capacity)


def test_dense_example_scaling():
    logits = np.array([[2, 1], [0, 3], [1, 0], [0, 1]], dtype=float)
    x = np.arange(8.0).reshape(4, 2) + 1
    out, ops = scatter_gather_dense(x, gate_top1(logits, 1.0), scale)
    assert np.array_equal(out, x * np.array([[1], [2], [1], [2]]))
    assert ops == 2 * 4 * 2


def test_dense_identity_and_all_dropped():
    rng = np.random.default_rng(0)
    x, logits = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
    out, _ = scatter_gather_dense(x, gate_top1(logits), lambda e, r: r)
    assert np.array_equal(out, x)
    out, ops = scatter_gather_dense(x, gate_top1(logits, capacity=0), scale)
    assert np.array_equal(out, x) and ops == 0


def test_dense_rejects_inconsistent_table():
    a = gate_top1(np.array([[1.0, 0.0], [0.0, 1.0]]))
    a.expert_to_token[0].append(1)
    with pytest.raises(RoutingError):
        scatter_gather_dense(np.ones((2, 2)), a, scale)
    with pytest.raises(RoutingError):
        scatter_gather_dense(np.ones((3, 2)), gate_top1(np.ones((2, 2))), scale)


def test_op_count_ratio_example():
    # S=16, E=8, balanced routing, c_e = 2
    logits = np.eye(8)[np.arange(16) % 8]
    x = np.ones((16, 4))
    _, dense = scatter_gather_dense(x, gate_top1(logits, 1.0), scale)
    _, oracle = sparse_oracle(x, logits, 1.0, scale)
    assert dense == 2 * 16 * 4
    assert oracle == 2 * 16 * 8 * 2 * 4
    assert oracle / dense >= 8


@settings(max_examples=100, deadline=None)
@given(
    S=st.integers(0, 64),
    E=st.integers(1, 8),
    M=st.integers(1, 16),
    cf=st.sampled_from([0.5, 1.0, 2.0]),
    seed=st.integers(0, 2**31),
)
def test_dense_equals_oracle(S, E, M, cf, seed):
    rng = np.random.default_rng(seed)
    logits, x, w = rng.normal(size=(S, E)), rng.normal(size=(S, M)), rng.normal(size=(E, M, M))
    fn = lambda e, rows: np.tanh(rows @ w[e])  # noqa: E731
    dense, n_dense = scatter_gather_dense(x, gate_top1(logits, cf), fn)
    oracle, n_oracle = sparse_oracle(x, logits, cf, fn)
    assert np.array_equal(dense, oracle)
    if n_dense:
        assert n_oracle / n_dense >= E


# -- grid and PCC ----------------------------------------------------------------


def test_grid_coordinates():
    g = RankGrid(16, 4)
    assert g.ep_degree == 16 and g.dp_degree == 4
    assert [g.coord(d) for d in (0, 5, 15)] == [(0, 0), (1, 1), (3, 3)]
    assert {g.device(*g.coord(d)) for d in range(16)} == set(range(16))
    s = RankGrid(256, 8, 128, 2)
    assert s.expert_coord(5) == (2, 1)


@pytest.mark.parametrize("args", [(10, 4), (8, 2, 3), (8, 2, 4, 4), (0, 1)])
def test_grid_invalid(args):
    with pytest.raises(ValueError):
        RankGrid(*args)


def test_plan_p128_l8():
    plan = pcc_plan(RankGrid(128, 8), "reverse")
    a2a, ag = plan.step(StepKind.GROUPED_ALLTOALL), plan.step(StepKind.ALLGATHER)
    assert len(a2a.groups) == 8 and {len(g) for g in a2a.groups} == {16}
    assert len(ag.groups) == 16 and {len(g) for g in ag.groups} == {8}
    assert sorted(d for g in a2a.groups for d in g) == list(range(128))
    assert pcc_plan(RankGrid(128, 8)).step(StepKind.ALLGATHER) is None


def test_plan_l1_is_global_alltoall():
    plan = pcc_plan(RankGrid(8, 1))
    assert plan.step(StepKind.GROUPED_ALLTOALL).groups == (tuple(range(8)),)


def test_plan_p16_l4():
    assert {len(g) for g in pcc_plan(RankGrid(16, 4)).step(StepKind.GROUPED_ALLTOALL).groups} == {4}


def test_single_payload_hand_trace():
    # p=4, L=2: groups {0,1} and {2,3}; 4 experts, expert 3 lives on device 3
    g = RankGrid(4, 2)
    payloads = {0: [(7, 3)], 1: [(7, 3)], 2: [], 3: []}
    tr = pcc_simulate(pcc_plan(g), payloads, g, 4)
    assert tr.delivered == {0: [], 1: [], 2: [], 3: [(7, 3)]}
    assert tr.messages["alltoall"] == 1  # only tensor rank 1 sends, straight to device 3


def test_empty_payloads():
    g = RankGrid(8, 2)
    tr = pcc_simulate(pcc_plan(g), {}, g, 8)
    assert all(v == [] for v in tr.delivered.values())


def test_non_replicated_rejected():
    g = RankGrid(4, 2)
    with pytest.raises(RoutingError):
        pcc_simulate(pcc_plan(g), {0: [(1, 0)], 1: []}, g, 4)


def test_reverse_replicates_to_source_group():
    g = RankGrid(8, 4)
    results = {5: [(11, 0)], 2: [(12, 1)]}  # payload 11 returns to group 0, 12 to group 1
    tr = pcc_simulate(pcc_plan(g, Direction.REVERSE), results, g)
    for d in g.tp_group(0):
        assert tr.delivered[d] == [(11, 0)]
    for d in g.tp_group(1):
        assert tr.delivered[d] == [(12, 1)]


def random_payloads(rng, g, E, per_group):
    out = {}
    pid = 0
    for grp in range(g.dp_degree):
        items = []
        for _ in range(per_group):
            items.append((pid, int(rng.integers(E))))
            pid += 1
        for d in g.tp_group(grp):
            out[d] = list(items)
    return out


@settings(max_examples=60, deadline=None)
@given(logp=st.integers(0, 5), logl=st.integers(0, 5), experts_per=st.integers(1, 3), seed=st.integers(0, 2**31))
def test_pcc_matches_baseline(logp, logl, experts_per, seed):
    p, L = 2**logp, 2 ** min(logl, logp)
    g = RankGrid(p, L)
    E = p * experts_per
    payloads = random_payloads(np.random.default_rng(seed), g, E, 5)
    tr = pcc_simulate(pcc_plan(g), payloads, g, E)
    got = Counter((d, pid, e) for d, items in tr.delivered.items() for pid, e in items)
    assert got == baseline_alltoall(payloads, p, L, E, g.ep_degree)


def test_latency_closed_forms():
    assert pcc_latency(RankGrid(128, 8), 1.0, 0.0) == 16
    assert pcc_latency(RankGrid(128, 8), 0.0, 1.0) == 1
    assert baseline_alltoall_latency(128, 1.0, 0.0) == 128
    assert pcc_latency(RankGrid(64, 8), 1.0, 1.0, 1.0, "reverse") == 8 + 1 + 8
    assert pcc_latency(RankGrid(32, 1), 2.0, 3.0) == baseline_alltoall_latency(32, 2.0, 3.0)


@given(logp=st.integers(1, 10), logl=st.integers(1, 10), c1=st.floats(1e-9, 1.0), c2=st.floats(0, 1.0))
def test_pcc_faster_than_baseline(logp, logl, c1, c2):
    if logl > logp:
        return
    g = RankGrid(2**logp, 2**logl)
    assert pcc_latency(g, c1, c2) < baseline_alltoall_latency(g.p, c1, c2)


# -- orchestration -------------------------------------------------------------------


def table_ii(name):
    pr = load_model(name)
    pl = pr.parallel
    grid = RankGrid(pl.num_gpus, pl.mp_degree, pl.ep_degree, pl.expert_slicing)
    topo = load_topology("dgx_a100_8x", num_nodes=pl.num_gpus // 8)
    return pr.config, grid, orchestrate(pr.config, grid, topo)


def test_orchestrate_1p3b():
    cfg, grid, pl = table_ii("moe_1p3b_128")
    assert all(len(v) == 1 for v in pl.expert_ownership.values())
    assert sorted(v[0][0] for v in pl.expert_ownership.values()) == list(range(128))


def test_orchestrate_24b_expert_slicing():
    cfg, grid, pl = table_ii("moe_24b_128")
    holders = Counter(e for v in pl.expert_ownership.values() for e, _ in v)
    assert set(holders.values()) == {2}
    slices = {e: sorted(s for v in pl.expert_ownership.values() for ee, s in v if ee == e) for e in (0, 77)}
    assert slices == {0: [0, 1], 77: [0, 1]}
    total_expert = expert_param_count(cfg) * cfg.dtype_bytes
    assert sum(pl.expert_bytes) == pytest.approx(total_expert)
    non_expert = (param_count(cfg) - expert_param_count(cfg)) * cfg.dtype_bytes
    assert sum(pl.non_expert_bytes) == pytest.approx(non_expert * grid.dp_degree)


def test_orchestrate_single_device():
    cfg = ModelConfig(256, 4, 4, vocab_size=1000, moe=MoEConfig(1))
    pl = orchestrate(cfg, RankGrid(1), make_topology(gpus=1))
    assert pl.per_device_bytes == [param_count(cfg) * cfg.dtype_bytes]


def test_orchestrate_errors():
    cfg = ModelConfig(4096, 32, 32, moe=MoEConfig(6))
    with pytest.raises(PlacementError):
        orchestrate(cfg, RankGrid(4), make_topology(gpus=4))
    with pytest.raises(PlacementError):
        orchestrate(ModelConfig(8192, 64, 64, moe=MoEConfig(2)), RankGrid(2), make_topology(gpus=2, mem_bytes=1e9))
    with pytest.raises(PlacementError):
        orchestrate(ModelConfig(64, 2, 2, moe=MoEConfig(16)), RankGrid(16), make_topology(gpus=8))
