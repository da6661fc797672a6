import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedshade import fedproto, radionet
from fedshade.fedproto import (
    ClientUpdate,
    RoundPlan,
    aggregate,
    apply_update,
    fedsgd_step,
    guarded_step,
    local_train,
    make_clients,
    noise_attenuation_check,
    phase_for_round,
    select_clients,
)
from fedshade.gradcore import ParamVector
from fedshade.rng import stream
from fedshade.synthdata import partition_clients


@pytest.fixture(scope="module")
def clients(small_data):
    shards, _ = partition_clients(small_data.map_id, 3, stream(0, "partition"))
    return make_clients(small_data, shards)


def test_client_weights_sum_to_one(clients):
    assert abs(sum(c.p_k for c in clients) - 1.0) < 1e-12


def test_select_all_and_deterministic():
    assert select_clients(stream(1), 5, 5) == (0, 1, 2, 3, 4)
    assert select_clients(stream(9, 2), 14, 6) == select_clients(stream(9, 2), 14, 6)
    with pytest.raises(ValueError):
        select_clients(stream(1), 3, 4)


def test_select_single_client_frequencies():
    K, n = 7, 10_000
    rng = stream(4, "select")
    counts = np.bincount([select_clients(rng, K, 1)[0] for _ in range(n)], minlength=K)
    sd = np.sqrt(n * (1 / K) * (1 - 1 / K))
    assert np.all(np.abs(counts - n / K) < 3 * sd + 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 20), st.data())
def test_selection_is_sorted_distinct_subset(K, data):
    m = data.draw(st.integers(1, K))
    sel = select_clients(stream(data.draw(st.integers(0, 999))), K, m)
    assert len(set(sel)) == m and list(sel) == sorted(sel) and all(0 <= k < K for k in sel)


def test_phase_schedule():
    assert [phase_for_round(r, 2) for r in range(4)] == ["stage1", "stage1", "stage2", "stage2"]


def test_zero_epochs_zero_delta(params, clients):
    plan = RoundPlan(0, "stage1", (0,), local_epochs=0)
    upd = local_train(params, clients[0], plan, stream(0))
    assert not upd.delta.data.any()


def test_single_sample_step_is_negative_lr_gradient(params, small_data):
    one = make_clients(small_data, [np.array([0])])[0]
    plan = RoundPlan(0, "stage2", (0,), local_epochs=1, batch_size=4, local_lr=0.1)
    upd = local_train(params, one, plan, stream(0))
    _, g = radionet.loss_and_grad(params, small_data.inputs()[:1], small_data.targets()[:1], "stage2")
    assert np.linalg.norm(g.data) < plan.max_grad_norm
    assert np.allclose(upd.delta.data, -0.1 * g.data, rtol=1e-12, atol=1e-15)
    assert not upd.delta.data[~radionet.stage_mask(params.layout, "stage2")].any()


@pytest.mark.parametrize("phase", ["stage1", "stage2"])
def test_frozen_coordinates_zero(params, clients, phase):
    upd = local_train(params, clients[1], RoundPlan(0, phase, (1,), batch_size=4), stream(2))
    frozen = ~radionet.stage_mask(params.layout, phase)
    assert not upd.delta.data[frozen].any()
    assert upd.delta.data[~frozen].any()


def test_fedsgd_step(params, clients, small_data):
    plan = RoundPlan(0, "joint", (0,), batch_size=3, local_lr=0.2)
    a = fedsgd_step(params, clients[0], plan, stream(3))
    b = fedsgd_step(params, clients[0], plan, stream(3))
    assert np.array_equal(a.delta.data, b.delta.data) and a.sample_count == 3
    idx = stream(3).permutation(len(clients[0].shard))[:3]
    shard = clients[0].shard
    _, g = radionet.loss_and_grad(params, shard.inputs()[idx], shard.targets()[idx], "joint")
    assert np.allclose(a.delta.data, -0.2 * g.data, rtol=1e-12, atol=1e-15)


def test_empty_shard_rejected(params, small_data):
    empty = make_clients(small_data, [np.array([0]), np.array([], dtype=np.int64)])[1]
    with pytest.raises(ValueError):
        local_train(params, empty, RoundPlan(0, "stage1", (1,)), stream(0))
    with pytest.raises(ValueError):
        fedsgd_step(params, empty, RoundPlan(0, "joint", (1,)), stream(0))


def test_guarded_step_caps_norm(params):
    g = params.with_data(np.full(params.size, 10.0))
    out = guarded_step(params, g, 1.0, 5.0)
    assert np.linalg.norm(out.data - params.data) == pytest.approx(5.0)
    free = guarded_step(params, g, 1.0, None)
    assert np.allclose(free.data - params.data, -g.data)


def _update(params, k, vec, count):
    return ClientUpdate(k, 0, params.with_data(np.asarray(vec, dtype=np.float64)), count)


def test_aggregate_examples(params, rng):
    u, v = rng.standard_normal((2, params.size))
    same = aggregate([_update(params, 0, u, 2), _update(params, 1, u, 5)])
    assert np.allclose(same.data, u)
    weighted = aggregate([_update(params, 0, u, 1), _update(params, 1, v, 3)])
    assert np.allclose(weighted.data, (u + 3 * v) / 4)
    with pytest.raises(ValueError):
        aggregate([])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.integers(2, 6))
def test_aggregate_order_invariant(seed, n):
    params = radionet.init_params(stream(0), radionet.NetConfig())
    rng = np.random.default_rng(seed)
    ups = [_update(params, k, rng.standard_normal(params.size), int(rng.integers(1, 9))) for k in range(n)]
    perm = rng.permutation(n)
    a = aggregate(ups)
    b = aggregate([ups[i] for i in perm])
    assert np.array_equal(a.data, b.data)


def test_equal_counts_plain_mean(params, rng):
    vecs = rng.standard_normal((6, params.size))
    agg = aggregate([_update(params, k, vecs[k], 4) for k in range(6)])
    assert np.allclose(agg.data, vecs.mean(axis=0))


@pytest.mark.parametrize("phase", ["stage1", "stage2"])
def test_apply_update_keeps_frozen(params, rng, phase):
    agg = params.with_data(rng.standard_normal(params.size))
    new = apply_update(params, agg, phase)
    frozen = ~radionet.stage_mask(params.layout, phase)
    assert np.array_equal(new.data[frozen], params.data[frozen])
    assert np.allclose(new.data[~frozen], params.data[~frozen] + agg.data[~frozen])


@pytest.mark.parametrize("K_r,sigma,target", [(1, 2.0, 2.0), (4, 1.0, 0.5), (6, 1.0, 0.4082)])
def test_noise_attenuation(K_r, sigma, target):
    std = noise_attenuation_check(sigma, K_r, 10_000, stream(8, K_r))
    assert np.all(np.abs(std - target) / target < 0.05)


def test_noise_attenuation_needs_trials():
    with pytest.raises(ValueError):
        noise_attenuation_check(1.0, 2, 100, stream(0))


def test_aggregated_noise_mean_vanishes():
    trials, K_r, sigma = 10_000, 6, 1.5
    noise = stream(5, "mean").normal(0, sigma, (trials, K_r, 8)).mean(axis=1)
    assert np.all(np.abs(noise.mean(axis=0)) < 4 * sigma / np.sqrt(trials * K_r))
