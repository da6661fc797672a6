import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedshade.gradcore import grad_check
from fedshade.radionet import (
    TX_CHANNEL,
    NetConfig,
    build_group_masks,
    forward_stage1,
    forward_stage2,
    init_params,
    loss_and_grad,
    net_layout,
    predict,
    stage_mask,
)
from fedshade.rng import stream
from fedshade.synthdata import MapSpec, generate_dataset

GOLDEN = json.loads((Path(__file__).parent / "golden" / "reference.json").read_text())


def test_param_count_frozen():
    assert net_layout(NetConfig())[-1].stop == GOLDEN["param_count"]


def test_zero_params_zero_output(small_data, params):
    zero = params.zeros_like()
    x = small_data.inputs()[:3]
    assert not forward_stage1(zero, x).any()
    assert forward_stage1(params, x).shape == (3, 1, 16, 16)
    assert forward_stage1(params, x[0]).shape == (1, 16, 16)


def test_stage1_golden():
    data = generate_dataset(stream(42, "data"), MapSpec(), 2, 2)
    out = forward_stage1(init_params(stream(42, "init"), NetConfig()), data.inputs())
    assert float(out.sum()) == pytest.approx(GOLDEN["stage1_seed42_sum"], rel=1e-9)
    assert float(np.abs(out).sum()) == pytest.approx(GOLDEN["stage1_seed42_abs_sum"], rel=1e-9)


def test_stage2_zero_params(small_data, params, rng):
    p = params.copy()
    p.data[~stage_mask(p.layout, "stage1")] = 0.0
    x = small_data.inputs()[:2]
    assert not forward_stage2(p, x, rng.standard_normal((2, 1, 16, 16))).any()


def test_batch_permutation(small_data, params):
    x = small_data.inputs()[:4]
    perm = np.array([2, 0, 3, 1])
    assert np.allclose(predict(params, x)[perm], predict(params, x[perm]))


def test_stage2_shape_mismatch(small_data, params):
    with pytest.raises(ValueError):
        forward_stage2(params, small_data.inputs()[:2], np.zeros((2, 2, 16, 16)))


def generic_point(params):
    """Nonzero biases keep pre-activations off the ReLU kink at 0."""
    p = params.copy()
    rng = np.random.default_rng(17)
    for seg in p.layout:
        if seg.name.endswith(".bias"):
            p[seg.name] = rng.uniform(-0.3, 0.3, seg.shape)
    return p


@pytest.mark.parametrize("phase", ["stage1", "stage2", "joint"])
def test_loss_gradient_finite_differences(small_data, params, phase):
    params = generic_point(params)
    x, y = small_data.inputs()[:2], small_data.targets()[:2]
    _, grads = loss_and_grad(params, x, y, phase)
    mask = stage_mask(params.layout, phase)

    def fn(v):
        return loss_and_grad(params.with_data(v), x, y, phase)[0]

    active = np.flatnonzero(mask)
    rng = np.random.default_rng(5)
    idx = rng.choice(active, 60, replace=False)
    sub = params.data.copy()

    def fn_sub(vals):
        full = sub.copy()
        full[idx] = vals
        return fn(full)

    assert grad_check(fn_sub, grads.data[idx], sub[idx], floor=1e-8) < 1e-4
    assert not grads.data[~mask].any()


def test_unknown_phase(small_data, params):
    with pytest.raises(ValueError):
        loss_and_grad(params, small_data.inputs()[:1], small_data.targets()[:1], "warmup")


def test_default_group_sizes(masks):
    assert masks.G == 3
    assert masks.sizes.tolist() == [72, 72, GOLDEN["param_count"] - 144]


def test_groups_are_tx_slices(masks, params):
    w1 = params.segment("conv1a.weight")
    idx = np.arange(w1.offset, w1.stop).reshape(w1.shape)
    assert set(masks.indices(0)) == set(idx[:, TX_CHANNEL].ravel())
    w2 = params.segment("conv2a.weight")
    idx = np.arange(w2.offset, w2.stop).reshape(w2.shape)
    assert set(masks.indices(1)) == set(idx[:, TX_CHANNEL].ravel())


@pytest.mark.parametrize("hidden", [1, 2, 4, 8])
def test_masks_partition(hidden):
    m = build_group_masks(NetConfig(hidden_channels=hidden))
    assert np.array_equal(m.masks.sum(axis=0), np.ones(m.d))
    assert m.sizes.sum() == m.d and (m.sizes >= 1).all()
    assert m.sizes[0] == m.sizes[1] == 9 * hidden


def test_init_contract():
    a = init_params(stream(3), NetConfig())
    b = init_params(stream(3), NetConfig())
    assert np.array_equal(a.data, b.data)
    for seg in a.layout:
        if seg.name.endswith(".bias"):
            assert not a[seg.name].any()


def test_init_variance():
    cfg = NetConfig(hidden_channels=8)
    draws = []
    for seed in range(10):
        p = init_params(stream(seed, "var"), cfg)
        draws.append(p["conv1b.weight"].ravel())
    w = np.concatenate(draws)
    assert w.size >= 5000
    a2 = 1.0 / (8 * 9)
    assert np.var(w) == pytest.approx(a2 / 3, rel=0.1)


def test_hidden_channels_validated():
    with pytest.raises(ValueError):
        NetConfig(hidden_channels=0)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_tx_sensitivity(seed):
    rng = stream(seed, "sens")
    p = init_params(rng, NetConfig())
    x = np.zeros((2, 16, 16))
    r1, c1, r2, c2 = rng.integers(0, 16, 4)
    if (r1, c1) == (r2, c2):
        c2 = (c2 + 1) % 16
    a, b = x.copy(), x.copy()
    a[1, r1, c1] = 1
    b[1, r2, c2] = 1
    assert np.linalg.norm(forward_stage1(p, a) - forward_stage1(p, b)) > 0
