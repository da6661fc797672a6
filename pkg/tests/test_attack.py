import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from builders import generic_params
from fedshade import attack, privacy
from fedshade.attack import (
    AttackConfig,
    UploadTrace,
    centroid_rmse,
    collect_trace,
    eval_attacker,
    extract_fingerprint,
    fingerprint_backward,
    proxy_init,
    proxy_loss_and_grad,
    proxy_train_step,
    read_traces,
    split_by_map,
    write_traces,
)
from fedshade.gradcore import grad_check
from fedshade.rng import stream

D = 1690


def fake_traces(n, rng, n_maps=10, S=2):
    return [
        UploadTrace(rng.standard_normal((S, D)), rng.uniform(0, 64, 2), k % 5, k % 3, k % n_maps)
        for k in range(n)
    ]


def test_config_validation():
    for bad in (dict(steps=0), dict(train_fraction=1.0), dict(holdout_fraction=1.0)):
        with pytest.raises(ValueError):
            AttackConfig(**bad)


def test_collect_trace_shapes(small_data):
    p = generic_params()
    t = collect_trace(p, small_data[0], "stage1", 4, 0.3)
    assert t.steps.shape == (4, D) and t.S == 4
    assert np.allclose(t.coord_m, small_data[0].tx_coord_m)
    assert np.array_equal(t.steps, t.raw)
    one = collect_trace(p, small_data[0], "stage1", 1, 0.3)
    assert one.S == 1


def test_collect_trace_applies_defense(small_data):
    p = generic_params()
    t = collect_trace(p, small_data[1], "stage2", 2, 0.3, defend=lambda v: privacy.clip(v, 1e-3))
    assert np.allclose(np.linalg.norm(t.steps, axis=1), 1e-3)


def test_fingerprint_layout(masks, rng):
    steps = rng.standard_normal((4, D))
    fp = extract_fingerprint(steps, masks)
    assert fp.shape == (36,)
    s, g = 2, 1
    v = steps[s, masks.labels == g]
    assert fp[3 * (s * 3 + g) : 3 * (s * 3 + g) + 3] == pytest.approx([np.linalg.norm(v), v.mean(), v.std()])
    batch = extract_fingerprint(np.stack([steps, steps]), masks)
    assert batch.shape == (2, 36) and np.allclose(batch[1], fp)


def test_fingerprint_zero_and_homogeneity(masks, rng):
    assert not extract_fingerprint(np.zeros((2, D)), masks).any()
    steps = rng.standard_normal((3, D))
    fp = extract_fingerprint(steps, masks)
    fp2 = extract_fingerprint(2 * steps, masks)
    assert np.allclose(fp2, 2 * fp)


def test_fingerprint_backward_matches_fd(masks, rng):
    steps = rng.standard_normal((2, D))
    probe = rng.standard_normal(18)
    g = fingerprint_backward(steps, masks, probe)
    idx = rng.choice(steps.size, 60, replace=False)
    base = steps.ravel().copy()

    def fn(vals):
        full = base.copy()
        full[idx] = vals
        return float(probe @ extract_fingerprint(full.reshape(2, D), masks))

    assert grad_check(fn, g.ravel()[idx], base[idx]) < 1e-6


def test_proxy_gradient(rng):
    proxy = proxy_init(rng, 6, 8, 64.0)
    fps = rng.standard_normal((5, 6))
    coords = rng.uniform(0, 64, (5, 2))
    _, grads, g_fps = proxy_loss_and_grad(proxy, fps, coords)
    f = lambda v: proxy_loss_and_grad(proxy.__class__(proxy.params.with_data(v), proxy.feat_mean,
                                                      proxy.feat_scale, 64.0), fps, coords)[0]
    assert grad_check(f, grads.data, proxy.params.data) < 1e-4
    h = lambda v: proxy_loss_and_grad(proxy, v.reshape(5, 6), coords)[0]
    assert grad_check(h, g_fps.ravel(), fps.ravel()) < 1e-4


def test_proxy_step_zero_lr_and_empty(rng):
    proxy = proxy_init(rng, 6, 8, 64.0)
    fps = rng.standard_normal((5, 6))
    coords = rng.uniform(0, 64, (5, 2))
    same, _ = proxy_train_step(proxy, fps, coords, 0.0, refresh_scaler=False)
    assert np.array_equal(same.params.data, proxy.params.data)
    with pytest.raises(ValueError):
        proxy_train_step(proxy, fps[:0], coords[:0], 0.1)


def test_proxy_loss_decreases_on_linear_map(rng):
    fps = rng.standard_normal((64, 6))
    coords = 32 + 8 * fps[:, :2]
    proxy = proxy_init(rng, 6, 16, 64.0)
    losses = []
    for _ in range(10):
        proxy, loss = proxy_train_step(proxy, fps, coords, 0.05)
        losses.append(loss)
    assert all(b < a for a, b in zip(losses, losses[1:]))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 40), st.floats(0.1, 0.9), st.integers(0, 999))
def test_split_by_map_disjoint(n_maps, frac, seed):
    ids = np.repeat(np.arange(n_maps), 3)
    tr, te = split_by_map(ids, frac, stream(seed))
    assert len(tr) and len(te)
    assert not set(ids[tr]) & set(ids[te])
    assert sorted(np.concatenate([tr, te]).tolist()) == list(range(len(ids)))


def test_eval_requires_min_traces(masks, rng):
    with pytest.raises(ValueError):
        eval_attacker(fake_traces(10, rng), masks, AttackConfig(), stream(0), 64.0)


def test_eval_exact_stub_is_zero(masks, rng):
    traces = fake_traces(40, rng)
    lookup = {tuple(np.round(extract_fingerprint(t.steps, masks), 12)): t.coord_m for t in traces}

    def fit(fps, coords, maps):
        return lambda q: np.stack([lookup[tuple(np.round(row, 12))] for row in q])

    assert eval_attacker(traces, masks, AttackConfig(), stream(1), 64.0, fit=fit) == 0.0


def test_eval_duplication_invariant(masks, rng):
    traces = fake_traces(30, rng)
    centroid = lambda fps, coords, maps: (lambda q: np.tile(coords.mean(axis=0), (len(q), 1)))
    a = eval_attacker(traces, masks, AttackConfig(), stream(2), 64.0, fit=centroid)
    b = eval_attacker(traces + traces, masks, AttackConfig(), stream(2), 64.0, fit=centroid)
    assert a == pytest.approx(b)


def test_centroid_closed_form():
    pts = stream(0).uniform(0, 64, (200_000, 2))
    assert centroid_rmse(pts) == pytest.approx(np.sqrt(2 * 64**2 / 12), rel=0.01)
    assert np.sqrt(2 * 64**2 / 12) == pytest.approx(26.13, abs=0.005)


@pytest.mark.slow
def test_heavy_noise_hides_location(masks):
    from fedshade.synthdata import MapSpec, generate_dataset
    data = generate_dataset(stream(8, "data"), MapSpec(), 30, 3)
    p = generic_params()
    rng = stream(4, "heavy")
    defense = privacy.ClientDefense(privacy.DefenseConfig(scheme="uniform", noise_multiplier=100.0), masks)
    traces = []
    for i in range(len(data)):
        t = collect_trace(p, data[i], "stage1", 2, 0.3, defend=lambda v: defense.apply(v, None, rng)[0])
        traces.append(t)
    coords = np.stack([t.coord_m for t in traces])
    rmse = eval_attacker(traces, masks, AttackConfig(epochs=200), stream(5), 64.0)
    assert rmse >= 0.9 * centroid_rmse(coords)


def test_trace_file_roundtrip(tmp_path, rng):
    traces = fake_traces(3, rng)
    path = tmp_path / "t.ftrc"
    write_traces(path, traces)
    back = read_traces(path)
    assert len(back) == 3
    for a, b in zip(traces, back):
        assert np.array_equal(a.steps.astype(np.float32), b.steps.astype(np.float32))
        assert np.array_equal(a.coord_m.astype(np.float32), b.coord_m.astype(np.float32))
        assert (a.client_id, a.round_index) == (b.client_id, b.round_index)
    raw = path.read_bytes()
    assert raw[:4] == b"FTRC"
    (tmp_path / "bad").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ValueError):
        read_traces(tmp_path / "bad")
