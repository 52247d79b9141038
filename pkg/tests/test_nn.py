import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safenav import nn


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        old = x.flat[i]
        x.flat[i] = old + h
        fp = f()
        x.flat[i] = old - h
        fm = f()
        x.flat[i] = old
        g.flat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8)


@pytest.mark.parametrize("act", nn.ACTIVATIONS)
def test_dense_gradients_match_finite_differences(act):
    rng = np.random.default_rng(0)
    p = nn.ParamSet()
    layer = nn.Dense(p, "d", 5, 4, act, rng)
    x = rng.normal(size=(3, 5))
    c = rng.normal(size=(3, 4))
    f = lambda: float(np.sum(layer.forward(x)[0] * c))
    y, cache = layer.forward(x)
    dx = layer.backward(cache, c)
    assert rel_err(dx, numeric_grad(f, x)) < 1e-6
    for name in ("d.w", "d.b"):
        assert rel_err(p.grads[name], numeric_grad(f, p.tensors[name])) < 1e-6


def test_mlp_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    p = nn.ParamSet()
    net = nn.MLP(p, "m", nn.MlpSpec(3, (8, 8, 2), ("relu", "tanh", "sigmoid")), rng)
    x = rng.normal(size=(4, 3))
    f = lambda: float(np.sum(net.forward(x)[0] ** 2))
    y, caches = net.forward(x)
    net.backward(caches, 2 * y)
    for name in p:
        assert rel_err(p.grads[name], numeric_grad(f, p.tensors[name])) < 1e-5


def test_stale_cache_is_rejected():
    rng = np.random.default_rng(0)
    p = nn.ParamSet()
    layer = nn.Dense(p, "d", 2, 2, "relu", rng)
    _, cache = layer.forward(np.ones((1, 2)))
    p.bump()
    with pytest.raises(nn.StaleCacheError):
        layer.backward(cache, np.ones((1, 2)))


def test_dense_rejects_wrong_width():
    p = nn.ParamSet()
    layer = nn.Dense(p, "d", 3, 2, "linear", np.random.default_rng(0))
    with pytest.raises(ValueError):
        layer.forward(np.ones((2, 4)))


def test_duplicate_parameter_name():
    p = nn.ParamSet()
    p.add("w", np.zeros(2))
    with pytest.raises(KeyError):
        p.add("w", np.zeros(2))


def test_softmax_examples():
    assert np.allclose(nn.softmax([0.0, 0.0, 0.0]), [1 / 3] * 3)
    w = nn.softmax([1.0, 2.0, 3.0], mask=[True, True, False])
    assert w[2] == 0.0
    assert np.isclose(w.sum(), 1.0)
    # large logits do not overflow
    assert np.allclose(nn.softmax([1000.0, 1000.0]), [0.5, 0.5])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.data())
def test_softmax_masked_rows_sum_to_one(logits, data):
    mask = data.draw(st.lists(st.booleans(), min_size=len(logits), max_size=len(logits)))
    mask[0] = True
    w = nn.softmax(np.array(logits), mask=np.array(mask))
    assert abs(w.sum() - 1.0) <= 1e-9
    assert np.all(w[~np.array(mask)] == 0.0)
    assert np.all(w >= 0.0)


def test_sigmoid_is_stable_for_large_inputs():
    z = np.array([-800.0, 0.0, 800.0])
    y = nn.activate("sigmoid", z)
    assert np.all(np.isfinite(y))
    assert np.allclose(y, [0.0, 0.5, 1.0])


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 1000))
def test_polyak_is_elementwise_segment(tau, seed):
    rng = np.random.default_rng(seed)
    a, b = nn.ParamSet(), nn.ParamSet()
    a.add("w", rng.normal(size=(3, 4)))
    b.add("w", rng.normal(size=(3, 4)))
    old = a.tensors["w"].copy()
    a.polyak(b, tau)
    new = a.tensors["w"]
    lo, hi = np.minimum(old, b["w"]), np.maximum(old, b["w"])
    assert np.all(new >= lo - 1e-12) and np.all(new <= hi + 1e-12)
    assert np.allclose(new, tau * b["w"] + (1 - tau) * old, atol=1e-12)


def test_polyak_extremes():
    a, b = nn.ParamSet(), nn.ParamSet()
    a.add("w", np.zeros(3))
    b.add("w", np.arange(3.0))
    a.polyak(b, 0.0)
    assert np.array_equal(a["w"], np.zeros(3))
    a.polyak(b, 1.0)
    assert a.equal(b)


def test_packed_polyak_matches_unpacked():
    rng = np.random.default_rng(3)
    a, b = nn.ParamSet(), nn.ParamSet()
    for k in range(3):
        a.add(f"w{k}", rng.normal(size=(2, k + 1)))
        b.add(f"w{k}", rng.normal(size=(2, k + 1)))
    a2, b2 = a.copy(), b.copy()
    a2.pack()
    b2.pack()
    a.polyak(b, 0.3)
    a2.polyak(b2, 0.3)
    assert all(np.allclose(a[n], a2[n]) for n in a)


def test_adam_first_step_moves_by_lr():
    p = nn.ParamSet()
    p.add("w", np.array([1.0, -1.0, 0.5]))
    opt = nn.Adam(p, nn.AdamHyper(lr=0.1))
    p.grads["w"][...] = [2.0, -3.0, 0.0]
    opt.step()
    # bias-corrected first step is lr * sign(g) (up to eps)
    assert np.allclose(p["w"], [0.9, -0.9, 0.5], atol=1e-6)
    assert np.all(p.grads["w"] == 0.0)


def test_adam_flat_and_dict_paths_agree():
    rng = np.random.default_rng(0)
    p1 = nn.ParamSet()
    p1.add("a", rng.normal(size=(3, 2)))
    p1.add("b", rng.normal(size=4))
    p2 = p1.copy()
    m = {n: np.zeros_like(t) for n, t in p2.tensors.items()}
    v = {n: np.zeros_like(t) for n, t in p2.tensors.items()}
    opt = nn.Adam(p1)
    for t in range(1, 4):
        g = {n: rng.normal(size=x.shape) for n, x in p1.tensors.items()}
        for n in g:
            p1.grads[n][...] = g[n]
            p2.grads[n][...] = g[n]
        opt.step()
        nn.adam_step(p2, m, v, opt.hyper, t)
    assert all(np.allclose(p1[n], p2[n]) for n in p1)


def test_float32_paramset():
    p = nn.ParamSet(np.float32)
    layer = nn.Dense(p, "d", 3, 2, "relu", np.random.default_rng(0))
    y, _ = layer.forward(np.ones((2, 3)))
    assert y.dtype == np.float32


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    p = nn.ParamSet()
    nn.MLP(p, "m", nn.MlpSpec(3, (4, 2), ("relu", "linear")), rng)
    p.version = 17
    path = tmp_path / "ck"
    nn.save_params(p, path)
    q = nn.load_params(path)
    assert q.equal(p)
    assert q.version == 17
    assert list(q) == list(p)


def test_checkpoint_errors(tmp_path):
    p = nn.ParamSet()
    p.add("w", np.ones((2, 2)))
    path = tmp_path / "ck"
    nn.save_params(p, path)
    raw = path.read_bytes()

    (tmp_path / "bad").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(nn.CheckpointError):
        nn.load_params(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-3])
    with pytest.raises(nn.CheckpointError):
        nn.load_params(tmp_path / "short")
    (tmp_path / "long").write_bytes(raw + b"\0")
    with pytest.raises(nn.CheckpointError):
        nn.load_params(tmp_path / "long")
    (tmp_path / "ver").write_bytes(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
    with pytest.raises(nn.CheckpointVersionError):
        nn.load_params(tmp_path / "ver")


def test_assign_rejects_mismatched_sets():
    a, b = nn.ParamSet(), nn.ParamSet()
    a.add("w", np.zeros(2))
    b.add("w", np.zeros(3))
    with pytest.raises(ValueError):
        a.assign(b)
