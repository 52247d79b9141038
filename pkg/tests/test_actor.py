import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safenav.actor import AttentionActor, FlatActor, actor_forward, attention, make_actor, split_state
from safenav.env import EGO_DIM, N_SOCIAL, SOCIAL_DIM, STATE_DIM

from helpers import fd_error, param_fd_errors, random_state


def small_actor(seed=0):
    return AttentionActor(seed, encoder=(8, 64), decoder=(16, 16), task_width=8)


def test_output_shapes_and_range():
    actor = small_actor()
    rng = np.random.default_rng(0)
    S = np.stack([random_state(rng, k) for k in range(N_SOCIAL + 1)])
    y, w, _ = actor.forward(S)
    assert y.shape == (N_SOCIAL + 1, 2) and w.shape == (N_SOCIAL + 1, N_SOCIAL + 1)
    assert np.all((y >= 0) & (y <= 1))
    a, wt = actor_forward(S[2], actor)
    assert a.shape == (2,) and wt.shape == (N_SOCIAL + 1,)


def test_split_state_mask():
    rng = np.random.default_rng(1)
    ego, social, task, mask = split_state(random_state(rng, 2))
    assert ego.shape == (EGO_DIM,) and social.shape == (N_SOCIAL, SOCIAL_DIM)
    assert list(mask) == [True, True, False, False, False]
    with pytest.raises(ValueError):
        split_state(np.zeros(10))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, N_SOCIAL), st.integers(0, 10_000))
def test_attention_rows_sum_to_one_with_padded_zeros(n_active, seed):
    actor = small_actor(seed % 3)
    s = random_state(np.random.default_rng(seed), n_active)
    _, w, _ = actor.forward(s)
    w = w[0]
    assert abs(w.sum() - 1.0) <= 1e-9
    assert np.all(w[1 + n_active:] == 0.0)
    assert np.all(w[:1 + n_active] > 0.0)


def test_ego_only_gets_full_weight():
    actor = small_actor()
    _, w, _ = actor.forward(random_state(np.random.default_rng(0), 0))
    assert w[0, 0] == 1.0


def test_attention_function_example():
    q = np.array([1.0, 0.0])
    K = np.array([[1.0, 0.0], [0.0, 1.0], [5.0, 5.0]])
    V = np.array([[1.0], [3.0], [100.0]])
    out = attention(q, K, V, mask=np.array([True, True, False]))
    e = np.exp(1 / np.sqrt(2))
    assert out.weights == pytest.approx([e / (e + 1), 1 / (e + 1), 0.0])
    assert out.tensor == pytest.approx([(e + 3) / (e + 1)])


def test_padded_slots_do_not_influence_output():
    actor = small_actor()
    rng = np.random.default_rng(3)
    s = random_state(rng, 2)
    y0, _, _ = actor.forward(s)
    # any garbage with a zero heading vector is treated as padding
    s2 = s.copy()
    s2[EGO_DIM + 3 * SOCIAL_DIM:EGO_DIM + 3 * SOCIAL_DIM + 3] = (4.0, 7.0, -2.0)
    y1, _, _ = actor.forward(s2)
    assert np.array_equal(y0, y1)


def actor_grad_check(actor, S, rng, n_params=12):
    c = rng.normal(size=(S.shape[0], 2))
    loss = lambda: float(np.sum(actor.forward(S)[0] * c))
    actor.params.zero_grad()
    _, _, cache = actor.forward(S)
    ds = actor.backward(cache, c)
    errs = param_fd_errors(actor.params, loss, rng, n_params)
    for j in rng.choice(STATE_DIM - 4, 6, replace=False):
        if j >= EGO_DIM and (j - EGO_DIM) % SOCIAL_DIM >= 3:
            continue            # heading entries also decide the mask
        errs.append(fd_error(ds[0, j], loss, S, (0, j)))
    return max(errs)


@pytest.mark.parametrize("seed", range(3))
def test_attention_actor_gradients(seed):
    rng = np.random.default_rng(seed)
    actor = small_actor(seed)
    S = np.stack([random_state(rng, k) for k in (0, 2, 5)])
    assert actor_grad_check(actor, S, rng) < 1e-4


def test_flat_actor_gradients():
    rng = np.random.default_rng(0)
    actor = FlatActor(0, hidden=(16, 16))
    S = np.stack([random_state(rng, k) for k in (1, 4)])
    assert actor_grad_check(actor, S, rng) < 1e-4


def test_make_actor_and_float32():
    assert isinstance(make_actor(True), AttentionActor)
    a = make_actor(False, dtype=np.float32)
    assert isinstance(a, FlatActor)
    y, w, _ = a.forward(random_state(np.random.default_rng(0), 3))
    assert w is None and y.dtype == np.float32
    with pytest.raises(ValueError):
        AttentionActor(encoder=(8, 32))
