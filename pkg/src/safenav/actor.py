"""Policy networks: social-attention actor and a flat MLP baseline.

Both take raw 33-dim states (scaled internally) and emit (a+, a-) in [0, 1]^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .env import EGO_DIM, N_SOCIAL, SOCIAL_DIM, STATE_DIM, STATE_SCALE, TASK_DIM, TASK_SLICE


@dataclass(frozen=True)
class AttentionSpec:
    d_x: int = 64
    d_k: int = 32
    d_v: int = 64


@dataclass
class AttentionOutput:
    weights: np.ndarray   # (..., 1 + n), ego first
    tensor: np.ndarray    # (..., d_v)


def split_state(s):
    """Slice states into ego (4), social (5 x 5), task (4) and the active-slot mask."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != STATE_DIM:
        raise ValueError(f"state must have {STATE_DIM} entries, got {s.shape[-1]}")
    ego = s[..., :EGO_DIM]
    social = s[..., EGO_DIM:EGO_DIM + N_SOCIAL * SOCIAL_DIM].reshape(s.shape[:-1] + (N_SOCIAL, SOCIAL_DIM))
    task = s[..., TASK_SLICE]
    # padded slots are all zero; a real vehicle always has cos^2 + sin^2 = 1
    mask = (social[..., 3] ** 2 + social[..., 4] ** 2) > 0.5
    return ego, social, task, mask


def attention(q, K, V, mask=None) -> AttentionOutput:
    """Single-query scaled dot-product attention; masked rows get weight 0."""
    q, K, V = (np.asarray(t, dtype=np.float64) for t in (q, K, V))
    logits = np.einsum("...k,...mk->...m", q, K) / math.sqrt(q.shape[-1])
    w = nn.softmax(logits, axis=-1, mask=mask)
    return AttentionOutput(w, np.einsum("...m,...mv->...v", w, V))


class AttentionActor:
    """Ego/social encoders -> ego-query attention -> [attention, task code] -> decoder."""

    uses_attention = True

    def __init__(self, seed: int = 0, spec: AttentionSpec = AttentionSpec(),
                 encoder=(64, 64), decoder=(256, 256), task_width: int = 64, dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.spec = spec
        self.params = p = nn.ParamSet(dtype)
        if encoder[-1] != spec.d_x:
            raise ValueError("encoder output width must equal d_x")
        relu = ("relu",) * len(encoder)
        self.ego_enc = nn.MLP(p, "actor.ego_enc", nn.MlpSpec(EGO_DIM, tuple(encoder), relu), rng)
        self.soc_enc = nn.MLP(p, "actor.soc_enc", nn.MlpSpec(SOCIAL_DIM, tuple(encoder), relu), rng)
        self.query = nn.Dense(p, "actor.query", spec.d_x, spec.d_k, "tanh", rng)
        self.key = nn.Dense(p, "actor.key", spec.d_x, spec.d_k, "tanh", rng)
        self.value = nn.Dense(p, "actor.value", spec.d_x, spec.d_v, "tanh", rng)
        self.task_enc = nn.Dense(p, "actor.task_enc", TASK_DIM, task_width, "relu", rng)
        self.decoder = nn.MLP(p, "actor.decoder",
                              nn.MlpSpec(spec.d_v + task_width, tuple(decoder) + (2,),
                                         ("relu",) * len(decoder) + ("sigmoid",)), rng)

    def forward(self, states):
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        B = states.shape[0]
        m = N_SOCIAL + 1
        ego, social, task, mask_soc = split_state(states * STATE_SCALE)
        mask = np.concatenate([np.ones((B, 1), dtype=bool), mask_soc], axis=1)

        e_ego, c_ego = self.ego_enc.forward(ego)
        e_soc, c_soc = self.soc_enc.forward(social.reshape(B * N_SOCIAL, SOCIAL_DIM))
        E = np.concatenate([e_ego[:, None, :], e_soc.reshape(B, N_SOCIAL, -1)], axis=1)
        q, c_q = self.query.forward(e_ego)
        K, c_k = self.key.forward(E.reshape(B * m, -1))
        V, c_v = self.value.forward(E.reshape(B * m, -1))
        K = K.reshape(B, m, -1)
        V = V.reshape(B, m, -1)
        att = attention(q, K, V, mask)
        t, c_t = self.task_enc.forward(task)
        y, c_dec = self.decoder.forward(np.concatenate([att.tensor, t], axis=1))
        cache = (B, c_ego, c_soc, q, c_q, K, c_k, V, c_v, att.weights, c_t, c_dec)
        return y, att.weights, cache

    def backward(self, cache, dy, param_grads: bool = True) -> np.ndarray:
        """Backpropagate dL/d(action); returns dL/d(raw state)."""
        B, c_ego, c_soc, q, c_q, K, c_k, V, c_v, w, c_t, c_dec = cache
        d_v = self.spec.d_v
        m = N_SOCIAL + 1
        dh = self.decoder.backward(c_dec, dy, param_grads)
        d_att, d_t = dh[:, :d_v], dh[:, d_v:]
        d_task = self.task_enc.backward(c_t, d_t, param_grads)

        dw = np.einsum("bv,bmv->bm", d_att, V)
        dV = w[:, :, None] * d_att[:, None, :]
        dlogits = w * (dw - np.sum(w * dw, axis=1, keepdims=True)) / math.sqrt(self.spec.d_k)
        dq = np.einsum("bm,bmk->bk", dlogits, K)
        dK = dlogits[:, :, None] * q[:, None, :]
        dE = (self.key.backward(c_k, dK.reshape(B * m, -1), param_grads)
              + self.value.backward(c_v, dV.reshape(B * m, -1), param_grads)).reshape(B, m, -1)
        de_ego = dE[:, 0] + self.query.backward(c_q, dq, param_grads)
        d_ego = self.ego_enc.backward(c_ego, de_ego, param_grads)
        d_soc = self.soc_enc.backward(c_soc, dE[:, 1:].reshape(B * N_SOCIAL, -1), param_grads)
        ds = np.concatenate([d_ego, d_soc.reshape(B, -1), d_task], axis=1)
        return ds * STATE_SCALE

    def act(self, s):
        y, w, _ = self.forward(s)
        return y[0], w[0]


class FlatActor:
    """No-attention policy: MLP over the whole scaled state."""

    uses_attention = False

    def __init__(self, seed: int = 0, hidden=(256, 256), dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.params = nn.ParamSet(dtype)
        self.net = nn.MLP(self.params, "actor.flat",
                          nn.MlpSpec(STATE_DIM, tuple(hidden) + (2,), ("relu",) * len(hidden) + ("sigmoid",)),
                          rng)

    def forward(self, states):
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        y, cache = self.net.forward(states * STATE_SCALE)
        return y, None, cache

    def backward(self, cache, dy, param_grads: bool = True) -> np.ndarray:
        return self.net.backward(cache, dy, param_grads) * STATE_SCALE

    def act(self, s):
        y, _, _ = self.forward(s)
        return y[0], None


def make_actor(attention_on: bool, seed: int = 0, dtype=np.float64):
    return AttentionActor(seed, dtype=dtype) if attention_on else FlatActor(seed, dtype=dtype)


def actor_forward(s, actor):
    """Single-state convenience: ((a+, a-), attention weights or None)."""
    return actor.act(s)
