"""Multi-task critic with one value head per sub-task; scalar Q by task masking."""

from __future__ import annotations

import numpy as np

from . import nn
from .actor import split_state
from .env import ACTION_DIM, EGO_DIM, N_SOCIAL, SOCIAL_DIM, STATE_DIM, STATE_SCALE, TASK_DIM

N_HEADS = 4


def q_value(out, g) -> np.ndarray:
    """Q = g^T Critic(s, a, g); heads with g_j = 0 drop out."""
    return np.sum(np.asarray(out) * np.asarray(g), axis=-1)


class MultiTaskCritic:
    def __init__(self, seed: int = 0, name: str = "critic", encoder=(64, 64), decoder=(256, 256),
                 task_width: int = 64, dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.params = p = nn.ParamSet(dtype)
        relu = ("relu",) * len(encoder)
        self.width = encoder[-1]
        self.ego_enc = nn.MLP(p, f"{name}.ego_enc", nn.MlpSpec(EGO_DIM, tuple(encoder), relu), rng)
        self.soc_enc = nn.MLP(p, f"{name}.soc_enc", nn.MlpSpec(SOCIAL_DIM, tuple(encoder), relu), rng)
        self.task_enc = nn.Dense(p, f"{name}.task_enc", TASK_DIM, task_width, "relu", rng)
        n_in = self.width * (1 + N_SOCIAL) + task_width + ACTION_DIM
        self.decoder = nn.MLP(p, f"{name}.decoder",
                              nn.MlpSpec(n_in, tuple(decoder) + (N_HEADS,),
                                         ("relu",) * len(decoder) + ("linear",)), rng)

    def forward(self, states, actions):
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        if states.shape[1] != STATE_DIM or actions.shape[1] != ACTION_DIM \
                or states.shape[0] != actions.shape[0]:
            raise ValueError(f"critic expects (B, {STATE_DIM}) states and (B, {ACTION_DIM}) actions")
        B = states.shape[0]
        ego, social, task, mask = split_state(states * STATE_SCALE)
        e_ego, c_ego = self.ego_enc.forward(ego)
        e_soc, c_soc = self.soc_enc.forward(social.reshape(B * N_SOCIAL, SOCIAL_DIM))
        mask_f = mask.astype(np.float64)[:, :, None]
        e_soc = e_soc.reshape(B, N_SOCIAL, -1) * mask_f
        t, c_t = self.task_enc.forward(task)
        h = np.concatenate([e_ego, e_soc.reshape(B, -1), t, actions], axis=1)
        out, c_dec = self.decoder.forward(h)
        return out, (B, c_ego, c_soc, mask_f, c_t, c_dec)

    def backward(self, cache, d_out, param_grads: bool = True):
        """Returns (dL/d states, dL/d actions)."""
        B, c_ego, c_soc, mask_f, c_t, c_dec = cache
        w = self.width
        dh = self.decoder.backward(c_dec, d_out, param_grads)
        d_ego = self.ego_enc.backward(c_ego, dh[:, :w], param_grads)
        n_soc = w * N_SOCIAL
        de_soc = (dh[:, w:w + n_soc].reshape(B, N_SOCIAL, w) * mask_f).reshape(B * N_SOCIAL, w)
        d_soc = self.soc_enc.backward(c_soc, de_soc, param_grads).reshape(B, -1)
        t_end = w + n_soc + self.task_enc.n_out
        d_task = self.task_enc.backward(c_t, dh[:, w + n_soc:t_end], param_grads)
        d_actions = dh[:, t_end:]
        d_states = np.concatenate([d_ego, d_soc, d_task], axis=1) * STATE_SCALE
        return d_states, d_actions

    def __call__(self, states, actions) -> np.ndarray:
        return self.forward(states, actions)[0]


def critic_forward(s, a, g, critic: MultiTaskCritic) -> np.ndarray:
    """4-head output for one (s, a); ``g`` must match the task code inside ``s``."""
    s = np.asarray(s, dtype=np.float64)
    if not np.array_equal(s[..., -TASK_DIM:], np.asarray(g)):
        raise ValueError("task vector disagrees with the state's task code")
    return critic(s, a)[0]
