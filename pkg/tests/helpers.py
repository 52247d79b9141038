"""Shared fixtures for the test suite: synthetic states and finite-difference checks."""

import numpy as np

from safenav.env import EGO_DIM, SOCIAL_DIM, STATE_DIM, task_vector

FD_STEP = 1e-5
# gradients below this magnitude are compared in absolute terms: central differences
# cannot resolve them to 1e-4 relative accuracy in float64
FD_FLOOR = 1e-5


def random_state(rng, n_active, task="left"):
    s = np.zeros(STATE_DIM)
    s[0] = rng.uniform(0, 9)
    s[1 + rng.integers(0, 3)] = 1.0
    for k in range(n_active):
        h = rng.uniform(-np.pi, np.pi)
        s[EGO_DIM + SOCIAL_DIM * k:EGO_DIM + SOCIAL_DIM * (k + 1)] = (
            rng.uniform(0, 9), rng.uniform(-40, 40), rng.uniform(-40, 40), np.cos(h), np.sin(h))
    s[-4:] = task_vector(task)
    return s


def fd_error(analytic, loss, array, idx, h=FD_STEP):
    """Relative error between an analytic derivative and a central difference at array[idx]."""
    old = array[idx]
    array[idx] = old + h
    lp = loss()
    array[idx] = old - h
    lm = loss()
    array[idx] = old
    num = (lp - lm) / (2 * h)
    return abs(analytic - num) / max(abs(analytic), abs(num), FD_FLOOR)


def param_fd_errors(params, loss, rng, n):
    names = list(params)
    out = []
    for _ in range(n):
        name = names[rng.integers(len(names))]
        t = params[name]
        idx = tuple(int(rng.integers(0, k)) for k in t.shape)
        out.append(fd_error(params.grads[name][idx], loss, t, idx))
    return out
