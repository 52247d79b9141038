"""Constrained-MDP view of the intersection world.

State layout (33 reals)::

    [0:4]    ego: speed, route-section one-hot (approach, junction, exit)
    [4:29]   5 social slots of (v, x, y, cos a, sin a) in the ego frame
    [29:33]  task vector g
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import EGO_TASKS, MapSpec
from .world import (COLLISION, RUNNING, SUCCESS, TIMEOUT, EgoLimits, TrafficConfig, WorldState,
                    ego_speed_update, new_world, step_world)

STATE_DIM = 33
EGO_DIM = 4
SOCIAL_DIM = 5
N_SOCIAL = 5
TASK_DIM = 4
ACTION_DIM = 2
TASK_SLICE = slice(29, 33)

FILTER_RADIUS = 75.0
FILTER_MIN_X = -5.0
POSITION_SCALE = 75.0
SPEED_SCALE = 9.0

REWARD_SUCCESS = 30.0
REWARD_COLLISION = -650.0
REWARD_STEP_EARLY = -0.15
REWARD_STEP_LATE = -0.3
REWARD_TIMEOUT = -50.0


def task_vector(task: str) -> np.ndarray:
    g = np.zeros(TASK_DIM)
    g[EGO_TASKS.index(task)] = 1.0
    g[3] = 1.0
    return g


def task_of(g) -> str:
    return EGO_TASKS[int(np.argmax(np.asarray(g)[:3]))]


def to_ego_frame(ego_x, ego_y, ego_heading, x, y, heading, speed):
    """Express a social pose in the ego frame: (x_i, y_i, v_i, cos a_i, sin a_i)."""
    c, s = math.cos(ego_heading), math.sin(ego_heading)
    dx, dy = x - ego_x, y - ego_y
    rel = heading - ego_heading
    return c * dx + s * dy, -s * dx + c * dy, speed, math.cos(rel), math.sin(rel)


def filter_social(world: WorldState) -> list:
    """Nearest (at most 5) social vehicles within 75 m with ego-frame x >= -5."""
    ego = world.ego
    keep = []
    for v in world.socials():
        d = math.hypot(v.x - ego.x, v.y - ego.y)
        if d >= FILTER_RADIUS:
            continue
        xi, *_ = to_ego_frame(ego.x, ego.y, ego.heading, v.x, v.y, v.heading, v.speed)
        if xi < FILTER_MIN_X:
            continue
        keep.append((d, v.id, v))
    keep.sort(key=lambda t: (t[0], t[1]))
    return [v for _, _, v in keep[:N_SOCIAL]]


def encode_state(world: WorldState, task: str, social=None) -> np.ndarray:
    ego = world.ego
    s = np.zeros(STATE_DIM)
    s[0] = ego.speed
    s[1 + world.roads.routes[ego.route_id].section(ego.progress)] = 1.0
    if social is None:
        social = filter_social(world)
    for k, v in enumerate(social):
        xi, yi, vi, ca, sa = to_ego_frame(ego.x, ego.y, ego.heading, v.x, v.y, v.heading, v.speed)
        s[EGO_DIM + SOCIAL_DIM * k: EGO_DIM + SOCIAL_DIM * (k + 1)] = (vi, xi, yi, ca, sa)
    s[TASK_SLICE] = task_vector(task)
    return s


def scale_state(s: np.ndarray) -> np.ndarray:
    """Network-side normalisation: speeds / 9, positions / 75, everything else as is."""
    out = np.array(s, dtype=np.float64, copy=True)
    out[..., 0] /= SPEED_SCALE
    for k in range(N_SOCIAL):
        b = EGO_DIM + SOCIAL_DIM * k
        out[..., b] /= SPEED_SCALE
        out[..., b + 1: b + 3] /= POSITION_SCALE
    return out


STATE_SCALE = scale_state(np.ones(STATE_DIM))


def map_action(raw) -> float:
    """(a+, a-) in [0, 1]^2 to a target speed in [0, 9] m/s."""
    a = float(raw[0]) - float(raw[1])
    return SPEED_SCALE * (a + 1.0) / 2.0


def speed_to_action(target: float) -> np.ndarray:
    """Inverse of :func:`map_action` choosing the pair with one zero entry."""
    d = 2.0 * target / SPEED_SCALE - 1.0
    return np.array([max(d, 0.0), max(-d, 0.0)])


def compute_reward(outcome: str, task: str, t: float, t_max: float) -> np.ndarray:
    r = np.zeros(4)
    k = EGO_TASKS.index(task)
    if outcome == SUCCESS:
        r[k] = REWARD_SUCCESS
    elif outcome == COLLISION:
        r[k] = REWARD_COLLISION
    if outcome == TIMEOUT:
        r[3] = REWARD_TIMEOUT
    elif t <= 0.5 * t_max:
        r[3] = REWARD_STEP_EARLY
    else:
        r[3] = REWARD_STEP_LATE
    return r


@dataclass
class StepInfo:
    outcome: str
    time: float
    target_speed: float
    reward_vector: np.ndarray
    social_ids: list = field(default_factory=list)
    truncated: bool = False


class IntersectionEnv:
    """Episode API over the world: ``reset(task)`` then ``step(raw_action)``."""

    def __init__(self, roads: MapSpec | None = None, traffic: TrafficConfig | None = None,
                 t0: float = 0.1, t_max: float = 60.0, limits: EgoLimits = EgoLimits(),
                 seed: int | None = None, rng: np.random.Generator | None = None):
        self.roads = roads or MapSpec()
        self.traffic = traffic or TrafficConfig()
        self.t0 = t0
        self.t_max = t_max
        self.limits = limits
        self.rng = rng if rng is not None else np.random.default_rng(seed)
        self.world: WorldState | None = None
        self.task = "left"
        self.social: list = []

    def set_yield_probability(self, p: float) -> None:
        self.traffic = replace(self.traffic, yield_probability=p)

    def reset(self, task: str = "left") -> np.ndarray:
        self.task = task
        self.world = new_world(self.roads, task, self.t0, self.t_max, traffic=self.traffic)
        self.social = filter_social(self.world)
        return encode_state(self.world, task, self.social)

    def observe(self) -> np.ndarray:
        return encode_state(self.world, self.task, self.social)

    def step(self, raw_action):
        target = min(max(map_action(raw_action), 0.0), self.limits.max_speed)
        step_world(self.world, target, self.traffic, self.rng, self.limits)
        outcome = self.world.outcome
        r = compute_reward(outcome, self.task, self.world.time, self.t_max)
        self.social = filter_social(self.world)
        s = encode_state(self.world, self.task, self.social)
        info = StepInfo(outcome, self.world.time, target, r, [v.id for v in self.social])
        return s, r, outcome != RUNNING, info


class SpeedTrackingEnv:
    """Traffic-free toy task: reward -|v - v_ref| per step over a fixed horizon.

    Same state/action/reward layout as the intersection; the tracking reward
    sits in the common slot. The horizon end is a truncation, not a terminal.
    """

    def __init__(self, v_ref: float = 5.0, horizon: int = 50, t0: float = 0.1,
                 limits: EgoLimits = EgoLimits(), seed: int | None = None):
        self.v_ref = v_ref
        self.horizon = horizon
        self.t0 = t0
        self.limits = limits
        self.rng = np.random.default_rng(seed)
        self.task = "left"
        self.speed = 0.0
        self.steps = 0

    def set_yield_probability(self, p: float) -> None:
        pass

    def observe(self) -> np.ndarray:
        s = np.zeros(STATE_DIM)
        s[0] = self.speed
        s[1] = 1.0
        s[TASK_SLICE] = task_vector(self.task)
        return s

    def reset(self, task: str = "left") -> np.ndarray:
        self.task = task
        self.speed = 0.0
        self.steps = 0
        return self.observe()

    def step(self, raw_action):
        target = min(max(map_action(raw_action), 0.0), self.limits.max_speed)
        self.speed = ego_speed_update(self.speed, target, self.t0, self.limits)
        self.steps += 1
        r = np.zeros(4)
        r[3] = -abs(self.speed - self.v_ref)
        done = self.steps >= self.horizon
        info = StepInfo(TIMEOUT if done else RUNNING, self.steps * self.t0, target, r, truncated=done)
        return self.observe(), r, done, info

    def optimal_mean_reward(self) -> float:
        """Mean per-step reward of the constant-target policy at ``v_ref``."""
        v, total = 0.0, 0.0
        for _ in range(self.horizon):
            v = ego_speed_update(v, self.v_ref, self.t0, self.limits)
            total -= abs(v - self.v_ref)
        return total / self.horizon
