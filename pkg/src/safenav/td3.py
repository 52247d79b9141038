"""Safety-corrected multi-task TD3."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .actor import make_actor
from .critic import MultiTaskCritic, q_value
from .env import ACTION_DIM, STATE_DIM, TASK_SLICE

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    gamma: float = 0.99
    tau: float = 0.005
    explore_std: float = 0.1
    target_std: float = 0.2
    target_clip: float = 0.5
    policy_delay: int = 2
    batch_size: int = 128
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    buffer_size: int = 200_000
    episodes: int = 1000
    seed: int = 0
    safety: bool = False
    attention: bool = True
    tasks: tuple = ("left",)
    warmup: int | None = None          # transitions before updates start; default 10 * batch
    updates_per_step: int = 1
    checkpoint_every: int = 0
    yield_start: float = 0.5
    curriculum_episodes: int = 8000
    critic_loss: str = "masked"        # "masked" | "headwise"
    dtype: str = "float32"             # network precision during training

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.target_clip <= 0.0:
            raise ValueError("target_clip must be > 0")
        if self.policy_delay < 1 or self.batch_size < 1:
            raise ValueError("policy_delay and batch_size must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")
        if self.critic_loss not in ("masked", "headwise"):
            raise ValueError(f"unknown critic_loss {self.critic_loss!r}")

    @property
    def warmup_size(self) -> int:
        return 10 * self.batch_size if self.warmup is None else self.warmup

    def yield_probability(self, episode: int) -> float:
        if self.curriculum_episodes <= 0:
            return 0.0
        return self.yield_start * max(0.0, 1.0 - episode / self.curriculum_episodes)


# ---------------------------------------------------------------------------
# replay


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s2: np.ndarray
    done: bool
    g: np.ndarray
    r_vec: np.ndarray | None = None


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    done: np.ndarray
    g: np.ndarray
    r_vec: np.ndarray
    idx: np.ndarray


class ReplayBuffer:
    """Fixed-capacity FIFO ring with uniform sampling (with replacement)."""

    def __init__(self, capacity: int, rng: np.random.Generator | None = None):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.rng = rng if rng is not None else np.random.default_rng()
        self.s = np.zeros((capacity, STATE_DIM))
        self.a = np.zeros((capacity, ACTION_DIM))
        self.r = np.zeros(capacity)
        self.r_vec = np.zeros((capacity, 4))
        self.s2 = np.zeros((capacity, STATE_DIM))
        self.done = np.zeros(capacity)
        self.cursor = 0
        self.size = 0
        self.pushed = 0

    def __len__(self) -> int:
        return self.size

    def push(self, t: Transition) -> None:
        i = self.cursor
        self.s[i] = t.s
        self.a[i] = t.a
        self.r[i] = t.r
        self.r_vec[i] = t.r_vec if t.r_vec is not None else 0.0
        self.s2[i] = t.s2
        self.done[i] = float(t.done)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.pushed += 1

    def sample(self, n: int) -> Batch:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = self.rng.integers(0, self.size, n)
        s = self.s[idx]
        return Batch(s, self.a[idx], self.r[idx], self.s2[idx], self.done[idx],
                     s[:, TASK_SLICE], self.r_vec[idx], idx)

    def oldest_first(self) -> list[int]:
        """Storage slots ordered from oldest to newest."""
        if self.size < self.capacity:
            return list(range(self.size))
        return [(self.cursor + k) % self.capacity for k in range(self.capacity)]


# ---------------------------------------------------------------------------
# agent


class TD3Agent:
    def __init__(self, cfg: TrainConfig, seed: int | None = None):
        seed = cfg.seed if seed is None else seed
        ss = np.random.SeedSequence(seed)
        s_actor, s_c1, s_c2, s_noise = (int(c.generate_state(1)[0]) for c in ss.spawn(4))
        self.cfg = cfg
        self.rng = np.random.default_rng(s_noise)
        dt = np.dtype(cfg.dtype)
        self.actor = make_actor(cfg.attention, s_actor, dt)
        self.actor_target = make_actor(cfg.attention, s_actor, dt)
        self.critic1 = MultiTaskCritic(s_c1, "critic", dtype=dt)
        self.critic2 = MultiTaskCritic(s_c2, "critic", dtype=dt)
        self.critic1_target = MultiTaskCritic(s_c1, "critic", dtype=dt)
        self.critic2_target = MultiTaskCritic(s_c2, "critic", dtype=dt)
        for tgt, src in self._pairs():
            src.params.pack()
            tgt.params.pack()
            tgt.params.assign(src.params)
        self.actor_opt = nn.Adam(self.actor.params, nn.AdamHyper(lr=cfg.actor_lr))
        self.critic1_opt = nn.Adam(self.critic1.params, nn.AdamHyper(lr=cfg.critic_lr))
        self.critic2_opt = nn.Adam(self.critic2.params, nn.AdamHyper(lr=cfg.critic_lr))
        self.updates = 0

    def _pairs(self):
        return ((self.actor_target, self.actor), (self.critic1_target, self.critic1),
                (self.critic2_target, self.critic2))

    def act(self, s) -> np.ndarray:
        return self.actor.act(s)[0]

    def exploration_action(self, s, safety=None):
        """pi(s) + N(0, psi) clipped to [0, 1]^2, then safety-corrected if enabled."""
        a_hat = self.actor.act(s)[0]
        if self.cfg.explore_std > 0.0:
            a_hat = np.clip(a_hat + self.rng.normal(0.0, self.cfg.explore_std, ACTION_DIM), 0.0, 1.0)
        if safety is None:
            return a_hat, None
        corr = safety(s, a_hat)
        return corr.action, corr

    def polyak(self, tau: float | None = None) -> None:
        tau = self.cfg.tau if tau is None else tau
        for tgt, src in self._pairs():
            tgt.params.polyak(src.params, tau)

    def train_step(self, batch: Batch, t: int | None = None) -> dict:
        cfg = self.cfg
        self.updates += 1
        t = self.updates if t is None else t
        N = len(batch.r)
        a2, _, _ = self.actor_target.forward(batch.s2)
        noise = np.clip(self.rng.normal(0.0, cfg.target_std, a2.shape), -cfg.target_clip, cfg.target_clip)
        a2 = np.clip(a2 + noise, 0.0, 1.0)
        out1_t = self.critic1_target(batch.s2, a2)
        out2_t = self.critic2_target(batch.s2, a2)
        q1_t, q2_t = q_value(out1_t, batch.g), q_value(out2_t, batch.g)
        not_done = 1.0 - batch.done
        y = batch.r + cfg.gamma * not_done * np.minimum(q1_t, q2_t)
        if cfg.critic_loss == "headwise":
            pick = np.where((q1_t <= q2_t)[:, None], out1_t, out2_t)
            y_vec = batch.r_vec + cfg.gamma * not_done[:, None] * pick

        stats = {}
        for k, (critic, opt) in enumerate(((self.critic1, self.critic1_opt),
                                           (self.critic2, self.critic2_opt)), start=1):
            out, cache = critic.forward(batch.s, batch.a)
            if cfg.critic_loss == "masked":
                err = q_value(out, batch.g) - y
                loss = float(np.mean(err ** 2))
                d_out = (2.0 / N) * err[:, None] * batch.g
            else:
                err = (out - y_vec) * batch.g
                loss = float(np.mean(np.sum(err ** 2, axis=1)))
                d_out = (2.0 / N) * err
            critic.backward(cache, d_out)
            opt.step()
            stats[f"critic{k}_loss"] = loss

        if t % cfg.policy_delay == 0:
            a_pi, _, a_cache = self.actor.forward(batch.s)
            out, c_cache = self.critic1.forward(batch.s, a_pi)
            stats["actor_loss"] = -float(np.mean(q_value(out, batch.g)))
            _, d_a = self.critic1.backward(c_cache, -batch.g / N, param_grads=False)
            self.actor.backward(a_cache, d_a)
            self.actor_opt.step()
            self.polyak()
        for name, v in stats.items():
            if not math.isfinite(v):
                raise TrainingDiverged(f"{name} = {v} at update {t}")
        return stats

    # checkpoints ------------------------------------------------------------

    def save(self, prefix) -> None:
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        nn.save_params(self.actor.params, f"{prefix}.actor")
        nn.save_params(self.critic1.params, f"{prefix}.critic1")
        nn.save_params(self.critic2.params, f"{prefix}.critic2")
        Path(f"{prefix}.json").write_text(json.dumps({"attention": self.cfg.attention}))


def load_actor(prefix):
    """Rebuild the actor saved by :meth:`TD3Agent.save`."""
    meta_path = Path(f"{prefix}.json")
    if not meta_path.exists():
        raise FileNotFoundError(f"no checkpoint at {prefix}")
    meta = json.loads(meta_path.read_text())
    actor = make_actor(meta["attention"], 0)
    actor.params.assign(nn.load_params(f"{prefix}.actor"))
    return actor


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpisodeLog:
    episode: int
    task: str
    outcome: str
    ep_return: float
    steps: int
    activations: int
    yield_probability: float


@dataclass
class TrainingResult:
    agent: TD3Agent
    logs: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    update_stats: list = field(default_factory=list)

    def write_logs(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "task", "outcome", "return", "steps", "activations", "yield_probability"])
            for e in self.logs:
                w.writerow([e.episode, e.task, e.outcome, repr(e.ep_return), e.steps, e.activations,
                            e.yield_probability])

    def write_curves(self, path, window: int = 100) -> None:
        """Per-episode return and success with trailing moving averages."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "return", "success", "return_ma", "success_ma"])
            rets, succ = [], []
            for e in self.logs:
                rets.append(e.ep_return)
                succ.append(1.0 if e.outcome == "success" else 0.0)
                lo = max(0, len(rets) - window)
                w.writerow([e.episode, repr(e.ep_return), succ[-1],
                            repr(float(np.mean(rets[lo:]))), repr(float(np.mean(succ[lo:])))])


def run_training(env_factory, cfg: TrainConfig, safety=None, out_dir=None,
                 agent: TD3Agent | None = None, max_steps: int | None = None,
                 callback=None) -> TrainingResult:
    """Algorithm loop: explore (optionally safety-corrected), store, update.

    ``env_factory(seed)`` must return an environment; ``safety`` is a frozen
    :class:`~safenav.safety.SafetyLayer` or None.  ``callback(result)`` runs
    after every episode; returning True stops training early.
    """
    if cfg.safety and safety is None:
        raise ValueError("cfg.safety is on but no trained safety layer was given")
    if not cfg.safety:
        safety = None
    ss = np.random.SeedSequence(cfg.seed)
    s_env, s_agent, s_buf, s_task = (int(c.generate_state(1)[0]) for c in ss.spawn(4))
    env = env_factory(s_env)
    agent = agent or TD3Agent(cfg, s_agent)
    buffer = ReplayBuffer(cfg.buffer_size, np.random.default_rng(s_buf))
    task_rng = np.random.default_rng(s_task)
    out_dir = Path(out_dir) if out_dir is not None else None
    result = TrainingResult(agent)
    total_steps = 0
    recent = []

    for ep in range(cfg.episodes):
        p_yield = cfg.yield_probability(ep)
        env.set_yield_probability(p_yield)
        task = cfg.tasks[int(task_rng.integers(len(cfg.tasks)))]
        s = env.reset(task)
        g = s[TASK_SLICE].copy()
        ep_ret, steps, acts, done = 0.0, 0, 0, False
        outcome = "running"
        while not done:
            a, corr = agent.exploration_action(s, safety)
            if corr is not None and corr.active:
                acts += 1
            s2, r_vec, done, info = env.step(a)
            r = float(g @ r_vec)
            terminal = done and not info.truncated
            buffer.push(Transition(s, a, r, s2, terminal, g, r_vec))
            ep_ret += r
            steps += 1
            total_steps += 1
            outcome = info.outcome
            s = s2
            if len(buffer) >= cfg.warmup_size:
                for _ in range(cfg.updates_per_step):
                    try:
                        stats = agent.train_step(buffer.sample(cfg.batch_size))
                    except TrainingDiverged:
                        _dump_diagnostics(out_dir, result, recent)
                        raise
                    recent = (recent + [stats])[-50:]
            if max_steps is not None and total_steps >= max_steps:
                break
        result.logs.append(EpisodeLog(ep, task, outcome, ep_ret, steps, acts, p_yield))
        if recent:
            result.update_stats.append(recent[-1])
        log.info("episode %d task %s outcome %s return %.2f steps %d", ep, task, outcome, ep_ret, steps)
        if out_dir is not None and cfg.checkpoint_every and (ep + 1) % cfg.checkpoint_every == 0:
            prefix = out_dir / f"ckpt_{ep + 1:06d}"
            agent.save(prefix)
            result.checkpoints.append(str(prefix))
        if max_steps is not None and total_steps >= max_steps:
            break
        if callback is not None and callback(result):
            break
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        agent.save(out_dir / "final")
        result.checkpoints.append(str(out_dir / "final"))
        result.write_logs(out_dir / "episodes.csv")
        result.write_curves(out_dir / "curves.csv")
    return result


def _dump_diagnostics(out_dir, result: TrainingResult, recent) -> None:
    if out_dir is None:
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"recent_updates": recent, "episodes": [asdict(e) for e in result.logs[-20:]]}
    (out_dir / "diverged.json").write_text(json.dumps(payload, indent=2, default=float))
