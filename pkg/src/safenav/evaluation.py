"""Policy evaluation, baselines, report tables and the ablation grid."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .env import SPEED_SCALE, speed_to_action
from .geometry import EGO_TASKS
from .world import COLLISION, SUCCESS, TIMEOUT, IdmParams, idm_acceleration, trace_rows

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# policies: callables (state, env) -> raw action


class ActorPolicy:
    def __init__(self, actor):
        self.actor = actor
        self.last_weights = None

    def __call__(self, s, env):
        a, w = self.actor.act(s)
        self.last_weights = w
        return a


class RandomPolicy:
    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)
        self.last_weights = None

    def __call__(self, s, env):
        return self.rng.random(2)


class IdmEgoPolicy:
    """Ego follows IDM with the nearest conflicting vehicle as a virtual leader.

    A social vehicle becomes a leader when it is expected at the first conflict
    point with the ego route before the ego can clear it; the leader is then a
    standstill obstacle at that point.
    """

    def __init__(self, idm: IdmParams = IdmParams(a_max=2.6, b_comfort=3.0, s0=2.0, headway=1.2, b_max=4.5),
                 v0: float = SPEED_SCALE, clear_margin: float = 1.0):
        self.idm = idm
        self.v0 = v0
        self.clear_margin = clear_margin
        self.last_weights = None

    def leader_gap(self, env):
        world = env.world
        roads = world.roads
        ego = world.ego
        best = None
        for v in world.socials():
            hit = roads.conflicts.get((ego.route_id, v.route_id))
            if hit is None:
                continue
            s_ego, s_soc = hit
            lane = roads.lanes[v.route_id]
            if s_ego == 0.0:
                # ego starts in this lane: ordinary car following while still in it
                lon_e, lat_e = lane.to_lane(ego.x, ego.y)
                if abs(lat_e) >= roads.lane_width / 2.0 or v.progress <= lon_e:
                    continue
                gap = v.progress - lon_e - (v.length + ego.length) / 2.0
                lead_speed = v.speed
            else:
                d_ego = s_ego - ego.progress
                d_soc = s_soc - v.progress
                if d_ego < 0.0 or d_soc < -v.length:
                    continue
                eta_soc = d_soc / max(v.speed, 0.1)
                eta_clear = (d_ego + ego.length + roads.lane_width) / max(ego.speed, 1.0)
                if eta_soc > eta_clear + self.clear_margin:
                    continue
                gap = d_ego - ego.length / 2.0 - roads.lane_width / 2.0
                lead_speed = 0.0
            if best is None or gap < best[0]:
                best = (gap, lead_speed)
        return best

    def __call__(self, s, env):
        ego = env.world.ego
        lead = self.leader_gap(env)
        if lead is None:
            acc = idm_acceleration(ego.speed, self.v0, None, 0.0, self.idm)
        else:
            acc = idm_acceleration(ego.speed, self.v0, lead[0], ego.speed - lead[1], self.idm)
        target = min(max(ego.speed + acc * env.t0, 0.0), SPEED_SCALE)
        return speed_to_action(target)


# ---------------------------------------------------------------------------
# reports


@dataclass
class TaskStats:
    task: str
    episodes: int = 0
    successes: int = 0
    collisions: int = 0
    timeouts: int = 0
    success_time_sum: float = 0.0
    steps: int = 0
    activations: int = 0

    @property
    def success_rate(self) -> float:
        return 100.0 * self.successes / self.episodes if self.episodes else 0.0

    @property
    def collision_rate(self) -> float:
        return 100.0 * self.collisions / self.episodes if self.episodes else 0.0

    @property
    def timeout_rate(self) -> float:
        return 100.0 * self.timeouts / self.episodes if self.episodes else 0.0

    @property
    def average_time(self) -> float:
        return self.success_time_sum / self.successes if self.successes else math.nan

    @property
    def activation_rate(self) -> float:
        return self.activations / self.steps if self.steps else 0.0

    def merge(self, other: TaskStats) -> None:
        self.episodes += other.episodes
        self.successes += other.successes
        self.collisions += other.collisions
        self.timeouts += other.timeouts
        self.success_time_sum += other.success_time_sum
        self.steps += other.steps
        self.activations += other.activations


REPORT_FIELDS = ("task", "episodes", "success_rate", "collision_rate", "timeout_rate",
                 "average_time", "activation_rate")


@dataclass
class EvalReport:
    name: str
    per_task: dict = field(default_factory=dict)
    outcomes: list = field(default_factory=list)   # (task, episode, outcome, time)

    @property
    def aggregate(self) -> TaskStats:
        agg = TaskStats("all")
        for st in self.per_task.values():
            agg.merge(st)
        return agg

    def rows(self) -> list[TaskStats]:
        out = list(self.per_task.values())
        if len(out) > 1:
            out.append(self.aggregate)
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_FIELDS)
            for st in self.rows():
                w.writerow([st.task, st.episodes, f"{st.success_rate:.6f}", f"{st.collision_rate:.6f}",
                            f"{st.timeout_rate:.6f}", f"{st.average_time:.6f}", f"{st.activation_rate:.6f}"])

    def table(self) -> str:
        head = ["Task", "Episodes", "Success rate(%)", "Collision rate(%)", "Timeout rate(%)",
                "Average time(s)", "Lambda rate"]
        body = [[st.task, str(st.episodes), f"{st.success_rate:.1f}", f"{st.collision_rate:.1f}",
                 f"{st.timeout_rate:.1f}", "-" if math.isnan(st.average_time) else f"{st.average_time:.2f}",
                 f"{st.activation_rate:.3f}"] for st in self.rows()]
        return f"{self.name}\n" + format_table(head, body)


def format_table(head, body) -> str:
    widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
    line = "-+-".join("-" * w for w in widths)
    fmt = lambda r: " | ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
    return "\n".join([fmt(head), line] + [fmt(r) for r in body]) + "\n"


# ---------------------------------------------------------------------------
# evaluation loop


@dataclass
class EpisodeRecord:
    outcome: str
    time: float
    steps: int
    activations: int
    trace: list = field(default_factory=list)
    attention: list = field(default_factory=list)   # (step, slot, vehicle id, weight)


def run_episode(env, policy, task: str, safety=None, record: bool = False) -> EpisodeRecord:
    s = env.reset(task)
    done = False
    steps = acts = 0
    rec = EpisodeRecord("running", 0.0, 0, 0)
    info = None
    while not done:
        if record:
            rec.trace.extend((steps,) + row for row in trace_rows(env.world))
        ids = [0] + [v.id for v in env.social]
        a = policy(s, env)
        if record:
            w = getattr(policy, "last_weights", None)
            if w is not None:
                for slot, wt in enumerate(w):
                    rec.attention.append((steps, slot, ids[slot] if slot < len(ids) else -1, float(wt)))
        if safety is not None:
            corr = safety(s, a)
            acts += int(corr.active)
            a = corr.action
        s, _, done, info = env.step(a)
        steps += 1
    rec.outcome, rec.time, rec.steps, rec.activations = info.outcome, info.time, steps, acts
    return rec


def episode_seed(seed: int, task: str, episode: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, EGO_TASKS.index(task), episode])


def run_eval(policy, env_factory, n_episodes: int, seed: int = 0, tasks=("left",), safety=None,
             name: str = "eval") -> EvalReport:
    """Evaluate ``policy`` with yielding disabled; episode ``k`` of a task always
    sees the same traffic random stream, so different policies share seeds."""
    env = env_factory(seed)
    env.set_yield_probability(0.0)
    report = EvalReport(name)
    for task in tasks:
        st = TaskStats(task)
        for ep in range(n_episodes):
            env.rng = np.random.default_rng(episode_seed(seed, task, ep))
            rec = run_episode(env, policy, task, safety)
            st.episodes += 1
            st.steps += rec.steps
            st.activations += rec.activations
            if rec.outcome == SUCCESS:
                st.successes += 1
                st.success_time_sum += rec.time
            elif rec.outcome == COLLISION:
                st.collisions += 1
            elif rec.outcome == TIMEOUT:
                st.timeouts += 1
            report.outcomes.append((task, ep, rec.outcome, rec.time))
        report.per_task[task] = st
    return report


# ---------------------------------------------------------------------------
# ablation


ABLATION_CELLS = {
    # name: (attention, safety during training, safety at evaluation, base cell)
    "TD3": (False, False, False, None),
    "TD3+Attention": (True, False, False, None),
    "TD3+Safety": (False, True, True, None),
    "TD3+Safety+Attention": (True, True, True, None),
    "pre-trained+Safety": (True, False, True, "TD3+Attention"),
}


def params_digest(params) -> str:
    h = hashlib.sha256()
    for name, t in params.tensors.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t).tobytes())
    return h.hexdigest()


@dataclass
class AblationResult:
    reports: dict = field(default_factory=dict)
    missing: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    def table(self, task: str = "left") -> str:
        head = ["Method", "Success rate(%)", "Collision rate(%)", "Average time(s)", "Lambda rate"]
        body = []
        for name, rep in self.reports.items():
            st = rep.per_task.get(task) or rep.aggregate
            body.append([name, f"{st.success_rate:.1f}", f"{st.collision_rate:.1f}",
                         "-" if math.isnan(st.average_time) else f"{st.average_time:.2f}",
                         f"{st.activation_rate:.3f}"])
        return format_table(head, body)

    def write_csv(self, path, task: str = "left") -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("cell",) + REPORT_FIELDS)
            for name, rep in self.reports.items():
                for st in rep.rows():
                    w.writerow([name, st.task, st.episodes, f"{st.success_rate:.6f}",
                                f"{st.collision_rate:.6f}", f"{st.timeout_rate:.6f}",
                                f"{st.average_time:.6f}", f"{st.activation_rate:.6f}"])


def directional_flags(reports: dict, task: str = "left", tie: float = 1.0) -> list[str]:
    """Check the expected orderings; returns human-readable violations."""
    flags = []
    pairs = [("TD3+Safety", "TD3"), ("TD3+Safety+Attention", "TD3+Attention")]
    for safe, bare in pairs:
        if safe in reports and bare in reports:
            cs = reports[safe].per_task[task].collision_rate
            cb = reports[bare].per_task[task].collision_rate
            if cs > cb + tie:
                flags.append(f"{safe} collision rate {cs:.1f}% exceeds {bare} {cb:.1f}%")
    if "pre-trained+Safety" in reports and "TD3+Attention" in reports:
        sp = reports["pre-trained+Safety"].per_task[task].success_rate
        sb = reports["TD3+Attention"].per_task[task].success_rate
        if sp < sb - tie:
            flags.append(f"pre-trained+Safety success {sp:.1f}% below its base {sb:.1f}%")
    return flags


def run_ablation(cells, actors: dict, safety_layer, env_factory, n_episodes: int, seed: int = 0,
                 tasks=("left",)) -> AblationResult:
    """Evaluate every requested cell on shared seeds.

    ``actors`` maps trained cell names to actors; ``pre-trained+Safety`` reuses
    the ``TD3+Attention`` actor and only adds the safety layer at evaluation.
    """
    result = AblationResult()
    for name in cells:
        if name not in ABLATION_CELLS:
            raise ValueError(f"unknown ablation cell {name!r}")
        attention_on, _, eval_safety, base = ABLATION_CELLS[name]
        actor = actors.get(base or name)
        if actor is None or (eval_safety and safety_layer is None):
            result.missing.append(name)
            log.warning("ablation cell %s skipped: missing checkpoint or safety model", name)
            continue
        before = params_digest(actor.params)
        rep = run_eval(ActorPolicy(actor), env_factory, n_episodes, seed, tasks,
                       safety_layer if eval_safety else None, name)
        if params_digest(actor.params) != before:
            raise RuntimeError(f"{name}: actor weights changed during evaluation")
        result.reports[name] = rep
    result.flags = directional_flags(result.reports, tasks[0])
    return result
