"""Fixed-timestep kinematic intersection world with IDM social traffic."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import EGO_TASKS, MapSpec, rects_overlap

RUNNING = "running"
SUCCESS = "success"
COLLISION = "collision"
TIMEOUT = "timeout"
OUTCOMES = (RUNNING, SUCCESS, COLLISION, TIMEOUT)

EGO_ID = 0


class TerminalWorldError(RuntimeError):
    pass


@dataclass(frozen=True)
class IdmParams:
    a_max: float = 2.0
    b_comfort: float = 3.0
    s0: float = 2.0
    headway: float = 1.5
    b_max: float = 8.0
    delta: float = 4.0


def idm_acceleration(v: float, v0: float, gap: float | None, dv: float, p: IdmParams) -> float:
    """Intelligent Driver Model acceleration, clamped to [-b_max, a_max].

    ``dv`` is the approach rate (own speed minus leader speed); ``gap=None``
    means free road.
    """
    free = 1.0 - (v / v0) ** p.delta
    if gap is None:
        acc = p.a_max * free
    elif gap <= 0.0:
        return -p.b_max
    else:
        s_star = p.s0 + v * p.headway + v * dv / (2.0 * math.sqrt(p.a_max * p.b_comfort))
        s_star = max(s_star, 0.0)
        acc = p.a_max * (free - (s_star / gap) ** 2)
    return min(max(acc, -p.b_max), p.a_max)


@dataclass(frozen=True)
class EgoLimits:
    max_accel: float = 2.6
    max_decel: float = 4.5
    max_speed: float = 9.0


@dataclass(frozen=True)
class TrafficConfig:
    # vehicles / second for each arm
    spawn_rate: dict = field(default_factory=lambda: {"west": 0.1, "east": 0.25, "north": 0.1, "south": 0.1})
    desired_speed: float = 8.0
    idm: IdmParams = field(default_factory=IdmParams)
    yield_probability: float = 0.0
    max_social: int = 16
    vehicle_length: float = 4.5
    vehicle_width: float = 1.8
    spawn_clearance: float = 12.0

    def __post_init__(self):
        if not 0.0 <= self.yield_probability <= 1.0:
            raise ValueError("yield_probability must lie in [0, 1]")
        if any(r < 0.0 for r in self.spawn_rate.values()):
            raise ValueError("spawn rates must be non-negative")
        if self.desired_speed <= 0.0 or self.max_social < 0:
            raise ValueError("desired_speed must be > 0 and max_social >= 0")
        for name in ("a_max", "b_comfort", "s0", "headway", "b_max"):
            if getattr(self.idm, name) <= 0.0:
                raise ValueError(f"idm.{name} must be > 0")


@dataclass
class VehicleState:
    id: int
    role: str                 # "ego" | "social"
    route_id: str
    progress: float
    speed: float
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0
    length: float = 4.5
    width: float = 1.8
    v0: float = 8.0
    yields: bool = False      # social treats the ego as an obstacle

    def box(self):
        return (self.x, self.y, self.heading, self.length, self.width)

    @property
    def velocity(self) -> tuple[float, float]:
        return self.speed * math.cos(self.heading), self.speed * math.sin(self.heading)


@dataclass
class WorldState:
    roads: MapSpec = field(compare=False, repr=False)
    t0: float = 0.1
    t_max: float = 60.0
    step_count: int = 0
    vehicles: dict = field(default_factory=dict)
    outcome: str = RUNNING
    next_id: int = 1
    spawned: int = 0
    spawn_blocked: int = 0
    social_overlaps: int = 0

    @property
    def time(self) -> float:
        return self.step_count * self.t0

    @property
    def terminal(self) -> bool:
        return self.outcome != RUNNING

    @property
    def ego(self) -> VehicleState | None:
        return self.vehicles.get(EGO_ID)

    def socials(self) -> list[VehicleState]:
        return [v for v in self.vehicles.values() if v.role == "social"]


def _place(world: WorldState, veh: VehicleState) -> None:
    veh.x, veh.y, veh.heading = world.roads.routes[veh.route_id].pose_at(veh.progress)


def new_world(roads: MapSpec, task: str | None = "left", t0: float = 0.1, t_max: float = 60.0,
              ego_speed: float = 0.0, traffic: TrafficConfig | None = None) -> WorldState:
    world = WorldState(roads=roads, t0=t0, t_max=t_max)
    if task is not None:
        if task not in EGO_TASKS:
            raise ValueError(f"unknown task {task!r}")
        traffic = traffic or TrafficConfig()
        ego = VehicleState(EGO_ID, "ego", task, 0.0, ego_speed,
                           length=traffic.vehicle_length, width=traffic.vehicle_width)
        _place(world, ego)
        world.vehicles[EGO_ID] = ego
    return world


# ---------------------------------------------------------------------------
# leaders


def _lane_leader(world: WorldState, veh: VehicleState, traffic: TrafficConfig):
    """Closest obstacle ahead in ``veh``'s lane as (gap, leader speed along lane)."""
    lane = world.roads.lanes[veh.route_id]
    half = world.roads.lane_width / 2.0
    ux, uy = lane.direction
    best = None
    for other in world.vehicles.values():
        if other is veh:
            continue
        if other.role == "social":
            if other.route_id != veh.route_id or other.progress <= veh.progress:
                continue
            gap = other.progress - veh.progress - (other.length + veh.length) / 2.0
            speed_along = other.speed
        else:
            lon_o, lat_o = lane.to_lane(other.x, other.y)
            lon_v = veh.progress
            if lon_o <= lon_v:
                continue
            cos_rel = math.cos(other.heading) * ux + math.sin(other.heading) * uy
            aligned = cos_rel > 0.9 and abs(lat_o) < half
            blocking = veh.yields and abs(lat_o) < half + other.length / 2.0
            if not (aligned or blocking):
                continue
            gap = lon_o - lon_v - (other.length + veh.length) / 2.0
            speed_along = max(other.speed * cos_rel, 0.0)
        if best is None or gap < best[0]:
            best = (gap, speed_along)
    return best


# ---------------------------------------------------------------------------
# stepping


def ego_speed_update(v: float, target: float, t0: float, limits: EgoLimits) -> float:
    acc = min(max((target - v) / t0, -limits.max_decel), limits.max_accel)
    return max(v + acc * t0, 0.0)


def step_world(world: WorldState, ego_target_speed: float, traffic: TrafficConfig,
               rng: np.random.Generator, limits: EgoLimits = EgoLimits()) -> WorldState:
    """Advance ``world`` in place by one timestep and return it."""
    if world.terminal:
        raise TerminalWorldError(f"world already terminated ({world.outcome})")
    if not 0.0 <= ego_target_speed <= limits.max_speed + 1e-9:
        raise ValueError(f"target speed {ego_target_speed} outside [0, {limits.max_speed}]")
    t0 = world.t0
    roads = world.roads

    # synchronous update: all accelerations from the pre-step state
    new_speeds = {}
    for veh in world.vehicles.values():
        if veh.role == "ego":
            new_speeds[veh.id] = ego_speed_update(veh.speed, ego_target_speed, t0, limits)
        else:
            lead = _lane_leader(world, veh, traffic)
            if lead is None:
                acc = idm_acceleration(veh.speed, veh.v0, None, 0.0, traffic.idm)
            else:
                acc = idm_acceleration(veh.speed, veh.v0, lead[0], veh.speed - lead[1], traffic.idm)
            new_speeds[veh.id] = max(veh.speed + acc * t0, 0.0)

    gone = []
    for veh in world.vehicles.values():
        veh.speed = new_speeds[veh.id]
        length = roads.routes[veh.route_id].length
        veh.progress = veh.progress + veh.speed * t0
        if veh.progress >= length:
            veh.progress = length
            if veh.role == "social":
                gone.append(veh.id)
        _place(world, veh)
    for vid in gone:
        del world.vehicles[vid]

    _spawn(world, traffic, rng)
    world.step_count += 1
    world.social_overlaps += count_social_overlaps(world)
    world.outcome = episode_outcome(world, world.t_max)
    return world


def _spawn(world: WorldState, traffic: TrafficConfig, rng: np.random.Generator) -> None:
    roads = world.roads
    for arm in ("west", "east", "north", "south"):
        rate = traffic.spawn_rate.get(arm, 0.0)
        u = rng.random()
        if u >= rate * world.t0:
            continue
        lanes = [l for l in roads.lanes.values() if l.arm == arm]
        lane = lanes[int(rng.integers(len(lanes)))] if len(lanes) > 1 else lanes[0]
        yields = bool(rng.random() < traffic.yield_probability)
        if sum(1 for v in world.vehicles.values() if v.role == "social") >= traffic.max_social \
                or _spawn_blocked(world, lane, traffic):
            world.spawn_blocked += 1
            continue
        veh = VehicleState(world.next_id, "social", lane.lane_id, 0.0, traffic.desired_speed,
                           length=traffic.vehicle_length, width=traffic.vehicle_width,
                           v0=traffic.desired_speed, yields=yields)
        _place(world, veh)
        world.vehicles[veh.id] = veh
        world.next_id += 1
        world.spawned += 1


def _spawn_blocked(world: WorldState, lane, traffic: TrafficConfig) -> bool:
    half = world.roads.lane_width / 2.0
    for v in world.vehicles.values():
        lon, lat = lane.to_lane(v.x, v.y)
        if abs(lat) < half + v.width / 2.0 and abs(lon) < traffic.spawn_clearance:
            return True
    return False


# ---------------------------------------------------------------------------
# collisions and outcomes


def detect_collision(world: WorldState):
    """First overlapping (ego id, social id) pair, or None."""
    ego = world.ego
    if ego is None:
        return None
    eb = ego.box()
    for v in world.vehicles.values():
        if v.role == "social" and rects_overlap(eb, v.box()):
            return (ego.id, v.id)
    return None


def count_social_overlaps(world: WorldState) -> int:
    socials = world.socials()
    n = 0
    for i in range(len(socials)):
        bi = socials[i].box()
        for j in range(i + 1, len(socials)):
            if rects_overlap(bi, socials[j].box()):
                n += 1
    return n


def episode_outcome(world: WorldState, t_max: float) -> str:
    if world.outcome != RUNNING:
        return world.outcome
    ego = world.ego
    if ego is None:
        return RUNNING
    if detect_collision(world) is not None:
        return COLLISION
    if ego.progress >= world.roads.routes[ego.route_id].length:
        return SUCCESS
    if world.time >= t_max - 1e-9:
        return TIMEOUT
    return RUNNING


# ---------------------------------------------------------------------------
# traces

TRACE_FIELDS = ("time", "id", "role", "x", "y", "heading", "speed")


def trace_rows(world: WorldState) -> list[tuple]:
    t = round(world.time, 10)
    return [(t, v.id, v.role, v.x, v.y, v.heading, v.speed) for v in world.vehicles.values()]


def write_trace(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_FIELDS)
        w.writerows(rows)
