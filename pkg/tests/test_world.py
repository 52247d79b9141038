import math
from dataclasses import replace

import numpy as np
import pytest

from safenav.geometry import MapSpec
from safenav.world import (COLLISION, EGO_ID, RUNNING, SUCCESS, TIMEOUT, EgoLimits, IdmParams,
                           TerminalWorldError, TrafficConfig, VehicleState, _place, detect_collision,
                           ego_speed_update, episode_outcome, idm_acceleration, new_world, step_world,
                           trace_rows)

ROADS = MapSpec()
EMPTY = TrafficConfig(spawn_rate={"west": 0.0, "east": 0.0, "north": 0.0, "south": 0.0})


def add_social(world, lane, progress, speed=8.0, yields=False):
    v = VehicleState(world.next_id, "social", lane, progress, speed, v0=8.0, yields=yields)
    _place(world, v)
    world.vehicles[v.id] = v
    world.next_id += 1
    return v


def test_idm_free_road_and_standstill():
    p = IdmParams()
    assert idm_acceleration(0.0, 8.0, None, 0.0, p) == pytest.approx(p.a_max)
    assert idm_acceleration(8.0, 8.0, None, 0.0, p) == pytest.approx(0.0)
    # closing fast on a near leader: clamped at the hard braking limit
    assert idm_acceleration(8.0, 8.0, 1.0, 8.0, p) == -p.b_max
    assert idm_acceleration(5.0, 8.0, -0.5, 0.0, p) == -p.b_max


def test_idm_at_desired_gap():
    p = IdmParams()
    v = 5.0
    s_star = p.s0 + v * p.headway
    acc = idm_acceleration(v, 8.0, s_star, 0.0, p)
    assert acc == pytest.approx(p.a_max * (1 - (v / 8.0) ** 4 - 1.0))


def test_ego_speed_update_respects_limits():
    lim = EgoLimits()
    assert ego_speed_update(0.0, 9.0, 0.1, lim) == pytest.approx(0.26)
    assert ego_speed_update(5.0, 0.0, 0.1, lim) == pytest.approx(4.55)
    assert ego_speed_update(5.0, 5.1, 0.1, lim) == pytest.approx(5.1)
    assert ego_speed_update(0.2, 0.0, 0.1, lim) == 0.0


def test_new_world_places_ego():
    w = new_world(ROADS, "left")
    assert w.ego.id == EGO_ID
    assert (w.ego.x, w.ego.y) == pytest.approx((-45.0, -1.75))
    assert w.outcome == RUNNING
    with pytest.raises(ValueError):
        new_world(ROADS, "u-turn")


def test_empty_traffic_reaches_success():
    w = new_world(ROADS, "straight")
    rng = np.random.default_rng(0)
    while not w.terminal:
        step_world(w, 9.0, EMPTY, rng)
    assert w.outcome == SUCCESS
    # 80 m: ~3.5 s ramp to 9 m/s, then cruise
    assert 9.5 < w.time < 11.0


def test_step_after_terminal_raises():
    w = new_world(ROADS, "left", t_max=0.2)
    rng = np.random.default_rng(0)
    step_world(w, 0.0, EMPTY, rng)
    step_world(w, 0.0, EMPTY, rng)
    assert w.outcome == TIMEOUT
    with pytest.raises(TerminalWorldError):
        step_world(w, 0.0, EMPTY, rng)


def test_target_speed_validated():
    w = new_world(ROADS, "left")
    with pytest.raises(ValueError):
        step_world(w, 12.0, EMPTY, np.random.default_rng(0))


def test_collision_detected_and_sticky():
    w = new_world(ROADS, "straight")
    add_social(w, "W0", 25.5, speed=0.0)    # overlapping the ego at spawn
    assert detect_collision(w) == (EGO_ID, 1)
    step_world(w, 0.0, EMPTY, np.random.default_rng(0))
    assert w.outcome == COLLISION
    assert episode_outcome(w, 60.0) == COLLISION


def test_collision_beats_success_and_timeout():
    w = new_world(ROADS, "straight", t_max=0.1)
    w.ego.progress = ROADS.routes["straight"].length
    _place(w, w.ego)
    add_social(w, "W0", 25.0 + 80.0, speed=0.0)
    w.step_count = 1
    assert episode_outcome(w, 0.1) == COLLISION


def test_social_follows_ego_in_shared_lane():
    # a social approaching the stopped ego from behind brakes instead of hitting it
    w = new_world(ROADS, "straight")
    add_social(w, "W0", 0.0, speed=8.0)
    rng = np.random.default_rng(0)
    for _ in range(200):
        step_world(w, 0.0, EMPTY, rng)
    assert w.outcome == RUNNING
    social = w.socials()[0]
    assert social.speed < 0.5
    assert 25.0 - social.progress > 4.5


def test_yielding_social_stops_for_ego_in_its_lane():
    w = new_world(ROADS, "left")
    w.ego.progress = 42.75          # on the southbound lane's crossing point
    _place(w, w.ego)
    stop = add_social(w, "N0", 40.0, yields=True)
    follower = add_social(w, "N0", 10.0, yields=False)
    rng = np.random.default_rng(0)
    for _ in range(150):
        step_world(w, 0.0, EMPTY, rng)
        if w.terminal:
            break
    assert w.outcome == RUNNING
    assert stop.speed < 0.2
    assert follower.progress < stop.progress


def test_non_yielding_social_hits_stopped_ego():
    w = new_world(ROADS, "left")
    w.ego.progress = 42.75
    _place(w, w.ego)
    add_social(w, "N0", 40.0, yields=False)
    rng = np.random.default_rng(0)
    for _ in range(100):
        step_world(w, 0.0, EMPTY, rng)
        if w.terminal:
            break
    assert w.outcome == COLLISION


def test_socials_despawn_at_lane_end():
    w = new_world(ROADS, None)
    add_social(w, "E0", 139.9)
    step_world(w, 0.0, EMPTY, np.random.default_rng(0))
    assert w.socials() == []


def test_spawn_rate_matches_bernoulli_expectation():
    tr = TrafficConfig(spawn_rate={"west": 0.0, "east": 0.5, "north": 0.0, "south": 0.0},
                       spawn_clearance=0.0, max_social=1000)
    w = new_world(ROADS, None)
    rng = np.random.default_rng(1)
    n = 20000
    for _ in range(n):
        step_world(w, 0.0, tr, rng)
    p = 0.5 * 0.1
    mean, sd = n * p, math.sqrt(n * p * (1 - p))
    assert abs(w.spawned + w.spawn_blocked - mean) < 3 * sd


def test_spawn_blocked_by_clearance_and_cap():
    tr = TrafficConfig(spawn_rate={"west": 0.0, "east": 10.0, "north": 0.0, "south": 0.0}, max_social=3)
    w = new_world(ROADS, None)
    rng = np.random.default_rng(0)
    for _ in range(300):
        step_world(w, 0.0, tr, rng)
        assert len(w.socials()) <= 3
    assert w.spawn_blocked > 0


def test_traffic_stream_independent_of_ego_actions():
    tr = TrafficConfig()
    a = new_world(ROADS, "left")
    b = new_world(ROADS, "left")
    ra, rb = np.random.default_rng(5), np.random.default_rng(5)
    for _ in range(50):
        step_world(a, 0.0, tr, ra)
        step_world(b, 9.0, tr, rb)
        if a.terminal or b.terminal:
            break
    assert a.spawned + a.spawn_blocked == b.spawned + b.spawn_blocked
    assert ra.random() == rb.random()


def test_determinism_same_seed():
    def run(seed):
        w = new_world(ROADS, "left")
        rng = np.random.default_rng(seed)
        rows = []
        for _ in range(200):
            step_world(w, 4.0, TrafficConfig(), rng)
            rows.extend(trace_rows(w))
            if w.terminal:
                break
        return rows
    assert run(3) == run(3)


def test_social_overlaps_counted_not_terminal():
    w = new_world(ROADS, None)
    # crossing streams meet near the junction centre
    add_social(w, "W1", 70.0)
    add_social(w, "N0", 70.0 + 5.25)
    before = w.social_overlaps
    rng = np.random.default_rng(0)
    for _ in range(20):
        step_world(w, 0.0, EMPTY, rng)
    assert w.social_overlaps > before
    assert w.outcome == RUNNING


def test_config_validation():
    with pytest.raises(ValueError):
        TrafficConfig(yield_probability=1.5)
    with pytest.raises(ValueError):
        TrafficConfig(spawn_rate={"west": -1.0})
    with pytest.raises(ValueError):
        TrafficConfig(idm=replace(IdmParams(), s0=0.0))
