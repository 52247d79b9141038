import numpy as np
import pytest

from safenav.actor import make_actor
from safenav.env import IntersectionEnv
from safenav.evaluation import ActorPolicy, run_episode
from safenav.viz import (VisualizationError, read_trace, read_weights, render_attention, validate,
                         weight_matrix, write_attention_csv, write_episode_trace)
from safenav.world import TrafficConfig


def recorded(tmp_path, traffic=None, t_max=3.0):
    env = IntersectionEnv(traffic=traffic, seed=0, t_max=t_max)
    rec = run_episode(env, ActorPolicy(make_actor(True, 0)), "left", record=True)
    write_episode_trace(tmp_path / "trace.csv", rec.trace)
    write_attention_csv(tmp_path / "w.csv", rec.attention)
    return rec


def test_ego_only_episode_has_unit_ego_weight(tmp_path):
    rec = recorded(tmp_path, TrafficConfig(spawn_rate={}))
    w = read_weights(tmp_path / "w.csv")
    assert len(w) == rec.steps
    m = weight_matrix(w)
    assert np.all(m[0] == 1.0) and np.all(m[1:] == 0.0)


def test_render_writes_frames_and_heatmap(tmp_path):
    rec = recorded(tmp_path)
    paths = render_attention(tmp_path / "trace.csv", tmp_path / "w.csv", tmp_path / "img", every=10)
    names = sorted(p.name for p in paths)
    assert "heatmap.png" in names
    assert sum(n.startswith("frame_") for n in names) == len(range(0, rec.steps, 10))
    assert all(p.stat().st_size > 0 for p in paths)


def test_mismatched_steps_rejected(tmp_path):
    recorded(tmp_path)
    frames = read_trace(tmp_path / "trace.csv")
    weights = read_weights(tmp_path / "w.csv")
    del weights[max(weights)]
    with pytest.raises(VisualizationError):
        validate(frames, weights)


def test_bad_sums_and_padded_weights_rejected():
    frames = {0: [(0, "ego", 0.0, 0.0, 0.0, 0.0)]}
    with pytest.raises(VisualizationError):
        validate(frames, {0: [(0, 0, 0.7)]})
    with pytest.raises(VisualizationError):
        validate(frames, {0: [(0, 0, 0.9), (1, -1, 0.1)]})
    validate(frames, {0: [(0, 0, 1.0), (1, -1, 0.0)]})
