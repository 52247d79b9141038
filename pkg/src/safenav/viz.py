"""Attention visualisation: top-down frames shaded by weight and a slot x time heatmap."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Polygon  # noqa: E402

from .geometry import MapSpec, rect_corners  # noqa: E402
from .world import TRACE_FIELDS  # noqa: E402

WEIGHT_FIELDS = ("episode", "step", "slot", "vehicle_id", "weight")


class VisualizationError(ValueError):
    pass


def write_attention_csv(path, records, episode: int = 0) -> None:
    """``records`` are (step, slot, vehicle id, weight) tuples."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(WEIGHT_FIELDS)
        for step, slot, vid, wt in records:
            w.writerow([episode, step, slot, vid, repr(float(wt))])


def write_episode_trace(path, rows) -> None:
    """``rows`` are (step, time, id, role, x, y, heading, speed) tuples."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("step",) + TRACE_FIELDS)
        for r in rows:
            w.writerow(r)


def read_trace(path) -> dict:
    frames = defaultdict(list)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            frames[int(row["step"])].append(
                (int(row["id"]), row["role"], float(row["x"]), float(row["y"]), float(row["heading"]),
                 float(row["speed"])))
    return dict(frames)


def read_weights(path) -> dict:
    steps = defaultdict(list)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            steps[int(row["step"])].append((int(row["slot"]), int(row["vehicle_id"]), float(row["weight"])))
    return {k: sorted(v) for k, v in steps.items()}


def validate(frames: dict, weights: dict, tol: float = 1e-9) -> None:
    if len(frames) != len(weights) or set(frames) != set(weights):
        raise VisualizationError(f"trace has {len(frames)} steps but weights cover {len(weights)}")
    for step, rows in weights.items():
        total = sum(w for _, _, w in rows)
        if abs(total - 1.0) > tol:
            raise VisualizationError(f"step {step}: attention weights sum to {total!r}")
        for slot, vid, w in rows:
            if vid < 0 and w != 0.0:
                raise VisualizationError(f"step {step}: padded slot {slot} has weight {w}")


def weight_matrix(weights: dict) -> np.ndarray:
    """(slots, steps) matrix in step order."""
    steps = sorted(weights)
    n_slots = max(slot for rows in weights.values() for slot, _, _ in rows) + 1
    m = np.zeros((n_slots, len(steps)))
    for j, step in enumerate(steps):
        for slot, _, w in weights[step]:
            m[slot, j] = w
    return m


def _draw_roads(ax, roads: MapSpec) -> None:
    h = roads.junction_half_extent
    L = roads.social_arm_length
    ew = roads.ew_lanes_per_direction * roads.lane_width
    ns = roads.ns_lanes_per_direction * roads.lane_width
    ax.add_patch(plt.Rectangle((-L, -ew), 2 * L, 2 * ew, color="0.85", zorder=0))
    ax.add_patch(plt.Rectangle((-ns, -L), 2 * ns, 2 * L, color="0.85", zorder=0))
    ax.plot([-L, -h], [0, 0], color="y", lw=0.8)
    ax.plot([h, L], [0, 0], color="y", lw=0.8)
    ax.plot([0, 0], [-L, -h], color="y", lw=0.8)
    ax.plot([0, 0], [h, L], color="y", lw=0.8)


def render_frame(ax, roads: MapSpec, vehicles, weight_of: dict, vehicle_length=4.5, vehicle_width=1.8,
                 view: float = 45.0, cmap=None) -> None:
    cmap = cmap or plt.get_cmap("Reds")
    _draw_roads(ax, roads)
    for vid, role, x, y, heading, _ in vehicles:
        corners = rect_corners(x, y, heading, vehicle_length, vehicle_width)
        w = weight_of.get(vid)
        face = cmap(0.15 + 0.85 * w) if w is not None and w > 0.0 else "white"
        edge = "blue" if role == "ego" else "black"
        ax.add_patch(Polygon(corners, closed=True, facecolor=face, edgecolor=edge, lw=1.2, zorder=2))
        if w is not None and w > 0.0:
            ax.text(x, y + 2.5, f"{w:.2f}", fontsize=6, ha="center", zorder=3)
    ax.set_xlim(-view, view)
    ax.set_ylim(-view, view)
    ax.set_aspect("equal")
    ax.set_xticks([])
    ax.set_yticks([])


def render_attention(trace_csv, weights_csv, out_dir, every: int = 10, roads: MapSpec | None = None,
                     vehicle_length: float = 4.5, vehicle_width: float = 1.8) -> list[Path]:
    """Validate the pair of CSVs, then write frame PNGs and ``heatmap.png``."""
    frames = read_trace(trace_csv)
    weights = read_weights(weights_csv)
    validate(frames, weights)
    roads = roads or MapSpec()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    steps = sorted(frames)
    for step in steps[::max(1, every)]:
        fig, ax = plt.subplots(figsize=(5, 5))
        weight_of = {vid: w for _, vid, w in weights[step] if vid >= 0}
        render_frame(ax, roads, frames[step], weight_of, vehicle_length, vehicle_width)
        ax.set_title(f"step {step}")
        path = out / f"frame_{step:05d}.png"
        fig.savefig(path, dpi=80)
        plt.close(fig)
        written.append(path)

    m = weight_matrix(weights)
    fig, ax = plt.subplots(figsize=(8, 3))
    im = ax.imshow(m, aspect="auto", cmap="viridis", vmin=0.0, vmax=1.0, interpolation="nearest")
    ax.set_yticks(range(m.shape[0]), ["ego"] + [f"social {k}" for k in range(1, m.shape[0])])
    ax.set_xlabel("step")
    fig.colorbar(im, ax=ax, label="attention weight")
    fig.tight_layout()
    path = out / "heatmap.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    written.append(path)
    return written
