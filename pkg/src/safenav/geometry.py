"""Junction layout, route polylines and oriented-rectangle overlap tests.

Frame: origin at the junction centre, x east, y north, right-hand traffic.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np

EGO_TASKS = ("left", "straight", "right")


class Route:
    """Polyline with cumulative arc length; poses are interpolated by progress."""

    def __init__(self, route_id: str, points, segments: dict[str, float] | None = None):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError("route needs at least two 2-D points")
        seg = np.diff(pts, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(seg_len <= 0.0):
            raise ValueError(f"route {route_id}: repeated waypoint")
        self.route_id = route_id
        self.points = pts
        self._xs = pts[:, 0].tolist()
        self._ys = pts[:, 1].tolist()
        self._cum = [0.0] + np.cumsum(seg_len).tolist()
        self._headings = np.arctan2(seg[:, 1], seg[:, 0]).tolist()
        self.length = self._cum[-1]
        # arc-length boundaries of named sections (approach / junction / exit)
        self.segments = segments or {}

    def pose_at(self, s: float) -> tuple[float, float, float]:
        s = min(max(s, 0.0), self.length)
        i = min(bisect_right(self._cum, s) - 1, len(self._headings) - 1)
        seg_len = self._cum[i + 1] - self._cum[i]
        u = (s - self._cum[i]) / seg_len
        x = self._xs[i] + u * (self._xs[i + 1] - self._xs[i])
        y = self._ys[i] + u * (self._ys[i + 1] - self._ys[i])
        return x, y, self._headings[i]

    def section(self, s: float) -> int:
        """0 on the approach, 1 inside the junction, 2 on the exit."""
        if s < self.segments.get("junction_start", math.inf):
            return 0
        if s < self.segments.get("junction_end", math.inf):
            return 1
        return 2


def _arc(center, radius, a0, a1, n):
    ts = np.linspace(a0, a1, n + 1)
    return np.stack([center[0] + radius * np.cos(ts), center[1] + radius * np.sin(ts)], axis=1)


@dataclass(frozen=True)
class Lane:
    """A straight through-lane used by social traffic."""

    lane_id: str
    arm: str
    origin: tuple[float, float]
    direction: tuple[float, float]

    def to_lane(self, x: float, y: float) -> tuple[float, float]:
        """(longitudinal, lateral) coordinates of a point relative to this lane."""
        dx, dy = x - self.origin[0], y - self.origin[1]
        ux, uy = self.direction
        return dx * ux + dy * uy, -dx * uy + dy * ux


@dataclass
class MapSpec:
    ew_lanes_per_direction: int = 2
    ns_lanes_per_direction: int = 1
    lane_width: float = 3.5
    junction_half_extent: float = 15.0
    approach_length: float = 30.0
    exit_length: float = 20.0
    social_arm_length: float = 70.0
    arc_segments: int = 24
    routes: dict[str, Route] = field(init=False, repr=False, compare=False)
    lanes: dict[str, Lane] = field(init=False, repr=False, compare=False)
    # (ego task, lane id) -> (ego arc length, lane longitudinal coordinate) of the first conflict
    conflicts: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.ew_lanes_per_direction < 1 or self.ns_lanes_per_direction < 1:
            raise ValueError("need at least one lane per direction")
        w, h = self.lane_width, self.junction_half_extent
        if h < w * max(self.ew_lanes_per_direction, self.ns_lanes_per_direction):
            raise ValueError("junction too small for the carriageways")
        self.lanes = self._build_lanes()
        self.routes = self._build_ego_routes()
        for lane in self.lanes.values():
            L = self.social_arm_length
            p0 = (lane.origin[0], lane.origin[1])
            p1 = (p0[0] + 2 * L * lane.direction[0], p0[1] + 2 * L * lane.direction[1])
            self.routes[lane.lane_id] = Route(lane.lane_id, [p0, p1])
        self.conflicts = self._build_conflicts()

    # lane k = 0 is the innermost (next to the centre line)
    def _offset(self, k: int) -> float:
        return (k + 0.5) * self.lane_width

    def _build_lanes(self) -> dict[str, Lane]:
        L = self.social_arm_length
        lanes = {}
        for k in range(self.ew_lanes_per_direction):
            o = self._offset(k)
            lanes[f"W{k}"] = Lane(f"W{k}", "west", (-L, -o), (1.0, 0.0))   # eastbound
            lanes[f"E{k}"] = Lane(f"E{k}", "east", (L, o), (-1.0, 0.0))    # westbound
        for k in range(self.ns_lanes_per_direction):
            o = self._offset(k)
            lanes[f"N{k}"] = Lane(f"N{k}", "north", (-o, L), (0.0, -1.0))  # southbound
            lanes[f"S{k}"] = Lane(f"S{k}", "south", (o, -L), (0.0, 1.0))   # northbound
        return lanes

    def _build_ego_routes(self) -> dict[str, Route]:
        h = self.junction_half_extent
        y0 = -self._offset(0)                   # ego spawns in the inner eastbound lane
        x_start = -h - self.approach_length
        start = np.array([[x_start, y0], [-h, y0]])
        n = self.arc_segments
        routes = {}

        # left: quarter circle onto the inner northbound lane
        x_exit = self._offset(0)
        r = x_exit + h
        arc = _arc((-h, h), r, -math.pi / 2, 0.0, n)
        arc[-1] = (x_exit, h)
        tail = np.array([[x_exit, h + self.exit_length]])
        routes["left"] = (start, arc, tail)

        # straight across
        mid = np.array([[h, y0]])
        tail = np.array([[h + self.exit_length, y0]])
        routes["straight"] = (start, mid, tail)

        # right: quarter circle onto the inner southbound lane
        x_exit = -self._offset(0)
        r = h + x_exit
        arc = _arc((-h, -h), r, math.pi / 2, 0.0, n)
        arc[-1] = (x_exit, -h)
        tail = np.array([[x_exit, -h - self.exit_length]])
        routes["right"] = (start, arc, tail)

        out = {}
        for task, (a, j, t) in routes.items():
            j = j[1:] if np.allclose(j[0], a[-1]) else j
            pts = np.concatenate([a, j, t])
            js = float(np.hypot(*(a[-1] - a[0])))
            jl = float(np.sum(np.hypot(*np.diff(np.concatenate([a[-1:], j]), axis=0).T)))
            out[task] = Route(task, pts, {"junction_start": js, "junction_end": js + jl})
        return out

    def _build_conflicts(self) -> dict:
        out = {}
        half = self.lane_width / 2.0
        for task in EGO_TASKS:
            route = self.routes[task]
            ss = np.arange(0.0, route.length, 0.25)
            for lane in self.lanes.values():
                hit = None
                for s in ss:
                    x, y, hd = route.pose_at(float(s))
                    lon, lat = lane.to_lane(x, y)
                    if abs(lat) < half and 0.0 < lon < 2 * self.social_arm_length:
                        hit = (float(s), float(lon))
                        break
                out[(task, lane.lane_id)] = hit
        return out

    def ego_spawn_pose(self) -> tuple[float, float, float]:
        return self.routes["left"].pose_at(0.0)


# ---------------------------------------------------------------------------
# separating-axis test for oriented rectangles


def rect_corners(x, y, heading, length, width):
    c, s = math.cos(heading), math.sin(heading)
    hl, hw = length / 2.0, width / 2.0
    return [
        (x + c * hl - s * hw, y + s * hl + c * hw),
        (x + c * hl + s * hw, y + s * hl - c * hw),
        (x - c * hl + s * hw, y - s * hl - c * hw),
        (x - c * hl - s * hw, y - s * hl + c * hw),
    ]


def _project(corners, ax, ay):
    vals = [px * ax + py * ay for px, py in corners]
    return min(vals), max(vals)


def rects_overlap(a, b) -> bool:
    """``a`` and ``b`` are (x, y, heading, length, width) tuples."""
    reach = math.hypot(a[3], a[4]) / 2.0 + math.hypot(b[3], b[4]) / 2.0
    if math.hypot(a[0] - b[0], a[1] - b[1]) > reach:
        return False
    ca, cb = rect_corners(*a), rect_corners(*b)
    for hd in (a[2], b[2]):
        for ax, ay in ((math.cos(hd), math.sin(hd)), (-math.sin(hd), math.cos(hd))):
            amin, amax = _project(ca, ax, ay)
            bmin, bmax = _project(cb, ax, ay)
            if amax <= bmin or bmax <= amin:
                return False
    return True
