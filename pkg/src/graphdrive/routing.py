"""Global route planning over the lane graph (A*) and the Route type."""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .worldmap import Lane, MapGraph, Polyline, TrafficLight


class NoRoute(Exception):
    """No lane-graph path between the requested endpoints."""


@dataclass
class RouteSpan:
    """One contiguous stretch of a single lane inside a route."""
    lane_id: str
    route_s0: float  # arc position of the span start along the route
    lane_s0: float   # arc position of the span start along the lane
    length: float
    speed_limit: float  # km/h


@dataclass
class LightEvent:
    route_s: float  # stop-line position along the route
    light: TrafficLight


class Route:
    """Waypoint path from start to goal along lane centerlines."""

    def __init__(self, waypoints: np.ndarray, lane_ids: list[str],
                 speeds: list[float], spans: list[RouteSpan],
                 light_events: list[LightEvent]):
        self.waypoints = waypoints
        self.lane_ids = lane_ids
        self.speeds = speeds
        self.spans = spans
        self.light_events = light_events
        self.line = Polyline(waypoints)

    @property
    def length(self) -> float:
        return self.line.length

    def project(self, p) -> tuple[float, float, float]:
        return self.line.project(p)

    def _span_at(self, s: float) -> RouteSpan:
        for span in self.spans:
            if s < span.route_s0 + span.length:
                return span
        return self.spans[-1]

    def lane_at(self, s: float) -> str:
        return self._span_at(s).lane_id

    def v_lim_at(self, s: float) -> float:
        """Speed limit (km/h) governing the route position s."""
        return self._span_at(s).speed_limit

    def next_light(self, s: float, behind_tol: float = 1.0) -> LightEvent | None:
        """First stop line at or ahead of route position s."""
        for ev in self.light_events:
            if ev.route_s >= s - behind_tol:
                return ev
        return None


def _sub_polyline(line: Polyline, s0: float, s1: float) -> np.ndarray:
    i0, _ = line._locate(s0)
    i1, _ = line._locate(s1)
    pts = [line.point_at(s0)]
    for v in range(i0 + 1, i1 + 1):
        if np.hypot(*(line.points[v] - pts[-1])) > 1e-9:
            pts.append(line.points[v])
    end = line.point_at(s1)
    if np.hypot(*(end - pts[-1])) > 1e-9:
        pts.append(end)
    return np.array(pts)


def _project_to_lane(graph: MapGraph, x: float, y: float, yaw: float | None,
                     tol: float = 0.5) -> tuple[Lane, float] | None:
    best = None
    best_d = np.inf
    for lane in graph.lanes.values():
        s, _, d = lane.line.project((x, y))
        if d > lane.width / 2.0 + tol or d >= best_d:
            continue
        if yaw is not None:
            diff = abs(wrap_angle(lane.line.heading_at(s) - yaw))
            if diff > np.pi / 2:
                continue
        best, best_d, best_s = lane, d, s
    if best is None:
        return None
    return best, best_s


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    r = (a + np.pi) % (2.0 * np.pi) - np.pi
    if r == -np.pi:
        r = np.pi
    return float(r)


def plan_route(graph: MapGraph, start, goal, spacing: float = 1.0) -> Route:
    """Minimal arc-length path through the lane graph, densified waypoints.

    start: (x, y) or (x, y, yaw); goal: (x, y). Raises NoRoute when an
    endpoint does not project onto a lane or no path exists.
    """
    syaw = start[2] if len(start) > 2 else None
    hit = _project_to_lane(graph, start[0], start[1], syaw)
    if hit is None:
        raise NoRoute(f"start {tuple(start[:2])} does not project onto any lane")
    start_lane, s_start = hit
    hit = _project_to_lane(graph, goal[0], goal[1], None)
    if hit is None:
        raise NoRoute(f"goal {tuple(goal[:2])} does not project onto any lane")
    goal_lane, s_goal = hit

    best_total = np.inf
    best_chain: list[str] | None = None
    if goal_lane.id == start_lane.id and s_goal >= s_start - 1e-9:
        best_total = s_goal - s_start
        best_chain = [start_lane.id]

    # A* over lane entry points; g = cost from the start position to the
    # lane's first point. The start lane itself is re-enterable via a cycle.
    goal_pt = np.asarray(goal[:2], dtype=np.float64)

    def h(lane_id: str) -> float:
        p = graph.lanes[lane_id].line.points[0]
        return float(np.hypot(p[0] - goal_pt[0], p[1] - goal_pt[1]))

    g_init = start_lane.length - s_start
    heap: list[tuple[float, int, str]] = []
    seen_g: dict[str, float] = {}
    parent: dict[str, str | None] = {}
    seq = 0
    for succ in start_lane.successors:
        if g_init < seen_g.get(succ, np.inf):
            seen_g[succ] = g_init
            parent[succ] = None
            heapq.heappush(heap, (g_init + h(succ), seq, succ))
            seq += 1
    settled: set[str] = set()
    while heap:
        f, _, lane_id = heapq.heappop(heap)
        if lane_id in settled:
            continue
        settled.add(lane_id)
        gval = seen_g[lane_id]
        if lane_id == goal_lane.id:
            total = gval + s_goal
            if total < best_total:
                best_total = total
                chain = [lane_id]
                while parent[chain[-1]] is not None:
                    chain.append(parent[chain[-1]])
                best_chain = [start_lane.id] + chain[::-1]
            break
        lane = graph.lanes[lane_id]
        for succ in lane.successors:
            if succ in settled:
                continue
            g2 = gval + lane.length
            if g2 < seen_g.get(succ, np.inf):
                seen_g[succ] = g2
                parent[succ] = lane_id
                heapq.heappush(heap, (g2 + h(succ), seq, succ))
                seq += 1

    if best_chain is None:
        raise NoRoute(f"no path from lane {start_lane.id!r} to lane {goal_lane.id!r}")

    # Assemble lane pieces into a single vertex list with attributes.
    pieces: list[tuple[Lane, float, float]] = []
    if len(best_chain) == 1:
        pieces.append((start_lane, s_start, s_goal))
    else:
        pieces.append((start_lane, s_start, start_lane.length))
        for lane_id in best_chain[1:-1]:
            lane = graph.lanes[lane_id]
            pieces.append((lane, 0.0, lane.length))
        pieces.append((goal_lane, 0.0, s_goal))

    verts: list[np.ndarray] = []
    lane_ids: list[str] = []
    speeds: list[float] = []
    spans: list[RouteSpan] = []
    arc = 0.0
    for lane, sa, sb in pieces:
        if sb - sa < 1e-6:
            continue
        sub = _sub_polyline(lane.line, sa, sb)
        start_idx = 0
        if verts and np.hypot(*(sub[0] - verts[-1])) < 1e-6:
            start_idx = 1
        for p in sub[start_idx:]:
            verts.append(p)
            lane_ids.append(lane.id)
            speeds.append(lane.speed_limit)
        spans.append(RouteSpan(lane.id, arc, sa, sb - sa, lane.speed_limit))
        arc += sb - sa
    if len(verts) < 2:
        raise NoRoute("route is degenerate (start and goal coincide)")

    # Densify so consecutive waypoints are at most `spacing` apart.
    dense_pts: list[np.ndarray] = [verts[0]]
    dense_lanes: list[str] = [lane_ids[0]]
    dense_speeds: list[float] = [speeds[0]]
    for i in range(1, len(verts)):
        seg = verts[i] - verts[i - 1]
        seg_len = float(np.hypot(seg[0], seg[1]))
        n = max(int(np.ceil(seg_len / spacing)), 1)
        for k in range(1, n + 1):
            dense_pts.append(verts[i - 1] + seg * (k / n))
            dense_lanes.append(lane_ids[i - 1])
            dense_speeds.append(speeds[i - 1])
    waypoints = np.array(dense_pts)

    light_events: list[LightEvent] = []
    for span in spans:
        for light in graph.lights:
            if span.lane_id in light.lanes:
                s_stop = graph.stop_line_s(light.id, span.lane_id)
                if span.lane_s0 - 1e-6 <= s_stop <= span.lane_s0 + span.length + 1e-6:
                    light_events.append(
                        LightEvent(span.route_s0 + (s_stop - span.lane_s0), light))
    light_events.sort(key=lambda ev: ev.route_s)
    return Route(waypoints, dense_lanes, dense_speeds, spans, light_events)
