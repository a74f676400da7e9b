"""Deterministic 2D traffic world: agents, kinematics, lights, collisions.

The ego follows a kinematic bicycle model driven by (steer, throttle, brake).
Background vehicles track lane centerlines with IDM longitudinal control and
stop for red lights. Pedestrians ping-pong along scripted paths, holding in
place while a vehicle straddles the path just ahead. Stepping draws no
random numbers, so a world evolves bit-identically from its spawn.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .routing import Route, plan_route, wrap_angle
from .worldmap import MapGraph, Polyline

KMH = 1.0 / 3.6  # km/h -> m/s

EGO_WIDTH = 2.0
EGO_LENGTH = 4.5
MAX_ACCEL = 3.0        # m/s^2 at full throttle
MAX_BRAKE = 8.0        # m/s^2 at full brake
MAX_STEER_DEG = 35.0
BOUNDARY_TOL = 0.3     # m a corner may poke past the drivable edge

# IDM parameters for background traffic
IDM_MIN_GAP = 2.0      # m
IDM_HEADWAY = 1.5      # s
IDM_ACCEL = 2.0        # m/s^2
IDM_DECEL = 3.0        # m/s^2
IDM_EXPONENT = 4.0
RED_STOP_BACKOFF = 0.2  # m the front bumper keeps behind a red stop line


@dataclass
class AgentState:
    id: int
    kind: str  # "ego" | "vehicle" | "pedestrian"
    x: float
    y: float
    yaw: float
    vx: float = 0.0
    vy: float = 0.0
    ax: float = 0.0
    ay: float = 0.0
    w: float = EGO_WIDTH
    l: float = EGO_LENGTH
    steer: float = 0.0
    throttle: float = 0.0
    brake: float = 0.0

    @property
    def speed(self) -> float:
        return float(np.hypot(self.vx, self.vy))

    def corners(self) -> np.ndarray:
        """Footprint corner points (4, 2), pose at the rectangle center."""
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        dx, dy = self.l / 2.0, self.w / 2.0
        local = np.array([[dx, dy], [dx, -dy], [-dx, -dy], [-dx, dy]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.x, self.y])


@dataclass
class EpisodeConfig:
    map_id: str
    start: tuple  # (x, y, yaw)
    goal: tuple   # (x, y)
    vehicle_count: int = 0
    pedestrian_count: int = 0
    seed: int = 0
    dt: float = 0.05
    max_duration: float = 120.0

    def __post_init__(self):
        if len(self.start) != 3:
            raise ValueError("start must be (x, y, yaw)")
        if len(self.goal) != 2:
            raise ValueError("goal must be (x, y)")
        if self.vehicle_count < 0 or self.pedestrian_count < 0:
            raise ValueError("agent counts must be >= 0")
        if not (0.0 < self.dt <= 0.1):
            raise ValueError(f"dt must be in (0, 0.1], got {self.dt}")
        if self.max_duration <= 0:
            raise ValueError("max_duration must be > 0")


@dataclass
class _VehiclePlan:
    line: Polyline          # concatenated chain centerline
    lane_bounds: np.ndarray  # arc position where each chain lane starts
    lane_ids: list[str]
    s: float
    v: float
    v0: float               # desired speed, m/s
    respawns: int = 0       # recycle events so far, part of the rng stream

    def lane_at(self, s: float) -> tuple[str, float]:
        i = int(np.searchsorted(self.lane_bounds, s, side="right")) - 1
        i = min(max(i, 0), len(self.lane_ids) - 1)
        return self.lane_ids[i], float(self.lane_bounds[i])


@dataclass
class _PedPlan:
    line: Polyline
    s: float
    v: float
    direction: float  # +1 or -1


@dataclass
class WorldState:
    t: float
    agents: list[AgentState]  # ego first
    light_red: dict[str, bool]
    seed: int
    rng_pos: int
    graph: MapGraph
    plans: dict[int, _VehiclePlan] = field(default_factory=dict)
    peds: dict[int, _PedPlan] = field(default_factory=dict)

    @property
    def ego(self) -> AgentState:
        return self.agents[0]


def _build_chain(graph: MapGraph, lane_id: str, rng: np.random.Generator,
                 min_len: float = 250.0) -> tuple[Polyline, np.ndarray, list[str]]:
    """Random forward walk over successors from lane_id."""
    ids = [lane_id]
    pts = [graph.lanes[lane_id].line.points]
    bounds = [0.0]
    total = graph.lanes[lane_id].length
    cur = lane_id
    while total < min_len:
        succ = graph.lanes[cur].successors
        if not succ:
            break
        cur = succ[int(rng.integers(len(succ)))]
        if ids.count(cur) > 2:  # avoid unbounded ring loops in the chain
            break
        lane = graph.lanes[cur]
        bounds.append(total)
        ids.append(cur)
        pts.append(lane.line.points)
        total += lane.length
    merged = [pts[0]]
    for seg in pts[1:]:
        start = 1 if np.hypot(*(seg[0] - merged[-1][-1])) < 1e-6 else 0
        merged.append(seg[start:])
    chain = np.concatenate(merged, axis=0)
    return Polyline(chain), np.array(bounds), ids


def _heading_state(line: Polyline, s: float, v: float) -> tuple[float, float, float, float, float]:
    p = line.point_at(s)
    yaw = line.heading_at(s)
    return float(p[0]), float(p[1]), yaw, v * np.cos(yaw), v * np.sin(yaw)


def make_world(graph: MapGraph, cfg: EpisodeConfig) -> tuple[WorldState, Route]:
    """Spawn a world for an episode; all randomness comes from cfg.seed."""
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    draws = 0
    route = plan_route(graph, cfg.start, cfg.goal)

    sx, sy, syaw = cfg.start
    ego = AgentState(0, "ego", sx, sy, syaw)
    agents = [ego]
    plans: dict[int, _VehiclePlan] = {}
    peds: dict[int, _PedPlan] = {}
    next_id = 1

    for pv in graph.parked:
        agents.append(AgentState(next_id, "vehicle", pv.x, pv.y, pv.yaw,
                                 w=pv.w, l=pv.l))
        next_id += 1

    lane_list = list(graph.lanes.values())
    ego_s0 = route.project((sx, sy))[0]
    for _ in range(cfg.vehicle_count):
        placed = False
        for _attempt in range(60):
            lane = lane_list[int(rng.integers(len(lane_list)))]
            s_lane = float(rng.uniform(2.0, max(lane.length - 2.0, 2.1)))
            draws += 2
            if s_lane >= lane.length - 2.0:
                continue
            p = lane.line.point_at(s_lane)
            if np.hypot(p[0] - sx, p[1] - sy) < 10.0:
                continue
            s_r, lat_r, _ = route.project(p)
            if abs(lat_r) < 2.0 and 0.0 <= s_r - ego_s0 <= 15.0:
                continue  # keep the spawn corridor ahead of the ego clear
            too_close = False
            for other in agents[1:]:
                if np.hypot(p[0] - other.x, p[1] - other.y) < 8.0:
                    too_close = True
                    break
            if too_close:
                continue
            line, bounds, ids = _build_chain(graph, lane.id, rng)
            v = float(rng.uniform(0.4, 0.8)) * lane.speed_limit * KMH
            w = float(rng.uniform(1.8, 2.1))
            l = float(rng.uniform(4.2, 4.8))
            draws += 3
            x, y, yaw, vx, vy = _heading_state(line, s_lane, v)
            agents.append(AgentState(next_id, "vehicle", x, y, yaw, vx, vy, w=w, l=l))
            plans[next_id] = _VehiclePlan(line, bounds, ids, s_lane, v,
                                          lane.speed_limit * KMH)
            next_id += 1
            placed = True
            break
        if not placed:
            continue

    if graph.ped_paths:
        for _ in range(cfg.pedestrian_count):
            path = graph.ped_paths[int(rng.integers(len(graph.ped_paths)))]
            s0 = float(rng.uniform(0.0, path.line.length))
            v = float(rng.uniform(path.speed_min, path.speed_max))
            direction = 1.0 if rng.random() < 0.5 else -1.0
            draws += 4
            x, y, yaw, vx, vy = _heading_state(path.line, s0, v)
            if direction < 0:
                yaw = wrap_angle(yaw + np.pi)
                vx, vy = -vx, -vy
            agents.append(AgentState(next_id, "pedestrian", x, y, yaw, vx, vy,
                                     w=0.5, l=0.5))
            peds[next_id] = _PedPlan(path.line, s0, v, direction)
            next_id += 1

    light_red = {light.id: light.is_red(0.0) for light in graph.lights}
    world = WorldState(0.0, agents, light_red, cfg.seed, draws, graph, plans, peds)
    return world, route


def _idm_accel(v: float, v0: float, gap: float, dv: float) -> float:
    free = 1.0 - (v / max(v0, 0.1)) ** IDM_EXPONENT
    if gap is None:
        return IDM_ACCEL * free
    gap = max(gap, 0.1)
    s_star = IDM_MIN_GAP + max(0.0, v * IDM_HEADWAY
                               + v * dv / (2.0 * np.sqrt(IDM_ACCEL * IDM_DECEL)))
    return IDM_ACCEL * (free - (s_star / gap) ** 2)


RESPAWN_EGO_CLEARANCE = 30.0   # outside the raster footprint
RESPAWN_AGENT_CLEARANCE = 8.0


def _respawn_vehicle(world: WorldState, agent: AgentState,
                     plan: _VehiclePlan) -> bool:
    """Re-insert a vehicle that ran out of road on a fresh chain.

    Draws from a stream keyed by (episode seed, agent id, attempt) so
    reruns of the same episode recycle identically.
    """
    rng = np.random.Generator(np.random.PCG64(
        [world.seed, agent.id, plan.respawns]))
    plan.respawns += 1
    ego = world.ego
    lane_list = list(world.graph.lanes.values())
    for _attempt in range(20):
        lane = lane_list[int(rng.integers(len(lane_list)))]
        s_lane = float(rng.uniform(2.0, max(lane.length - 2.0, 2.1)))
        if s_lane >= lane.length - 2.0:
            continue
        p = lane.line.point_at(s_lane)
        if np.hypot(p[0] - ego.x, p[1] - ego.y) < RESPAWN_EGO_CLEARANCE:
            continue
        blocked = False
        for other in world.agents[1:]:
            if other.id == agent.id:
                continue
            if np.hypot(p[0] - other.x, p[1] - other.y) < RESPAWN_AGENT_CLEARANCE:
                blocked = True
                break
        if blocked:
            continue
        line, bounds, ids = _build_chain(world.graph, lane.id, rng)
        v = float(rng.uniform(0.4, 0.8)) * lane.speed_limit * KMH
        x, y, yaw, vx, vy = _heading_state(line, s_lane, v)
        agent.x, agent.y, agent.yaw = x, y, yaw
        agent.vx, agent.vy = vx, vy
        agent.ax = agent.ay = 0.0
        plan.line, plan.lane_bounds, plan.lane_ids = line, bounds, ids
        plan.s, plan.v = s_lane, v
        plan.v0 = lane.speed_limit * KMH
        return True
    return False


def _step_vehicle(world: WorldState, agent: AgentState, plan: _VehiclePlan,
                  dt: float) -> None:
    graph = world.graph
    # Nearest obstacle ahead inside this vehicle's corridor.
    gap = None
    dv = 0.0
    for other in world.agents:
        if other.id == agent.id:
            continue
        s_o, lat_o, _ = plan.line.project((other.x, other.y))
        lat_lim = 1.5 if other.kind == "pedestrian" else 2.2
        if abs(lat_o) > lat_lim or s_o <= plan.s + 0.1 or s_o - plan.s > 60.0:
            continue
        tangent = plan.line.heading_at(s_o)
        v_along = other.vx * np.cos(tangent) + other.vy * np.sin(tangent)
        g = s_o - plan.s - (agent.l + other.l) / 2.0
        if gap is None or g < gap:
            gap = g
            dv = plan.v - max(v_along, 0.0)

    # Red stop line on the current chain lane.
    lane_id, lane_start = plan.lane_at(plan.s)
    stop_at = None
    light = graph.light_for_lane(lane_id)
    if light is not None and world.light_red[light.id]:
        s_stop = lane_start + graph.stop_line_s(light.id, lane_id)
        front_limit = s_stop - agent.l / 2.0
        if plan.s <= front_limit + 1e-9:
            # hold at the backoff point, or in place if already closer
            stop_at = max(front_limit - RED_STOP_BACKOFF, plan.s)
            g = front_limit - plan.s
            if gap is None or g < gap:
                gap = g
                dv = plan.v

    a = _idm_accel(plan.v, plan.v0, gap, dv)
    a = float(np.clip(a, -MAX_BRAKE, IDM_ACCEL))
    s_new = plan.s + plan.v * dt
    v_new = float(np.clip(plan.v + a * dt, 0.0, 60.0))
    if stop_at is not None and plan.s <= stop_at + 1e-9 and s_new > stop_at:
        s_new = stop_at
        v_new = 0.0
    end = plan.line.length - 0.5
    if s_new >= end:
        # chain exhausted: recycle the vehicle elsewhere, or wait parked
        # at the end until a clear spot opens up
        if _respawn_vehicle(world, agent, plan):
            return
        s_new = end
        v_new = 0.0
    x, y, yaw, vx, vy = _heading_state(plan.line, s_new, v_new)
    agent.ax = (vx - agent.vx) / dt
    agent.ay = (vy - agent.vy) / dt
    agent.x, agent.y, agent.yaw = x, y, yaw
    agent.vx, agent.vy = vx, vy
    plan.s, plan.v = s_new, v_new


PED_YIELD_AHEAD = 1.6    # m along the path a walker scans before stepping
PED_GAP_MOVING = 1.5     # m of footprint clearance demanded from live traffic
PED_GAP_STOPPED = 0.5    # m; walkers do pass close in front of standing cars


def _rect_gap(px: float, py: float, other: AgentState) -> float:
    """Distance from a point to an agent's oriented footprint rectangle."""
    c, s = np.cos(other.yaw), np.sin(other.yaw)
    dx, dy = px - other.x, py - other.y
    du = max(abs(dx * c + dy * s) - other.l / 2.0, 0.0)
    dw = max(abs(-dx * s + dy * c) - other.w / 2.0, 0.0)
    return float(np.hypot(du, dw))


def _ped_blocked(world: WorldState, agent: AgentState, ped: _PedPlan) -> bool:
    """Walkers hold rather than step into a vehicle straddling their path.

    The clearance is measured to the vehicle footprint, not its center,
    so a car stopped short of the crossing does not pin walkers in place
    (which would deadlock the whole junction when that car is itself
    waiting for them).
    """
    probe = ped.line.point_at(ped.s + ped.direction * PED_YIELD_AHEAD)
    for other in world.agents:
        if other.kind == "pedestrian":
            continue
        margin = PED_GAP_MOVING if other.speed > 0.2 else PED_GAP_STOPPED
        if _rect_gap(probe[0], probe[1], other) < margin:
            return True
    return False


def step_world(world: WorldState, ego_controls: tuple[float, float, float],
               dt: float) -> WorldState:
    """Advance one tick in place; returns the same WorldState."""
    steer = float(np.clip(ego_controls[0], -1.0, 1.0))
    throttle = float(np.clip(ego_controls[1], 0.0, 1.0))
    brake = float(np.clip(ego_controls[2], 0.0, 1.0))

    ego = world.ego
    v = ego.speed
    ego.x += v * np.cos(ego.yaw) * dt
    ego.y += v * np.sin(ego.yaw) * dt
    delta = steer * np.deg2rad(MAX_STEER_DEG)
    wheelbase = 0.6 * ego.l
    ego.yaw = wrap_angle(ego.yaw + v / wheelbase * np.tan(delta) * dt)
    a = MAX_ACCEL * throttle - MAX_BRAKE * brake
    v_new = max(0.0, v + a * dt)
    vx_new, vy_new = v_new * np.cos(ego.yaw), v_new * np.sin(ego.yaw)
    ego.ax = (vx_new - ego.vx) / dt
    ego.ay = (vy_new - ego.vy) / dt
    ego.vx, ego.vy = vx_new, vy_new
    ego.steer, ego.throttle, ego.brake = steer, throttle, brake

    for agent in world.agents[1:]:
        plan = world.plans.get(agent.id)
        if plan is not None:
            _step_vehicle(world, agent, plan, dt)
            continue
        ped = world.peds.get(agent.id)
        if ped is not None:
            if _ped_blocked(world, agent, ped):
                agent.ax = -agent.vx / dt
                agent.ay = -agent.vy / dt
                agent.vx = agent.vy = 0.0
                continue
            s = ped.s + ped.direction * ped.v * dt
            if s > ped.line.length:
                s = 2.0 * ped.line.length - s
                ped.direction = -1.0
            elif s < 0.0:
                s = -s
                ped.direction = 1.0
            ped.s = s
            x, y, yaw, vx, vy = _heading_state(ped.line, s, ped.v)
            if ped.direction < 0:
                yaw = wrap_angle(yaw + np.pi)
                vx, vy = -vx, -vy
            agent.ax = (vx - agent.vx) / dt
            agent.ay = (vy - agent.vy) / dt
            agent.x, agent.y, agent.yaw = x, y, yaw
            agent.vx, agent.vy = vx, vy

    world.t += dt
    for light in world.graph.lights:
        world.light_red[light.id] = light.is_red(world.t)
    return world


def _project_interval(corners: np.ndarray, axis: np.ndarray) -> tuple[float, float]:
    p = corners @ axis
    return float(p.min()), float(p.max())


def rects_overlap(c1: np.ndarray, c2: np.ndarray) -> bool:
    """Separating-axis test for oriented rectangles; touching counts."""
    for corners in (c1, c2):
        for i in (0, 1):
            edge = corners[i + 1] - corners[i]
            axis = np.array([-edge[1], edge[0]])
            lo1, hi1 = _project_interval(c1, axis)
            lo2, hi2 = _project_interval(c2, axis)
            if hi1 < lo2 or hi2 < lo1:
                return False
    return True


BOUNDARY_ID = -1


def collision_check(world: WorldState) -> list[tuple[int, int]]:
    """Ego vs agents (SAT) and ego corners vs the drivable boundary.

    Boundary contact is reported as the pair (0, BOUNDARY_ID).
    """
    ego = world.ego
    out = []
    ec = ego.corners()
    for other in world.agents[1:]:
        if abs(other.x - ego.x) + abs(other.y - ego.y) > 20.0:
            continue
        if rects_overlap(ec, other.corners()):
            out.append((ego.id, other.id))
    for corner in ec:
        if world.graph.offroad_excess(corner) > BOUNDARY_TOL:
            out.append((ego.id, BOUNDARY_ID))
            break
    return out
