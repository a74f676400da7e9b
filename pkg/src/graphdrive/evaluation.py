"""Closed-loop episode runner and the SR/DS benchmark harness.

An episode drives one EpisodeConfig to a terminal state: goal reached
(within GOAL_RADIUS_M of the final waypoint), collision, timeout
(cumulative moving time beyond route-length / (0.2 * mean limit)), or
stuck (standstill for STUCK_SECONDS while not waiting at a red light).
Red-light waits charge neither clock. The benchmark aggregates per-map
success rate and driving score DS = mean(R_i * P_i), re-seeding each
stuck episode once before counting it as a failure.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .bev import RasterConfig, compute_light_gate, rasterize
from .control import PidState, Targets, pid_control, targets_from_scalars
from .expert import ExpertConfig, expert_action
from .policy import (PolicyParams, build_ego_vector, build_node_features,
                     build_route_vector, policy_forward)
from .routing import Route
from .simulate import EpisodeConfig, collision_check, make_world, step_world
from .vae import VaeParams, encode
from .worldmap import load_shipped_map

GOAL_RADIUS_M = 3.0
STUCK_SPEED = 0.1            # m/s, below this the ego counts as standing
STUCK_SECONDS = 90.0
TIMEOUT_SPEED_FRACTION = 0.2  # of the mean speed limit
RED_WAIT_LOOKAHEAD = 20.0    # m, standing this close to a red line is waiting
RESEED_OFFSET = 100003       # seed shift for the one stuck-episode retry


@dataclass(frozen=True)
class EpisodeResult:
    success: bool
    completion: float   # R_i, arc-length fraction of the route covered
    penalty: float      # P_i, 0.5 iff any collision
    collisions: int
    stuck: bool
    distance_m: float
    duration_s: float
    reason: str         # goal | collision | timeout | stuck
    map_id: str
    seed: int

    def __post_init__(self):
        if self.success and (self.completion != 1.0 or self.collisions > 0):
            raise ValueError("success requires full completion and a clean "
                             "collision record")
        want = 0.5 if self.collisions > 0 else 1.0
        if self.penalty != want:
            raise ValueError(f"penalty must be {want} with "
                             f"{self.collisions} collisions")
        if not 0.0 <= self.completion <= 1.0:
            raise ValueError("completion must lie in [0, 1]")


class ExpertDriver:
    """Oracle targets straight from the rule-based expert; no network."""

    def __init__(self, cfg: ExpertConfig = ExpertConfig()):
        self.cfg = cfg

    def __call__(self, world, route: Route) -> Targets:
        v, theta = expert_action(world, route, self.cfg)
        return Targets(v, theta)


class PolicyDriver:
    """Drives the policy stack: raster -> latent -> graph -> targets.

    Variants without a context input skip rasterization entirely; the
    direct-control variant returns device-level controls, bypassing the
    PID stage.
    """

    def __init__(self, pp: PolicyParams, vae: VaeParams | None = None,
                 raster_cfg: RasterConfig = RasterConfig()):
        if pp.cfg.uses_context:
            if vae is None:
                raise ValueError(f"variant {pp.cfg.variant!r} needs a "
                                 "context encoder snapshot")
            if vae.cfg.latent_dim != pp.cfg.latent_dim:
                raise ValueError(
                    f"latent size mismatch: policy expects "
                    f"{pp.cfg.latent_dim}, encoder provides "
                    f"{vae.cfg.latent_dim}")
        self.pp = pp
        self.vae = vae
        self.raster_cfg = raster_cfg
        self.clamp_counter = PidState(dt=1.0)  # reused for clamp warnings

    def __call__(self, world, route: Route):
        pp = self.pp
        z = None
        if pp.cfg.uses_context:
            gate = compute_light_gate(world, route)
            frame = rasterize(world, route, gate, self.raster_cfg)
            z = encode(self.vae, frame).mu
        ego = world.ego
        c = build_node_features(world, pp.cfg.n_max,
                                (pp.cfg.roi_front, pp.cfg.roi_back,
                                 pp.cfg.roi_half_width))
        m = build_ego_vector(world, route)
        g = build_route_vector(route, (ego.x, ego.y, ego.yaw))
        out = policy_forward(pp, c, z, m, g)
        if pp.cfg.direct_control:
            return out.controls
        v_lim = route.v_lim_at(route.project((ego.x, ego.y))[0])
        return targets_from_scalars(out.kappa_v, out.kappa_theta, v_lim,
                                    self.clamp_counter)


def _as_driver(policy, vae, expert_cfg, raster_cfg):
    if policy == "expert":
        return ExpertDriver(expert_cfg or ExpertConfig())
    if isinstance(policy, PolicyParams):
        return PolicyDriver(policy, vae, raster_cfg or RasterConfig())
    if callable(policy):
        return policy
    raise TypeError(f"policy must be PolicyParams, 'expert', or a driver "
                    f"callable, got {type(policy).__name__}")


def _timeout_budget_s(route: Route) -> float:
    num = sum(sp.length * sp.speed_limit for sp in route.spans)
    den = sum(sp.length for sp in route.spans)
    mean_ms = (num / den) / 3.6
    return route.length / (TIMEOUT_SPEED_FRACTION * mean_ms)


def _waiting_at_red(world, route: Route, s: float) -> bool:
    ev = route.next_light(s)
    return (ev is not None
            and ev.route_s - s <= RED_WAIT_LOOKAHEAD
            and bool(world.light_red.get(ev.light.id, False)))


def run_episode(policy, vae, cfg: EpisodeConfig, *, graph=None,
                on_tick=None, expert_cfg: ExpertConfig | None = None,
                raster_cfg: RasterConfig | None = None) -> EpisodeResult:
    """Drive one episode to its terminal state.

    policy: PolicyParams, the string "expert" for the oracle, or any
    callable (world, route) -> Targets | (steer, throttle, brake).
    on_tick(world, route, action, controls, tick) fires once per executed
    tick, before the world advances.
    """
    if graph is None:
        graph = load_shipped_map(cfg.map_id)
    driver = _as_driver(policy, vae, expert_cfg, raster_cfg)
    world, route = make_world(graph, cfg)
    pid = PidState(dt=cfg.dt)
    goal_pt = route.waypoints[-1]
    budget = _timeout_budget_s(route)
    ego = world.ego

    s_mark = route.project((ego.x, ego.y))[0]
    moving_t = 0.0
    still_t = 0.0
    distance = 0.0
    collisions = 0
    tick = 0
    reason = None
    while reason is None:
        action = driver(world, route)
        if isinstance(action, Targets):
            controls = pid_control(action, ego, pid)
        else:
            controls = action
        if on_tick is not None:
            on_tick(world, route, action, controls, tick)
        px, py = ego.x, ego.y
        step_world(world, controls, cfg.dt)
        tick += 1
        distance += float(np.hypot(ego.x - px, ego.y - py))
        s_now = route.project((ego.x, ego.y))[0]
        s_mark = max(s_mark, s_now)

        if collision_check(world):
            collisions += 1
            reason = "collision"
        elif np.hypot(ego.x - goal_pt[0], ego.y - goal_pt[1]) <= GOAL_RADIUS_M:
            reason = "goal"
        elif ego.speed < STUCK_SPEED:
            if not _waiting_at_red(world, route, s_now):
                still_t += cfg.dt
                if still_t >= STUCK_SECONDS:
                    reason = "stuck"
        else:
            still_t = 0.0
            moving_t += cfg.dt
            if moving_t > budget:
                reason = "timeout"
        if reason is None and world.t >= cfg.max_duration:
            reason = "timeout"

    success = reason == "goal"
    return EpisodeResult(
        success=success,
        completion=1.0 if success else min(s_mark / route.length, 1.0),
        penalty=0.5 if collisions > 0 else 1.0,
        collisions=collisions,
        stuck=reason == "stuck",
        distance_m=distance,
        duration_s=world.t,
        reason=reason,
        map_id=cfg.map_id,
        seed=cfg.seed,
    )


# ---------------------------------------------------------------------------
# benchmark aggregation

def driving_score(episodes) -> float:
    """Independent fold: DS = (1/n) sum R_i * P_i."""
    if not episodes:
        return 0.0
    return float(sum(e.completion * e.penalty for e in episodes)
                 / len(episodes))


def success_rate(episodes) -> float:
    """SR in percent."""
    if not episodes:
        return 0.0
    return 100.0 * sum(1 for e in episodes if e.success) / len(episodes)


@dataclass(frozen=True)
class BenchmarkReport:
    sr: float                 # percent, all episodes
    ds: float
    per_map: dict             # map_id -> {"sr": .., "ds": .., "episodes": n}
    episodes: tuple           # EpisodeResults in suite order
    config_digest: str
    seeds: tuple

    def __post_init__(self):
        if self.ds != driving_score(self.episodes):
            raise ValueError("stored DS does not match its episode fold")
        if self.sr != success_rate(self.episodes):
            raise ValueError("stored SR does not match its episode fold")


def _policy_digest(policy, vae) -> str:
    h = hashlib.sha256()
    if isinstance(policy, PolicyParams):
        h.update(repr(sorted(asdict(policy.cfg).items())).encode())
        for name in policy.params.names():
            h.update(name.encode())
            h.update(np.ascontiguousarray(policy.params[name].data).tobytes())
    else:
        h.update(str(policy).encode())
    if vae is not None:
        for name in vae.params.names():
            h.update(np.ascontiguousarray(vae.params[name].data).tobytes())
    return h.hexdigest()


def benchmark(policy, vae, suite, *, graphs=None, expert_cfg=None,
              raster_cfg=None) -> BenchmarkReport:
    """Run a suite of EpisodeConfigs and aggregate SR/DS.

    Stuck episodes are re-seeded once (the recount rule); a second stuck
    outcome stands and counts as the failure it is.
    """
    suite = list(suite)
    if not suite:
        raise ValueError("benchmark needs a non-empty suite")
    graphs = graphs or {}
    results = []
    for cfg in suite:
        graph = graphs.get(cfg.map_id)
        res = run_episode(policy, vae, cfg, graph=graph,
                          expert_cfg=expert_cfg, raster_cfg=raster_cfg)
        if res.stuck:
            retry = EpisodeConfig(cfg.map_id, cfg.start, cfg.goal,
                                  cfg.vehicle_count, cfg.pedestrian_count,
                                  cfg.seed + RESEED_OFFSET, cfg.dt,
                                  cfg.max_duration)
            res = run_episode(policy, vae, retry, graph=graph,
                              expert_cfg=expert_cfg, raster_cfg=raster_cfg)
        results.append(res)

    per_map: dict = {}
    for map_id in sorted({r.map_id for r in results}):
        sub = [r for r in results if r.map_id == map_id]
        per_map[map_id] = {"sr": success_rate(sub), "ds": driving_score(sub),
                           "episodes": len(sub)}
    digest = hashlib.sha256()
    digest.update(_policy_digest(policy, vae).encode())
    for cfg in suite:
        digest.update(repr((cfg.map_id, cfg.start, cfg.goal,
                            cfg.vehicle_count, cfg.pedestrian_count,
                            cfg.seed, cfg.dt, cfg.max_duration)).encode())
    return BenchmarkReport(
        sr=success_rate(results),
        ds=driving_score(results),
        per_map=per_map,
        episodes=tuple(results),
        config_digest=digest.hexdigest(),
        seeds=tuple(cfg.seed for cfg in suite),
    )


def save_report(report: BenchmarkReport, path) -> None:
    payload = {
        "sr": report.sr,
        "ds": report.ds,
        "per_map": report.per_map,
        "config_digest": report.config_digest,
        "seeds": list(report.seeds),
        "episodes": [asdict(e) for e in report.episodes],
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True)
                          + "\n")


def load_report(path) -> BenchmarkReport:
    payload = json.loads(Path(path).read_text())
    episodes = tuple(EpisodeResult(**e) for e in payload["episodes"])
    return BenchmarkReport(
        sr=payload["sr"], ds=payload["ds"], per_map=payload["per_map"],
        episodes=episodes, config_digest=payload["config_digest"],
        seeds=tuple(payload["seeds"]),
    )
