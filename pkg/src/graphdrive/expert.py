"""Rule-based oracle driver producing imitation labels.

The expert emits the same mid-level targets the policy regresses:
a target speed v_T* (km/h) and an ego-frame course change theta_T*
(deg). The course follows vector-field guidance toward the route,
laterally shifted when bypassing a stopped vehicle through a broken
marking. The speed is the tightest of: the posted limit, a curvature
envelope sqrt(a_lat_max / |kappa|), a time-headway envelope behind the
closest blocking agent, a braking envelope into red stop lines, and a
hard zero when a linear-prediction time-to-collision falls under the
threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .control import LAT_GAINS
from .guidance import desired_course, lane_flags
from .policy import MS_TO_KMH
from .routing import Route, wrap_angle
from .simulate import MAX_STEER_DEG, WorldState


@dataclass(frozen=True)
class ExpertConfig:
    headway: float = 1.5          # s, time gap behind a leader
    min_gap: float = 3.0          # m, standstill gap
    a_lat_max: float = 3.0        # m/s^2, lateral accel cap in curves
    stop_margin: float = 2.0      # m, front bumper to red stop line
    bypass_offset: float = 2.5    # m, lateral shift around blockages
    ttc_threshold: float = 3.0    # s, hard-stop horizon
    ramp_len: float = 16.0        # m, bypass offset ramp length
    lookahead: float = 30.0       # m, hazard scan distance
    corridor_extra: float = 0.25  # m, lateral slack in the blocking test
    brake_comfort: float = 1.5    # m/s^2, stop-line approach envelope

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value <= 0:
                raise ValueError(f"{name} must be > 0, got {value}")


@dataclass(frozen=True)
class _Bypass:
    sign: float     # +1 shift left, -1 shift right
    s_up: float     # route arc where the ramp starts
    s_hold0: float  # full offset from here ...
    s_hold1: float  # ... to here
    s_down: float   # offset back to zero past this point


def _offset_at(bp: _Bypass | None, s: float, amount: float) -> float:
    if bp is None:
        return 0.0
    if s <= bp.s_up or s >= bp.s_down:
        return 0.0
    if s < bp.s_hold0:
        frac = (s - bp.s_up) / (bp.s_hold0 - bp.s_up)
    elif s <= bp.s_hold1:
        frac = 1.0
    else:
        frac = (bp.s_down - s) / (bp.s_down - bp.s_hold1)
    return bp.sign * amount * frac


def _route_frame(route: Route, agent
                 ) -> tuple[float, float, float, float, float, float] | None:
    """(s, lat, v_along, v_lat, ext_l, ext_w) of an agent in route frame.

    ext_l / ext_w are the half-extents of the agent's footprint projected
    onto the route tangent / normal at its arc position, so a vehicle
    standing diagonally across the lane is as wide as its corners reach,
    not as wide as its body. None for agents whose projection clamps past
    a route endpoint (their distance exceeds the lateral component): a
    vehicle beyond the goal would otherwise masquerade as a leader parked
    on the final waypoint.
    """
    s, lat, d = route.project((agent.x, agent.y))
    if d - abs(lat) > 0.5:
        return None
    chi = route.line.heading_at(s)
    c, si = np.cos(chi), np.sin(chi)
    v_along = agent.vx * c + agent.vy * si
    v_lat = -agent.vx * si + agent.vy * c
    rel = wrap_angle(agent.yaw - chi)
    cr, sr = abs(np.cos(rel)), abs(np.sin(rel))
    ext_l = cr * agent.l / 2.0 + sr * agent.w / 2.0
    ext_w = sr * agent.l / 2.0 + cr * agent.w / 2.0
    return float(s), float(lat), float(v_along), float(v_lat), \
        float(ext_l), float(ext_w)


def _curve_speed_cap(route: Route, s: float, v_now: float,
                     cfg: ExpertConfig, step: float = 2.0) -> float:
    """Speed admissible now given curvature ahead.

    Each sampled point allows sqrt(a_lat_max / kappa); braking room back
    to the ego at brake_comfort relaxes that with distance, so the cap
    tightens early enough to arrive at curves already slowed.
    """
    window = max(18.0, v_now * v_now / (2.0 * cfg.brake_comfort) + 10.0)
    end = min(s + window, route.length)
    cap = np.inf
    a = s
    while a + step <= end + 1e-9:
        dpsi = abs(wrap_angle(route.line.heading_at(a + step)
                              - route.line.heading_at(a)))
        kappa = dpsi / step
        if kappa > 1e-6:
            v_pt = np.sqrt(cfg.a_lat_max / kappa)
            dist = max(a - s, 0.0)
            cap = min(cap, np.sqrt(v_pt * v_pt
                                   + 2.0 * cfg.brake_comfort * dist))
        a += step
    return float(cap)


def _red_light_ahead(world: WorldState, route: Route, s: float,
                     within: float) -> float | None:
    """Route arc of the next red stop line within range, else None."""
    ev = route.next_light(s)
    if ev is None or ev.route_s > s + within:
        return None
    if world.light_red.get(ev.light.id, False):
        return ev.route_s
    return None


def _oncoming_conflict(world: WorldState, route: Route, cfg: ExpertConfig,
                       s_ego: float, bp: _Bypass) -> bool:
    """True when the bypass corridor is held by opposing or standing traffic.

    For approaching vehicles the window stretches over the remaining
    maneuver plus the distance they cover meanwhile, so a pass is only
    started when it can finish before the two meet.  A vehicle standing
    in the corridor blocks outright.
    """
    ego = world.ego
    for agent in world.agents[1:]:
        if agent.kind == "pedestrian":
            continue
        frame = _route_frame(route, agent)
        if frame is None:
            continue
        s_a, lat_a, v_along, _, _, ext_w = frame
        if lat_a * bp.sign < 1.0:
            continue  # own-lane traffic, not a corridor occupant
        if abs(lat_a - bp.sign * cfg.bypass_offset) \
                > ego.w / 2.0 + ext_w + 0.5:
            continue
        if v_along < -0.5:
            window = (bp.s_down - s_ego) + 3.0 * abs(v_along) + 15.0
        elif agent.speed < 0.2:
            window = (bp.s_down - s_ego) + 5.0
        else:
            continue  # moving along with us: the follow envelope handles it
        if s_ego < s_a < s_ego + window:
            return True
    return False


def _find_bypass(world: WorldState, route: Route, cfg: ExpertConfig,
                 s_ego: float, e_cte: float) -> _Bypass | None:
    """Offset plan around stopped vehicles blocking the lane ahead.

    Requires a crossable (broken) marking on the chosen side and no red
    light governing the stretch (queues at lights are not bypassed).
    Closely spaced blockers are swept in one maneuver, and oncoming
    traffic in the target corridor delays it unless the ego is already
    laterally committed.
    """
    ego = world.ego
    if _red_light_ahead(world, route, s_ego, cfg.lookahead) is not None:
        return None
    # markings of the lane being bypassed, read at the route centerline
    # (mid-maneuver the ego itself sits outside that lane)
    f_l, f_r = lane_flags(route.line.point_at(s_ego), world.graph)
    if not f_l and not f_r:
        return None
    sign = 1.0 if f_l else -1.0
    spans = []
    for agent in world.agents[1:]:
        if agent.kind == "pedestrian" or agent.speed > 0.2:
            continue
        frame = _route_frame(route, agent)
        if frame is None:
            continue
        s_a, lat_a, _, _, ext_l, ext_w = frame
        if not (-cfg.lookahead < s_a - s_ego <= cfg.lookahead):
            continue
        half_w = ego.w / 2.0 + ext_w + cfg.corridor_extra
        if abs(lat_a) > half_w:
            continue
        spans.append((s_a - ext_l - cfg.min_gap,
                      s_a + ext_l + cfg.min_gap))
    if not spans:
        return None
    # Merge queued blockers into a single sweep: there is no point in
    # rejoining the lane between two cars unless both ramps plus a short
    # straight actually fit in the gap.
    spans.sort()
    merged = None
    for h0, h1 in spans:
        if h1 + 2.0 * cfg.ramp_len <= s_ego:
            continue  # fully passed, settle tail included
        if merged is None:
            merged = [h0, h1]
        elif h0 - merged[1] < 2.0 * cfg.ramp_len + 4.0:
            merged[1] = max(merged[1], h1)
        else:
            break  # a separate group further on, planned on arrival
    if merged is None:
        return None
    bp = _Bypass(sign, merged[0] - cfg.ramp_len, merged[0], merged[1],
                 merged[1] + cfg.ramp_len)
    # Hysteresis: alongside the blockers, or measurably offset onto the
    # ramp, the maneuver is kept; dropping the plan mid-weave would also
    # drop its speed cap and snap the course target.
    committed = s_ego >= bp.s_hold0 or (
        s_ego >= bp.s_up and e_cte * bp.sign > 0.5)
    if not committed and _oncoming_conflict(world, route, cfg, s_ego, bp):
        return None
    return bp


def _bypass_speed_cap(bp: _Bypass | None, s_ego: float, route: Route,
                      cfg: ExpertConfig) -> float:
    """Speed admissible for the lateral weave of an active bypass.

    The weave itself bends the path at about 2*offset/ramp^2; on a curvy
    stretch the road's own curvature stacks on top.  The cap holds
    through a settle tail one ramp past the rejoin point, where tracking
    overshoot from the weave has died down.
    """
    if bp is None or s_ego >= bp.s_down + cfg.ramp_len:
        return np.inf
    k_weave = 2.0 * cfg.bypass_offset / (cfg.ramp_len * cfg.ramp_len)
    k_road = 0.0
    step = 2.0
    a = max(s_ego, bp.s_up)
    end = min(bp.s_down + cfg.ramp_len, route.length)
    while a + step <= end + 1e-9:
        dpsi = abs(wrap_angle(route.line.heading_at(a + step)
                              - route.line.heading_at(a)))
        k_road = max(k_road, dpsi / step)
        a += step
    v_byp = np.sqrt(cfg.a_lat_max / (k_weave + k_road))
    if s_ego >= bp.s_up:
        return float(v_byp)
    return float(np.sqrt(v_byp * v_byp
                         + 2.0 * cfg.brake_comfort * (bp.s_up - s_ego)))


def expert_action(world: WorldState, route: Route,
                  cfg: ExpertConfig = ExpertConfig(),
                  ) -> tuple[float, float]:
    """Imitation labels (v_T* in km/h, theta_T* in deg) for this tick."""
    ego = world.ego
    s_ego, e_cte, _ = route.project((ego.x, ego.y))
    v_ego = ego.speed
    v_lim_ms = route.v_lim_at(s_ego) / MS_TO_KMH

    bp = _find_bypass(world, route, cfg, s_ego, e_cte)

    # course: track the route shifted by the bypass offset profile
    chi_path = route.line.heading_at(s_ego)
    offset = _offset_at(bp, s_ego, cfg.bypass_offset)
    chi_d = desired_course(chi_path, e_cte - offset)
    theta = np.degrees(wrap_angle(chi_d - ego.yaw))
    # Curvature feedforward: a proportional steering loop holds a circle
    # only with a standing course error, so the label carries the
    # equivalent bias for the bend under the ego. Without it the
    # controller understeers tight connectors and drifts outward.
    h = max(4.0, 0.5 * v_ego)
    s_fwd = min(s_ego + h, route.length)
    if s_fwd - s_ego > 0.5:
        kappa = wrap_angle(route.line.heading_at(s_fwd)
                           - chi_path) / (s_fwd - s_ego)
        delta_ff = np.arctan(0.6 * ego.l * kappa)
        theta += np.degrees(
            delta_ff / (LAT_GAINS.kp * np.radians(MAX_STEER_DEG)))

    # speed envelopes
    v_star = min(v_lim_ms, _curve_speed_cap(route, s_ego, v_ego, cfg),
                 _bypass_speed_cap(bp, s_ego, route, cfg))

    # Pull-out discipline: the collision checks below measure clearance
    # against the planned offset, so they are blind while tracking still
    # lags it (a pull-out begun from standstill near the blocker). Crawl
    # until the offset has actually developed; at crawl speed full-lock
    # steering builds lateral far faster than the ramp assumes.
    if bp is not None and s_ego < bp.s_down and abs(e_cte - offset) > 0.6:
        v_star = min(v_star, 1.5)

    ttc_stop = False
    horizon = np.arange(0.25, 2.0 * cfg.ttc_threshold + 1e-9, 0.25)
    for agent in world.agents[1:]:
        frame = _route_frame(route, agent)
        if frame is None:
            continue
        s_a, lat_a, v_along, v_lat, ext_l, ext_w = frame
        gap_c = s_a - s_ego
        if not (-2.0 <= gap_c <= cfg.lookahead):
            continue
        half_w = ego.w / 2.0 + ext_w + cfg.corridor_extra
        half_l = ego.l / 2.0 + ext_l
        lat_ref = _offset_at(bp, s_a, cfg.bypass_offset)
        if gap_c > 0.0 and abs(lat_a - lat_ref) <= half_w:
            # in-corridor leader: keep a time headway behind it
            v_follow = max(0.0, v_along) \
                + (gap_c - half_l - cfg.min_gap) / cfg.headway
            v_star = min(v_star, max(0.0, v_follow))
        # Linear-prediction collision check.  Inside the hard horizon the
        # target speed drops to zero outright; over the doubled scan range
        # a braking envelope toward the predicted conflict arc makes the
        # resulting standstill land short of the crossing zone instead of
        # nose-first inside it.
        for t in horizon:
            gap_t = gap_c + (v_along - v_ego) * t
            lat_t = lat_a + v_lat * t
            ref_t = _offset_at(bp, s_ego + v_ego * t, cfg.bypass_offset)
            if abs(gap_t) < half_l + 0.5 and abs(lat_t - ref_t) < half_w:
                if t <= cfg.ttc_threshold + 1e-9:
                    ttc_stop = True
                d = (s_a + v_along * t) - s_ego - half_l - 0.5
                if d > 0.0:
                    v_star = min(v_star, float(
                        np.sqrt(2.0 * cfg.brake_comfort * d)))
                break
        if ttc_stop:
            break

    s_red = _red_light_ahead(world, route, s_ego, cfg.lookahead)
    if s_red is not None:
        d = s_red - s_ego - ego.l / 2.0 - cfg.stop_margin
        if d <= 0.0:
            v_star = 0.0
        else:
            v_star = min(v_star, float(np.sqrt(2.0 * cfg.brake_comfort * d)))

    if ttc_stop:
        v_star = 0.0

    v_kmh = float(np.clip(v_star * MS_TO_KMH, 0.0,
                          route.v_lim_at(s_ego)))
    return v_kmh, float(np.clip(theta, -90.0, 90.0))
