"""Vector-field path guidance errors and lane-marking crossability flags."""

from __future__ import annotations

import numpy as np

from .routing import Route, wrap_angle
from .worldmap import MapGraph

CHI_INF = np.pi / 2    # maximum course correction, rad
CTE_GAIN = 0.5         # 1/m


def desired_course(chi_path: float, e_cte: float) -> float:
    """Vector-field course: steer toward the path proportionally to offset."""
    return chi_path - CHI_INF * (2.0 / np.pi) * np.arctan(CTE_GAIN * e_cte)


def guidance_errors(pose: tuple[float, float, float], route: Route,
                    v_lim: float, speed: float) -> tuple[float, float, float]:
    """Tracking errors for a pose against a route.

    pose: (x, y, yaw); v_lim and speed in m/s. Returns (e_cte, e_heading,
    e_v) with e_cte signed left-positive, e_heading in (-pi, pi], e_v in m/s.
    """
    if route is None or len(route.waypoints) < 2:
        raise ValueError("guidance needs a route with at least 2 waypoints")
    x, y, yaw = pose
    s, e_cte, _ = route.project((x, y))
    chi_path = route.line.heading_at(s)
    e_heading = wrap_angle(yaw - desired_course(chi_path, e_cte))
    return float(e_cte), float(e_heading), float(v_lim - speed)


def lane_flags(pose, graph: MapGraph) -> tuple[int, int]:
    """(F_l, F_r): 1 when the adjacent marking is crossable (broken)."""
    lane = graph.find_lane((pose[0], pose[1]))
    if lane is None:
        return 0, 0
    return (1 if lane.left_marking == "broken" else 0,
            1 if lane.right_marking == "broken" else 0)
