"""Scalar-to-target mapping and the PID control bridge.

Network outputs (kappa_v, kappa_theta) become physical targets
(v_T = v_lim * kappa_v in km/h, theta_T = 90 deg * kappa_theta as an
ego-frame desired course change), and a pair of PID loops turns those
targets into device controls: steering in [-1, 1], throttle and brake
in [0, 1] with at most one of the latter two nonzero per tick.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .policy import THETA_RANGE_DEG, MS_TO_KMH
from .simulate import AgentState


@dataclass(frozen=True)
class Targets:
    v_t: float      # km/h
    theta_t: float  # deg, ego frame, + = left


@dataclass(frozen=True)
class PidGains:
    kp: float
    ki: float
    kd: float


# Longitudinal gains act per km/h of speed error, lateral per radian of
# course error. Tuned once on the straight map (see the step-response
# regression test) and kept fixed.
LON_GAINS = PidGains(kp=0.3, ki=0.02, kd=0.0)
LAT_GAINS = PidGains(kp=0.8, ki=0.0, kd=0.1)
WINDUP_LIMIT = 1.0  # bound on each integral term's contribution


class PidState:
    """Per-episode controller state: integrators and previous errors."""

    def __init__(self, dt: float, lon: PidGains = LON_GAINS,
                 lat: PidGains = LAT_GAINS):
        if dt <= 0:
            raise ValueError(f"dt must be > 0, got {dt}")
        self.dt = dt
        self.lon = lon
        self.lat = lat
        self.clamp_warnings = 0
        self.reset()

    def reset(self) -> None:
        self.i_lon = 0.0
        self.i_lat = 0.0
        self.prev_e_lon: float | None = None
        self.prev_e_lat: float | None = None


def targets_from_scalars(kappa_v: float, kappa_theta: float, v_lim: float,
                         state: PidState | None = None) -> Targets:
    """Map bounded scalars to targets; out-of-range inputs are clamped."""
    kv = min(max(float(kappa_v), 0.0), 1.0)
    kt = min(max(float(kappa_theta), -1.0), 1.0)
    if (kv != kappa_v or kt != kappa_theta) and state is not None:
        state.clamp_warnings += 1
    return Targets(v_t=v_lim * kv, theta_t=THETA_RANGE_DEG * kt)


def _pid_term(e: float, prev_e: float | None, integral: float,
              gains: PidGains, dt: float) -> tuple[float, float]:
    """One PID evaluation; returns (output, updated integral).

    The integral is conditionally updated (no accumulation while the
    output saturates) and its contribution is clamped to WINDUP_LIMIT.
    """
    d = 0.0 if prev_e is None else (e - prev_e) / dt
    i_new = integral + e * dt
    if gains.ki > 0.0:
        bound = WINDUP_LIMIT / gains.ki
        i_new = min(max(i_new, -bound), bound)
    u = gains.kp * e + gains.ki * i_new + gains.kd * d
    if abs(u) > 1.0:
        # saturated: keep the old integral so it cannot wind up
        u = gains.kp * e + gains.ki * integral + gains.kd * d
        return u, integral
    return u, i_new


def pid_control(targets: Targets, ego: AgentState, state: PidState,
                ) -> tuple[float, float, float]:
    """(steer, throttle, brake) driving the ego toward the targets."""
    e_lon = targets.v_t - ego.speed * MS_TO_KMH
    u_lon, state.i_lon = _pid_term(e_lon, state.prev_e_lon, state.i_lon,
                                   state.lon, state.dt)
    state.prev_e_lon = e_lon

    e_lat = float(np.radians(targets.theta_t))
    u_lat, state.i_lat = _pid_term(e_lat, state.prev_e_lat, state.i_lat,
                                   state.lat, state.dt)
    state.prev_e_lat = e_lat

    steer = min(max(u_lat, -1.0), 1.0)
    if u_lon >= 0.0:
        return steer, min(u_lon, 1.0), 0.0
    return steer, 0.0, min(-u_lon, 1.0)


def clip_controls(steer: float, throttle: float, brake: float,
                  ) -> tuple[float, float, float]:
    """Range-validate raw direct-control head outputs."""
    return (min(max(float(steer), -1.0), 1.0),
            min(max(float(throttle), 0.0), 1.0),
            min(max(float(brake), 0.0), 1.0))
