#!/usr/bin/env python3
"""Regenerate the shipped .map files from parametric descriptions.

Writes into src/graphdrive/maps/. The text format is documented in
graphdrive.worldmap. Running this twice produces byte-identical files.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

LANE_W = 3.5
HALF = 1.75


def fmt_pts(pts) -> str:
    return "; ".join(f"{x:.4f} {y:.4f}" for x, y in pts)


def lane(out, lid, width, speed, left, right, succ, pts):
    out.append("[lane]")
    out.append(f"id = {lid}")
    out.append(f"width = {width}")
    out.append(f"speed_limit = {speed}")
    out.append(f"left_marking = {left}")
    out.append(f"right_marking = {right}")
    out.append(f"successors = {', '.join(succ)}")
    out.append(f"centerline = {fmt_pts(pts)}")
    out.append("")


def light(out, lid, x, y, yaw, lanes, green, red, offset):
    out.append("[light]")
    out.append(f"id = {lid}")
    out.append(f"x = {x:.4f}")
    out.append(f"y = {y:.4f}")
    out.append(f"yaw = {yaw:.6f}")
    out.append(f"lanes = {', '.join(lanes)}")
    out.append(f"green = {green}")
    out.append(f"red = {red}")
    out.append(f"offset = {offset}")
    out.append("")


def ped_path(out, pid, lo, hi, pts):
    out.append("[pedestrian_path]")
    out.append(f"id = {pid}")
    out.append(f"speed_min = {lo}")
    out.append(f"speed_max = {hi}")
    out.append(f"points = {fmt_pts(pts)}")
    out.append("")


def header(out, map_id, name):
    out.append("[meta]")
    out.append(f"id = {map_id}")
    out.append(f"name = {name}")
    out.append("")


def straight(p0, p1, step=5.0):
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    n = max(int(np.ceil(np.hypot(*(p1 - p0)) / step)), 1)
    return [tuple(p0 + (p1 - p0) * k / n) for k in range(n + 1)]


def arc(center, radius, a0_deg, a1_deg, step=1.5):
    span = np.deg2rad(a1_deg - a0_deg)
    n = max(int(np.ceil(abs(span) * radius / step)), 2)
    ang = np.deg2rad(a0_deg) + span * np.arange(n + 1) / n
    return [(center[0] + radius * np.cos(a), center[1] + radius * np.sin(a))
            for a in ang]


def bezier(p0, p1, p2, n=10):
    t = np.linspace(0.0, 1.0, n + 1)[:, None]
    p0, p1, p2 = (np.asarray(p, dtype=float) for p in (p0, p1, p2))
    pts = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2
    return [tuple(p) for p in pts]


def build_highway() -> str:
    out = []
    header(out, "highway", "Straight two-lane one-way road")
    lane(out, "h0", LANE_W, 50, "broken", "solid", [],
         straight((0, 0), (300, 0)))
    lane(out, "h1", LANE_W, 50, "solid", "broken", [],
         straight((0, LANE_W), (300, LANE_W)))
    return "\n".join(out)


def build_urban() -> str:
    """Signalized 4-way intersection; arms reach 100 m out."""
    out = []
    header(out, "urban", "Signalized four-way intersection")
    speed = 40
    j = 10.0   # junction half extent
    arm = 100.0

    def rot(pts, k):
        # rotate points by k*90 degrees around the origin
        c, s = [(1, 0), (0, 1), (-1, 0), (0, -1)][k % 4]
        return [(x * c - y * s, x * s + y * c) for x, y in pts]

    arms = ["w", "s", "e", "n"]  # arm k sits at angle k*90 from west
    for k, a in enumerate(arms):
        inn = rot(straight((-arm, -HALF), (-j, -HALF)), k)
        outt = rot(straight((-j, HALF), (-arm, HALF)), k)
        conns = {
            "s": rot(straight((-j, -HALF), (j, -HALF), step=2.0), k),   # straight
            "l": rot(arc((-j, j), j + HALF, -90, 0), k),                # left turn
            "r": rot(arc((-j, -j), j - HALF, 90, 0), k),                # right turn
        }
        lane(out, f"{a}_in", LANE_W, speed, "solid", "solid",
             [f"{a}_s", f"{a}_l", f"{a}_r"], inn)
        lane(out, f"{a}_out", LANE_W, speed, "solid", "solid", [], outt)
        # connector targets: straight -> opposite arm, left/right -> side arms
        opp = arms[(k + 2) % 4]
        left_to = arms[(k + 3) % 4]
        right_to = arms[(k + 1) % 4]
        lane(out, f"{a}_s", LANE_W, speed, "none", "none", [f"{opp}_out"], conns["s"])
        lane(out, f"{a}_l", LANE_W, speed, "none", "none", [f"{left_to}_out"], conns["l"])
        lane(out, f"{a}_r", LANE_W, speed, "none", "none", [f"{right_to}_out"], conns["r"])
        stop = rot([(-j, -HALF)], k)[0]
        yaw = np.deg2rad(90.0 * k)
        offset = 0.0 if k % 2 == 0 else 11.0  # EW green first, NS after
        light(out, f"lt_{a}", stop[0], stop[1], yaw, [f"{a}_in"], 9.0, 13.0, offset)

    ped_path(out, "px_w", 0.8, 1.4, [(-14.0, -6.0), (-14.0, 6.0)])
    ped_path(out, "px_s", 0.8, 1.4, [(-6.0, -14.0), (6.0, -14.0)])
    out.append("[apron]")
    out.append(f"points = {fmt_pts([(-j, -j), (j, -j), (j, j), (-j, j)])}")
    out.append("")
    return "\n".join(out)


def build_rural() -> str:
    """Two-lane S-curve with a parked vehicle pinching the eastbound lane."""
    out = []
    header(out, "rural", "Winding two-lane rural road with a blocked stretch")
    speed = 40
    xs = np.arange(0.0, 240.0 + 1e-9, 2.0)
    amp, period = 10.0, 100.0
    axis = np.stack([xs, amp * np.sin(2 * np.pi * xs / period)], axis=1)
    d = np.gradient(axis, axis=0)
    normal = np.stack([-d[:, 1], d[:, 0]], axis=1)
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    east = axis - HALF * normal
    west = axis + HALF * normal
    lane(out, "r_e", LANE_W, speed, "broken", "solid", [],
         [tuple(p) for p in east])
    lane(out, "r_w", LANE_W, speed, "broken", "solid", [],
         [tuple(p) for p in west[::-1]])

    # parked vehicle on the eastbound lane near x = 150 (straight-ish stretch)
    i = int(np.argmin(np.abs(xs - 150.0)))
    heading = np.arctan2(d[i, 1], d[i, 0])
    pos = east[i] - 0.8 * normal[i]
    out.append("[parked_vehicle]")
    out.append(f"x = {pos[0]:.4f}")
    out.append(f"y = {pos[1]:.4f}")
    out.append(f"yaw = {heading:.6f}")
    out.append("w = 2.0")
    out.append("l = 4.5")
    out.append("")

    i = int(np.argmin(np.abs(xs - 60.0)))
    c = axis[i]
    n = normal[i]
    ped_path(out, "pc_0", 0.8, 1.4,
             [tuple(c - 5.5 * n), tuple(c + 5.5 * n)])
    return "\n".join(out)


def build_roundabout() -> str:
    """Four-arm roundabout, ring radius 12, counterclockwise circulation."""
    out = []
    header(out, "roundabout", "Four-exit roundabout")
    arm_speed, ring_speed = 40, 30
    R = 12.0
    reach = 60.0
    join = 16.0
    conn_w = 4.5  # flared junction mouths

    # Ring is split at entry/exit merge points: for arm k at angle phi=90k,
    # traffic exits at phi-40 and enters at phi+40 (counterclockwise flow).
    bounds = []
    for k in range(4):
        phi = 90.0 * k
        bounds.append(("x", k, phi - 40.0))  # exit toward arm k
        bounds.append(("n", k, phi + 40.0))  # entry from arm k
    bounds.sort(key=lambda b: b[2] % 360.0)
    ring_ids = []
    for i, (_, _, a0) in enumerate(bounds):
        a0 %= 360.0
        a1 = bounds[(i + 1) % len(bounds)][2] % 360.0
        if a1 <= a0:
            a1 += 360.0
        ring_ids.append((f"ring_{i}", a0, a1))

    def ring_point(a_deg):
        a = np.deg2rad(a_deg)
        return (R * np.cos(a), R * np.sin(a))

    def ring_tangent(a_deg):
        return np.deg2rad(a_deg + 90.0)

    def rot_k(pts, k):
        c, s = [(1, 0), (0, 1), (-1, 0), (0, -1)][k % 4]
        return [(x * c - y * s, x * s + y * c) for x, y in pts]

    arms = ["e", "n", "w", "s"]
    conn = {}
    for k, a in enumerate(arms):
        inn = rot_k(straight((reach, HALF), (join, HALF)), k)
        outt = rot_k(straight((join, -HALF), (reach, -HALF)), k)
        lane(out, f"{a}_in", LANE_W, arm_speed, "solid", "solid",
             [f"{a}_enter"], inn)
        lane(out, f"{a}_out", LANE_W, arm_speed, "solid", "solid", [], outt)
        # entry connector: arm end -> ring point at phi+40
        enter_a = 90.0 * k + 40.0
        p2 = ring_point(enter_a)
        t2 = ring_tangent(enter_a)
        p0 = inn[-1]
        conn[f"{a}_enter"] = (p0, p2, np.deg2rad(180.0 + 90.0 * k), t2)
        exit_a = 90.0 * k - 40.0
        p0x = ring_point(exit_a)
        t0x = ring_tangent(exit_a)
        p2x = outt[0]
        conn[f"{a}_exit"] = (p0x, p2x, t0x, np.deg2rad(90.0 * k))

    def control_point(p0, t0, p2, t2):
        # intersection of the two tangent lines
        d0 = np.array([np.cos(t0), np.sin(t0)])
        d2 = np.array([np.cos(t2), np.sin(t2)])
        A = np.array([d0, -d2]).T
        b = np.asarray(p2, dtype=float) - np.asarray(p0, dtype=float)
        st = np.linalg.solve(A, b)
        return tuple(np.asarray(p0, dtype=float) + st[0] * d0)

    for k, a in enumerate(arms):
        p0, p2, t0, t2 = conn[f"{a}_enter"]
        # entry joins the ring arc that starts at phi+40
        target = next(rid for rid, a0, _ in ring_ids
                      if abs((a0 - (90.0 * k + 40.0)) % 360.0) < 1e-6)
        lane(out, f"{a}_enter", conn_w, ring_speed, "none", "none", [target],
             bezier(p0, control_point(p0, t0, p2, t2), p2))
        p0, p2, t0, t2 = conn[f"{a}_exit"]
        lane(out, f"{a}_exit", conn_w, ring_speed, "none", "none", [f"{a}_out"],
             bezier(p0, control_point(p0, t0, p2, t2), p2))

    for i, (rid, a0, a1) in enumerate(ring_ids):
        succ = [f"ring_{(i + 1) % len(ring_ids)}"]
        # an arc ending at an exit point also feeds that exit connector
        end_tag = bounds[(i + 1) % len(bounds)]
        if end_tag[0] == "x":
            succ.append(f"{arms[end_tag[1]]}_exit")
        lane(out, rid, LANE_W, ring_speed, "none", "none", succ,
             arc((0.0, 0.0), R, a0, a1))

    # mountable truck apron over the central island: covers corner
    # encroachment at the tight entry mouths
    r_vertex = (R - HALF + 0.35) / np.cos(np.pi / 16)
    ang = np.deg2rad(np.arange(16) * 22.5)
    out.append("[apron]")
    out.append(f"points = {fmt_pts([(r_vertex * np.cos(a), r_vertex * np.sin(a)) for a in ang])}")
    out.append("")
    return "\n".join(out)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    default_dir = Path(__file__).resolve().parent.parent / "src" / "graphdrive" / "maps"
    ap.add_argument("--out-dir", type=Path, default=default_dir)
    args = ap.parse_args()
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for name, build in [("highway", build_highway), ("urban", build_urban),
                        ("rural", build_rural), ("roundabout", build_roundabout)]:
        path = args.out_dir / f"{name}.map"
        path.write_text(build() + "\n")
        print(f"wrote {path}")


if __name__ == "__main__":
    main()
