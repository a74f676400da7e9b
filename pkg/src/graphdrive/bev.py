"""Ego-centric 7-channel binary BEV rasterizer and its byte packing.

Channel order: 0 drivable area, 1 solid markings, 2 broken markings,
3 route (blanked while the governing light is red), 4 ego, 5 other
vehicles, 6 pedestrians. The grid covers 25 m ahead, 10 m behind and
10 m to each side of the ego at 0.25 m/pixel; forward is up (row 0 is
the far-ahead edge) and the ego pose sits at row 100, column 40.

All geometry is reduced to ego-relative coordinates before any pixel
test, so two worlds that differ by a rigid motion rasterize to the
same tensor whenever the motion is exact in floating point (dyadic
translations, quadrant rotations). Pixel membership uses pixel-center
sampling with inclusive boundaries.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .routing import Route
from .simulate import WorldState


@dataclass(frozen=True)
class RasterConfig:
    width_m: float = 20.0   # 10 m each side
    height_m: float = 35.0  # front_m ahead, the rest behind
    front_m: float = 25.0
    resolution: float = 0.25
    channels: int = 7

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be > 0")

    @property
    def rows(self) -> int:
        return round(self.height_m / self.resolution)

    @property
    def cols(self) -> int:
        return round(self.width_m / self.resolution)

    @property
    def anchor_row(self) -> int:
        return round(self.front_m / self.resolution)

    @property
    def anchor_col(self) -> int:
        return self.cols // 2


@dataclass(frozen=True)
class LightGate:
    red_for_ego: bool = False


def compute_light_gate(world: WorldState, route: Route) -> LightGate:
    """Gate is red while a red light controls the ego's current lane."""
    ego = world.ego
    s = route.project((ego.x, ego.y))[0]
    light = world.graph.light_for_lane(route.lane_at(s))
    red = light is not None and bool(world.light_red.get(light.id, False))
    return LightGate(red_for_ego=red)


def _unit(yaw: float) -> tuple[float, float]:
    """Heading cosine/sine with near-zero components snapped exactly to 0.

    The snap makes axis-aligned frames pure sign/swap arithmetic, which
    is what keeps quadrant-rotated worlds bit-identical after rasterizing.
    """
    c, s = float(np.cos(yaw)), float(np.sin(yaw))
    if abs(c) < 1e-12:
        c = 0.0
    if abs(s) < 1e-12:
        s = 0.0
    return c, s


def _grid(cfg: RasterConfig) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-center coordinates in the ego frame: (forward, left)."""
    res = cfg.resolution
    fx = (cfg.anchor_row - 0.5 - np.arange(cfg.rows)) * res
    fy = (cfg.anchor_col - 0.5 - np.arange(cfg.cols)) * res
    return fx[:, None], fy[None, :]


def _to_ego(pts: np.ndarray, ex: float, ey: float,
            c: float, s: float) -> np.ndarray:
    dx = pts[:, 0] - ex
    dy = pts[:, 1] - ey
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=1)


def _poly_dist_lat(px: np.ndarray, py: np.ndarray,
                   pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distance and signed lateral offset (left positive) to a polyline.

    px, py are broadcastable pixel grids; pts is (K, 2) in the same frame.
    The lateral sign comes from the nearest segment's direction.
    """
    a = pts[:-1]
    d = np.diff(pts, axis=0)
    l2 = (d ** 2).sum(axis=1)
    px, py = np.broadcast_arrays(px, py)
    rx = px[..., None] - a[:, 0]
    ry = py[..., None] - a[:, 1]
    t = np.clip((rx * d[:, 0] + ry * d[:, 1]) / l2, 0.0, 1.0)
    ox = rx - t * d[:, 0]
    oy = ry - t * d[:, 1]
    d2 = ox ** 2 + oy ** 2
    j = np.argmin(d2, axis=-1)
    take = np.take_along_axis
    dist = np.sqrt(take(d2, j[..., None], axis=-1)[..., 0])
    rxj = take(rx, j[..., None], axis=-1)[..., 0]
    ryj = take(ry, j[..., None], axis=-1)[..., 0]
    cross = d[j, 0] * ryj - d[j, 1] * rxj
    lat = cross / np.sqrt(l2[j])
    return dist, lat


def _in_polygon(px: np.ndarray, py: np.ndarray, poly: np.ndarray) -> np.ndarray:
    inside = np.zeros(np.broadcast(px, py).shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        crosses = (y0 > py) != (y1 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xi = (x1 - x0) * (py - y0) / (y1 - y0) + x0
        inside ^= crosses & (px < xi)
    return inside


def rasterize(world: WorldState, route: Route, gate: LightGate,
              cfg: RasterConfig = RasterConfig()) -> np.ndarray:
    """Render the scene around the ego into a (channels, rows, cols) uint8 grid."""
    ego = world.ego
    c, s = _unit(ego.yaw)
    px, py = _grid(cfg)
    out = np.zeros((cfg.channels, cfg.rows, cfg.cols), dtype=np.uint8)
    drivable = np.zeros((cfg.rows, cfg.cols), dtype=bool)
    solid = np.zeros_like(drivable)
    broken = np.zeros_like(drivable)
    half_px = cfg.resolution / 2.0

    view_r = float(np.hypot(max(cfg.front_m, cfg.height_m - cfg.front_m),
                            cfg.width_m / 2.0)) + cfg.resolution

    for lane in world.graph.lanes.values():
        rel = _to_ego(lane.line.points, ego.x, ego.y, c, s)
        reach = lane.width / 2.0 + half_px
        if (rel[:, 0].min() > cfg.front_m + reach
                or rel[:, 0].max() < cfg.front_m - cfg.height_m - reach
                or rel[:, 1].min() > cfg.width_m / 2.0 + reach
                or rel[:, 1].max() < -cfg.width_m / 2.0 - reach):
            continue
        dist, lat = _poly_dist_lat(px, py, rel)
        drivable |= dist <= lane.width / 2.0
        # 1 px wide, half-open radially so any alignment yields one pixel
        edge = dist - lane.width / 2.0
        band = (edge > -half_px) & (edge <= half_px)
        left = band & (lat > 0)
        right = band & (lat < 0)
        if lane.left_marking == "solid":
            solid |= left
        else:
            broken |= left
        if lane.right_marking == "solid":
            solid |= right
        else:
            broken |= right

    for apron in world.graph.aprons:
        rel = _to_ego(apron, ego.x, ego.y, c, s)
        drivable |= _in_polygon(px, py, rel)

    out[0] = drivable
    out[1] = solid
    out[2] = broken

    if not gate.red_for_ego:
        wp = route.waypoints
        d_ego = np.hypot(wp[:, 0] - ego.x, wp[:, 1] - ego.y)
        near = np.nonzero(d_ego <= view_r + 1.0)[0]
        if near.size:
            lo = max(int(near[0]) - 1, 0)
            hi = min(int(near[-1]) + 2, len(wp))
            if hi - lo >= 2:
                rel = _to_ego(wp[lo:hi], ego.x, ego.y, c, s)
                dist, lat = _poly_dist_lat(px, py, rel)
                hw = 3.0 * half_px  # 3 px wide, half-open on the right edge
                out[3] = (dist <= hw) & (lat > -hw) & (lat <= hw)

    out[4] = ((np.abs(px) <= ego.l / 2.0) & (np.abs(py) <= ego.w / 2.0))

    for agent in world.agents[1:]:
        dx, dy = agent.x - ego.x, agent.y - ego.y
        if np.hypot(dx, dy) > view_r + float(np.hypot(agent.l, agent.w)) / 2.0:
            continue
        cx = c * dx + s * dy
        cy = -s * dx + c * dy
        ca, sa = _unit(agent.yaw - ego.yaw)
        lx = ca * (px - cx) + sa * (py - cy)
        ly = -sa * (px - cx) + ca * (py - cy)
        mask = (np.abs(lx) <= agent.l / 2.0) & (np.abs(ly) <= agent.w / 2.0)
        out[6 if agent.kind == "pedestrian" else 5] |= mask

    return out


BEV_MAGIC = b"GDBV"
BEV_VERSION = 1
_HEADER = struct.Struct("<4sBBHH6x")  # magic, version, channels, rows, cols


def pack_bev(bev: np.ndarray) -> bytes:
    """Bit-pack a binary BEV tensor behind a fixed 16-byte header."""
    ch, rows, cols = bev.shape
    header = _HEADER.pack(BEV_MAGIC, BEV_VERSION, ch, rows, cols)
    return header + np.packbits(bev.reshape(-1).astype(np.uint8)).tobytes()


def unpack_bev(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise ValueError(f"bev buffer: expected at least {_HEADER.size} header "
                         f"bytes, got {len(buf)}")
    magic, version, ch, rows, cols = _HEADER.unpack_from(buf)
    if magic != BEV_MAGIC:
        raise ValueError(f"bev buffer: bad magic {magic!r}")
    if version != BEV_VERSION:
        raise ValueError(f"bev buffer: unsupported version {version}")
    nbits = ch * rows * cols
    expected = _HEADER.size + (nbits + 7) // 8
    if len(buf) != expected:
        raise ValueError(f"bev buffer: expected {expected} bytes, got {len(buf)}")
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8,
                                       offset=_HEADER.size), count=nbits)
    return bits.reshape(ch, rows, cols)


def channel_pgm(bev: np.ndarray, channel: int) -> bytes:
    """One channel as a binary PGM image (foreground white)."""
    grid = bev[channel]
    header = f"P5\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode()
    return header + (grid * 255).astype(np.uint8).tobytes()
