"""Lane-graph map model: structured text format, validation, geometry queries.

A map file is a sequence of sections. Each section starts with a
bracketed header and holds key = value lines; points are written as
"x y; x y; ..." pairs in meters.

    [meta]        id, name
    [lane]        id, width, speed_limit (km/h), left_marking, right_marking,
                  successors (comma list, may be empty), centerline (points)
    [light]       id, x, y, yaw, lanes, green, red, offset
    [pedestrian_path]  id, speed_min, speed_max, points
    [parked_vehicle]   x, y, yaw, w, l
    [apron]       points (extra drivable polygon, e.g. junction interiors)

The loader validates every invariant and reports the offending line number.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MARKING_KINDS = ("solid", "broken", "none")


class MapError(ValueError):
    """Raised for malformed or invariant-violating map files."""


class Polyline:
    """Arc-length indexed 2D polyline with projection queries."""

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError(f"polyline needs (P>=2, 2) points, got {pts.shape}")
        self.points = pts
        self.seg_vec = pts[1:] - pts[:-1]
        self.seg_len = np.hypot(self.seg_vec[:, 0], self.seg_vec[:, 1])
        if np.any(self.seg_len == 0.0):
            raise ValueError("polyline has a zero-length segment")
        self.cum = np.concatenate(([0.0], np.cumsum(self.seg_len)))
        self.headings = np.arctan2(self.seg_vec[:, 1], self.seg_vec[:, 0])

    @property
    def length(self) -> float:
        return float(self.cum[-1])

    def _locate(self, s: float) -> tuple[int, float]:
        s = min(max(s, 0.0), self.length)
        i = int(np.searchsorted(self.cum, s, side="right")) - 1
        i = min(max(i, 0), len(self.seg_len) - 1)
        return i, (s - self.cum[i]) / self.seg_len[i]

    def point_at(self, s: float) -> np.ndarray:
        i, t = self._locate(s)
        return self.points[i] + t * self.seg_vec[i]

    def heading_at(self, s: float) -> float:
        i, _ = self._locate(s)
        return float(self.headings[i])

    def project(self, p) -> tuple[float, float, float]:
        """Project a point; returns (arc s, signed lateral, distance).

        Lateral is positive on the left of the travel direction. Distance is
        to the nearest point of the polyline (endpoints clamp, so the
        footprint acts as a capsule).
        """
        p = np.asarray(p, dtype=np.float64)
        rel = p[None, :] - self.points[:-1]
        t = np.clip((rel * self.seg_vec).sum(axis=1) / (self.seg_len ** 2), 0.0, 1.0)
        proj = self.points[:-1] + t[:, None] * self.seg_vec
        d = np.hypot(p[0] - proj[:, 0], p[1] - proj[:, 1])
        i = int(np.argmin(d))
        tangent = self.seg_vec[i] / self.seg_len[i]
        off = p - proj[i]
        lateral = float(tangent[0] * off[1] - tangent[1] * off[0])
        s = float(self.cum[i] + t[i] * self.seg_len[i])
        return s, lateral, float(d[i])

    def resample(self, spacing: float) -> np.ndarray:
        """Evenly spaced points (first and last exact) at <= spacing."""
        n = max(int(np.ceil(self.length / spacing)), 1)
        ss = np.linspace(0.0, self.length, n + 1)
        return np.array([self.point_at(s) for s in ss])


@dataclass
class Lane:
    id: str
    width: float
    speed_limit: float  # km/h
    left_marking: str
    right_marking: str
    successors: list[str]
    line: Polyline

    @property
    def length(self) -> float:
        return self.line.length


@dataclass
class TrafficLight:
    id: str
    x: float
    y: float
    yaw: float
    lanes: list[str]
    green: float
    red: float
    offset: float

    def is_red(self, t: float) -> bool:
        period = self.green + self.red
        return ((t + self.offset) % period) >= self.green


@dataclass
class PedestrianPath:
    id: str
    speed_min: float
    speed_max: float
    line: Polyline


@dataclass
class ParkedVehicle:
    x: float
    y: float
    yaw: float
    w: float
    l: float


@dataclass
class MapGraph:
    id: str
    name: str
    lanes: dict[str, Lane]
    lights: list[TrafficLight]
    ped_paths: list[PedestrianPath]
    parked: list[ParkedVehicle]
    aprons: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self._seg_cache = None
        self._stop_s: dict[tuple[str, str], float] = {}
        for light in self.lights:
            for lane_id in light.lanes:
                s, _, _ = self.lanes[lane_id].line.project((light.x, light.y))
                self._stop_s[(light.id, lane_id)] = s

    def stop_line_s(self, light_id: str, lane_id: str) -> float:
        """Arc position of a light's stop line along a controlled lane."""
        return self._stop_s[(light_id, lane_id)]

    def light_for_lane(self, lane_id: str) -> TrafficLight | None:
        for light in self.lights:
            if lane_id in light.lanes:
                return light
        return None

    def _segments(self):
        """Concatenated per-segment arrays across all lanes for fast queries."""
        if self._seg_cache is None:
            a, v, ln, hw = [], [], [], []
            for lane in self.lanes.values():
                a.append(lane.line.points[:-1])
                v.append(lane.line.seg_vec)
                ln.append(lane.line.seg_len)
                hw.append(np.full(len(lane.line.seg_len), lane.width / 2.0))
            self._seg_cache = (np.concatenate(a), np.concatenate(v),
                               np.concatenate(ln), np.concatenate(hw))
        return self._seg_cache

    def offroad_excess(self, p) -> float:
        """Distance by which a point lies outside the drivable area.

        <= 0 means on-road. Lanes count as capsules around their centerline;
        aprons are extra drivable polygons.
        """
        p = np.asarray(p, dtype=np.float64)
        for poly in self.aprons:
            if _point_in_polygon(p, poly):
                return -1.0
        a, v, ln, hw = self._segments()
        rel = p[None, :] - a
        t = np.clip((rel * v).sum(axis=1) / (ln ** 2), 0.0, 1.0)
        proj = a + t[:, None] * v
        d = np.hypot(p[0] - proj[:, 0], p[1] - proj[:, 1])
        return float((d - hw).min())

    def find_lane(self, p) -> Lane | None:
        """Nearest lane whose footprint contains the point, else None."""
        best = None
        best_d = np.inf
        for lane in self.lanes.values():
            _, _, d = lane.line.project(p)
            if d <= lane.width / 2.0 and d < best_d:
                best, best_d = lane, d
        return best


def _point_in_polygon(p, poly: np.ndarray) -> bool:
    x, y = float(p[0]), float(p[1])
    inside = False
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        if (y0 > y) != (y1 > y):
            xt = x0 + (y - y0) / (y1 - y0) * (x1 - x0)
            if x < xt:
                inside = not inside
    return inside


# ---------------------------------------------------------------------------
# text format

def _parse_points(raw: str, where: str, lineno: int) -> np.ndarray:
    pts = []
    for chunk in raw.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = chunk.split()
        if len(parts) != 2:
            raise MapError(f"{where}:{lineno}: point {chunk!r} is not 'x y'")
        try:
            pts.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise MapError(f"{where}:{lineno}: non-numeric point {chunk!r}")
    return np.array(pts, dtype=np.float64).reshape(-1, 2)


def _get(entry: dict, key: str, where: str, kind: str):
    if key not in entry:
        raise MapError(f"{where}:{entry['_line']}: [{kind}] missing key {key!r}")
    return entry[key]


def _get_float(entry, key, where, kind) -> float:
    raw, lineno = _get(entry, key, where, kind)
    try:
        return float(raw)
    except ValueError:
        raise MapError(f"{where}:{lineno}: {key} = {raw!r} is not a number")


def parse_map(text: str, source: str = "<string>") -> MapGraph:
    sections: list[tuple[str, dict]] = []
    current = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = {"_line": lineno}
            sections.append((line[1:-1].strip(), current))
            continue
        if current is None:
            raise MapError(f"{source}:{lineno}: content before any section header")
        if "=" not in line:
            raise MapError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        current[key.strip()] = (value.strip(), lineno)

    map_id, map_name = "", ""
    lanes: dict[str, Lane] = {}
    lane_lines: dict[str, int] = {}
    lights: list[TrafficLight] = []
    ped_paths: list[PedestrianPath] = []
    parked: list[ParkedVehicle] = []
    aprons: list[np.ndarray] = []

    for kind, entry in sections:
        where = source
        at = entry["_line"]
        if kind == "meta":
            map_id = _get(entry, "id", where, kind)[0]
            map_name = entry.get("name", ("", at))[0]
        elif kind == "lane":
            lane_id = _get(entry, "id", where, kind)[0]
            if lane_id in lanes:
                raise MapError(f"{where}:{at}: duplicate lane id {lane_id!r}")
            width = _get_float(entry, "width", where, kind)
            if width <= 0:
                raise MapError(f"{where}:{at}: lane {lane_id}: width must be > 0")
            speed = _get_float(entry, "speed_limit", where, kind)
            if speed <= 0:
                raise MapError(f"{where}:{at}: lane {lane_id}: speed_limit must be > 0")
            marks = []
            for side in ("left_marking", "right_marking"):
                m, mline = _get(entry, side, where, kind)
                if m not in MARKING_KINDS:
                    raise MapError(f"{where}:{mline}: {side} {m!r} not one of {MARKING_KINDS}")
                marks.append(m)
            succ_raw, _ = entry.get("successors", ("", at))
            successors = [s.strip() for s in succ_raw.split(",") if s.strip()]
            pts_raw, pts_line = _get(entry, "centerline", where, kind)
            pts = _parse_points(pts_raw, where, pts_line)
            if len(pts) < 2:
                raise MapError(f"{where}:{pts_line}: lane {lane_id}: centerline needs >= 2 points")
            try:
                line = Polyline(pts)
            except ValueError as e:
                raise MapError(f"{where}:{pts_line}: lane {lane_id}: {e}")
            lanes[lane_id] = Lane(lane_id, width, speed, marks[0], marks[1],
                                  successors, line)
            lane_lines[lane_id] = at
        elif kind == "light":
            light_id = _get(entry, "id", where, kind)[0]
            ctrl_raw, ctrl_line = _get(entry, "lanes", where, kind)
            ctrl = [s.strip() for s in ctrl_raw.split(",") if s.strip()]
            green = _get_float(entry, "green", where, kind)
            red = _get_float(entry, "red", where, kind)
            if green <= 0 or red <= 0:
                raise MapError(f"{where}:{at}: light {light_id}: phase durations must be > 0")
            lights.append(TrafficLight(
                light_id, _get_float(entry, "x", where, kind),
                _get_float(entry, "y", where, kind),
                _get_float(entry, "yaw", where, kind),
                ctrl, green, red, _get_float(entry, "offset", where, kind)))
            entry["_ctrl_line"] = ctrl_line
        elif kind == "pedestrian_path":
            pid = _get(entry, "id", where, kind)[0]
            lo = _get_float(entry, "speed_min", where, kind)
            hi = _get_float(entry, "speed_max", where, kind)
            if not (0 < lo <= hi):
                raise MapError(f"{where}:{at}: path {pid}: need 0 < speed_min <= speed_max")
            pts_raw, pts_line = _get(entry, "points", where, kind)
            pts = _parse_points(pts_raw, where, pts_line)
            if len(pts) < 2:
                raise MapError(f"{where}:{pts_line}: path {pid}: needs >= 2 points")
            ped_paths.append(PedestrianPath(pid, lo, hi, Polyline(pts)))
        elif kind == "parked_vehicle":
            w = _get_float(entry, "w", where, kind)
            l = _get_float(entry, "l", where, kind)
            if w <= 0 or l <= 0:
                raise MapError(f"{where}:{at}: parked vehicle size must be > 0")
            parked.append(ParkedVehicle(
                _get_float(entry, "x", where, kind),
                _get_float(entry, "y", where, kind),
                _get_float(entry, "yaw", where, kind), w, l))
        elif kind == "apron":
            pts_raw, pts_line = _get(entry, "points", where, kind)
            pts = _parse_points(pts_raw, where, pts_line)
            if len(pts) < 3:
                raise MapError(f"{where}:{pts_line}: apron polygon needs >= 3 points")
            aprons.append(pts)
        else:
            raise MapError(f"{where}:{at}: unknown section [{kind}]")

    if not map_id:
        raise MapError(f"{source}:1: missing [meta] section with an id")
    if not lanes:
        raise MapError(f"{source}:1: map has no lanes")
    for lane_id, lane in lanes.items():
        for succ in lane.successors:
            if succ not in lanes:
                raise MapError(f"{source}:{lane_lines[lane_id]}: lane {lane_id}: "
                               f"successor {succ!r} does not exist")
    for (kind, entry), light in zip(
            [se for se in sections if se[0] == "light"], lights):
        for lane_id in light.lanes:
            if lane_id not in lanes:
                raise MapError(f"{source}:{entry['_ctrl_line']}: light {light.id}: "
                               f"controlled lane {lane_id!r} does not exist")
    return MapGraph(map_id, map_name, lanes, lights, ped_paths, parked, aprons)


def load_map(path) -> MapGraph:
    from pathlib import Path
    p = Path(path)
    return parse_map(p.read_text(), source=str(p))


def shipped_map_dir():
    from pathlib import Path
    return Path(__file__).parent / "maps"


def load_shipped_map(map_id: str) -> MapGraph:
    path = shipped_map_dir() / f"{map_id}.map"
    if not path.exists():
        known = sorted(q.stem for q in shipped_map_dir().glob("*.map"))
        raise MapError(f"unknown map {map_id!r}; shipped maps: {known}")
    return load_map(path)
