"""Small deterministic driving simulator posed as a constrained MDP.

Conventions
-----------
* World frame is x east, y north; headings are counter-clockwise from +x and
  wrapped to (-pi, pi].
* Positive steering command ``a1`` turns the ego **left** (counter-clockwise).
* ``a2 > 0`` is throttle, ``a2 < 0`` is brake.
* Observation layout (``R`` lidar rays, ``K`` neighbour slots)::

      [0:6]            x, y, vx, vy, heading, dis_bound
      [6:8]            distance and bearing (ego frame) to next checkpoint
      [8:8+R]          lidar distances / max_range, ray k at heading + 2*pi*k/R
      [8+R:8+R+4K]     per neighbour: dx, dy, dvx, dvy in the ego frame

Neighbours are the ``K`` nearest active vehicles within lidar range, ordered
by distance then spawn id; empty slots are exactly zero.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np


class ConfigurationError(ValueError):
    pass


class LifecycleError(RuntimeError):
    pass


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.remainder(a, 2.0 * math.pi)
    return math.pi if w == -math.pi else w


# ---------------------------------------------------------------- geometry


class Polyline:
    """Piecewise-linear curve with arclength parametrisation."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ConfigurationError("polyline needs at least two 2-D points")
        seg = np.diff(pts, axis=0)
        seglen = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(seglen <= 1e-9):
            raise ConfigurationError("polyline has repeated points")
        self.points = pts
        self.seg = seg
        self.seglen = seglen
        self.cum = np.concatenate([[0.0], np.cumsum(seglen)])
        self.tangent = seg / seglen[:, None]
        self.normal = np.stack([-self.tangent[:, 1], self.tangent[:, 0]], axis=1)  # left

    @property
    def length(self) -> float:
        return float(self.cum[-1])

    def locate(self, s: float) -> tuple[np.ndarray, float, np.ndarray]:
        """Point, heading and left normal at arclength ``s`` (clamped to the curve)."""
        s = min(max(s, 0.0), self.length)
        k = int(np.searchsorted(self.cum, s, side="right") - 1)
        k = min(max(k, 0), len(self.seg) - 1)
        p = self.points[k] + self.tangent[k] * (s - self.cum[k])
        t = self.tangent[k]
        return p, math.atan2(t[1], t[0]), self.normal[k]

    def project(self, p) -> tuple[float, float, float]:
        """``(s, signed lateral offset (left +), tangent heading)`` of the closest point."""
        p = np.asarray(p, dtype=np.float64)
        rel = p - self.points[:-1]
        u = np.clip(np.einsum("ij,ij->i", rel, self.tangent), 0.0, self.seglen)
        closest = self.points[:-1] + self.tangent * u[:, None]
        d2 = np.sum((p - closest) ** 2, axis=1)
        k = int(np.argmin(d2))
        lateral = float(np.dot(p - closest[k], self.normal[k]))
        t = self.tangent[k]
        return float(self.cum[k] + u[k]), lateral, math.atan2(t[1], t[0])

    def offset_segments(self, offset: float, openings=()) -> np.ndarray:
        """Segments ``[x0, y0, x1, y1]`` of the curve shifted left by ``offset``.

        Arclength intervals in ``openings`` are left out.
        """
        # vertex normals: average of adjacent segment normals
        vn = np.zeros_like(self.points)
        vn[:-1] += self.normal
        vn[1:] += self.normal
        vn /= np.linalg.norm(vn, axis=1, keepdims=True)
        shifted = self.points + offset * vn
        out = []
        for k in range(len(self.seg)):
            for a, b in _subtract_intervals(self.cum[k], self.cum[k + 1], openings):
                fa = (a - self.cum[k]) / self.seglen[k]
                fb = (b - self.cum[k]) / self.seglen[k]
                pa = shifted[k] + fa * (shifted[k + 1] - shifted[k])
                pb = shifted[k] + fb * (shifted[k + 1] - shifted[k])
                out.append([pa[0], pa[1], pb[0], pb[1]])
        return np.asarray(out, dtype=np.float64).reshape(-1, 4)


def _subtract_intervals(a: float, b: float, holes) -> list[tuple[float, float]]:
    pieces = [(a, b)]
    for h0, h1 in holes:
        nxt = []
        for p0, p1 in pieces:
            if h1 <= p0 or h0 >= p1:
                nxt.append((p0, p1))
                continue
            if h0 > p0:
                nxt.append((p0, h0))
            if h1 < p1:
                nxt.append((h1, p1))
        pieces = nxt
    return [(p0, p1) for p0, p1 in pieces if p1 - p0 > 1e-9]


def build_polyline(start, heading: float, segments, resolution: float = 1.0) -> Polyline:
    """Chain ``("straight", length)`` and ``("arc", radius, degrees)`` pieces.

    Positive arc angles turn left.
    """
    x, y = float(start[0]), float(start[1])
    h = float(heading)
    pts = [(x, y)]
    for piece in segments:
        kind = piece[0]
        if kind == "straight":
            length = float(piece[1])
            if length <= 0:
                raise ConfigurationError("straight length must be positive")
            x += length * math.cos(h)
            y += length * math.sin(h)
            pts.append((x, y))
        elif kind == "arc":
            radius, degrees = float(piece[1]), float(piece[2])
            if radius <= 0 or degrees == 0:
                raise ConfigurationError("arc needs positive radius and non-zero angle")
            sweep = math.radians(degrees)
            side = 1.0 if sweep > 0 else -1.0
            cx = x - side * radius * math.sin(h)
            cy = y + side * radius * math.cos(h)
            n = max(2, int(math.ceil(abs(sweep) * radius / resolution)))
            start_ang = math.atan2(y - cy, x - cx)
            for j in range(1, n + 1):
                ang = start_ang + sweep * j / n
                pts.append((cx + radius * math.cos(ang), cy + radius * math.sin(ang)))
            x, y = pts[-1]
            h += sweep
        else:
            raise ConfigurationError(f"unknown segment kind {kind!r}")
    return Polyline(pts)


def rectangle_corners(x, y, heading, length, width) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    hl, hw = length / 2.0, width / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([x, y])


def rectangles_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test for two convex quadrilaterals given by corners."""
    for poly in (a, b):
        for k in range(4):
            edge = poly[(k + 1) % 4] - poly[k]
            axis = np.array([-edge[1], edge[0]])
            pa = a @ axis
            pb = b @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def rectangle_segments(corners: np.ndarray) -> np.ndarray:
    return np.concatenate([corners, np.roll(corners, -1, axis=0)], axis=1)


def ray_cast(origin, angles: np.ndarray, segments: np.ndarray, max_range: float) -> np.ndarray:
    """Distance along each ray to the first segment hit, capped at ``max_range``."""
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    dist = np.full(len(angles), max_range)
    if len(segments) == 0:
        return dist
    a = segments[:, :2] - np.asarray(origin)
    e = segments[:, 2:] - segments[:, :2]
    denom = dirs[:, 0:1] * e[None, :, 1] - dirs[:, 1:2] * e[None, :, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (a[None, :, 0] * e[None, :, 1] - a[None, :, 1] * e[None, :, 0]) / denom
        u = (a[None, :, 0] * dirs[:, 1:2] - a[None, :, 1] * dirs[:, 0:1]) / denom
    hit = (np.abs(denom) > 1e-12) & (t >= 0.0) & (u >= 0.0) & (u <= 1.0)
    t = np.where(hit, t, np.inf)
    return np.minimum(dist, t.min(axis=1))


# ---------------------------------------------------------------- scenario


@dataclass
class RoadSpec:
    name: str
    start: tuple[float, float]
    heading: float
    segments: list
    half_width: float = 3.5
    openings: list = field(default_factory=list)

    def __post_init__(self):
        self.start = tuple(self.start)
        self.segments = [tuple(seg) for seg in self.segments]
        self.openings = [tuple(o) for o in self.openings]


@dataclass
class StreamSpec:
    """Scripted constant-speed traffic on one road.

    ``mode="ahead"`` spreads vehicles along ``[s_min, s_max]`` of the path;
    ``mode="timed"`` schedules them to pass arclength ``conflict_s`` at times
    drawn from ``[0, horizon]``.  The vehicle count is
    ``Binomial(slots, traffic_density)``.
    """

    road: str
    mode: str = "ahead"
    lateral: float = 0.0
    reverse: bool = False
    slots: int = 10
    speed_min: float = 4.0
    speed_max: float = 7.0
    s_min: float = 20.0
    s_max: float = 100.0
    min_gap: float = 12.0
    conflict_s: float = 0.0
    horizon: float = 12.0
    min_headway: float = 1.5


@dataclass
class ObstacleSpec:
    x: float
    y: float
    heading: float = 0.0
    length: float = 1.0
    width: float = 1.0


@dataclass
class Scenario:
    name: str
    route: RoadSpec
    roads: list[RoadSpec] = field(default_factory=list)
    streams: list[StreamSpec] = field(default_factory=list)
    obstacles: list[ObstacleSpec] = field(default_factory=list)
    traffic_density: float = 0.1
    checkpoint_interval: float = 10.0
    timeout_steps: int = 400
    speed_limit: float = 10.0
    # arclength intervals of the route counted as conflict zones (for PET)
    conflict_zones: list = field(default_factory=list)

    def __post_init__(self):
        self.conflict_zones = [tuple(z) for z in self.conflict_zones]

    def to_text(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_text(cls, text: str) -> "Scenario":
        try:
            raw = json.loads(text)
            route = RoadSpec(**raw.pop("route"))
            roads = [RoadSpec(**r) for r in raw.pop("roads", [])]
            streams = [StreamSpec(**s) for s in raw.pop("streams", [])]
            obstacles = [ObstacleSpec(**o) for o in raw.pop("obstacles", [])]
            return cls(route=route, roads=roads, streams=streams, obstacles=obstacles, **raw)
        except (TypeError, KeyError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"malformed scenario text: {exc}") from exc


DENSITY = {"low": 0.1, "high": 0.2}


def preset(name: str, density: str | float = "low") -> Scenario:
    """Built-in scenarios: ``straight_curve``, ``intersection``, ``long_route``."""
    rho = DENSITY[density] if isinstance(density, str) else float(density)
    if name == "straight_curve":
        route = RoadSpec("route", (0.0, 0.0), 0.0, [("straight", 60.0), ("arc", 40.0, 90.0), ("straight", 40.0)])
        streams = [StreamSpec("route", "ahead", slots=15, speed_min=5.0, speed_max=8.0, s_min=25.0, s_max=130.0)]
        return Scenario(name, route, streams=streams, traffic_density=rho, timeout_steps=400)
    if name == "intersection":
        route = RoadSpec("route", (0.0, 0.0), 0.0, [("straight", 100.0)], openings=[(46.5, 53.5)])
        cross = RoadSpec("cross", (50.0, -150.0), math.pi / 2, [("straight", 300.0)], openings=[(146.5, 153.5)])
        streams = [
            StreamSpec("cross", "timed", lateral=-1.75, slots=30, speed_min=6.0, speed_max=9.0,
                       conflict_s=150.0, horizon=14.0),
            StreamSpec("cross", "timed", lateral=-1.75, reverse=True, slots=30, speed_min=6.0,
                       speed_max=9.0, conflict_s=150.0, horizon=14.0),
        ]
        return Scenario(name, route, [cross], streams, traffic_density=rho, timeout_steps=300,
                        conflict_zones=[(46.5, 53.5)])
    if name == "long_route":
        segs = [("straight", 60.0), ("arc", 40.0, 90.0), ("straight", 100.0)]
        route_line = build_polyline((0.0, 0.0), 0.0, segs)
        s_x = 60.0 + 40.0 * math.pi / 2 + 50.0
        p, h, _ = route_line.locate(s_x)
        # crossing road perpendicular to the route at s_x
        ch = h - math.pi / 2
        start = (p[0] - 150.0 * math.cos(ch), p[1] - 150.0 * math.sin(ch))
        route = RoadSpec("route", (0.0, 0.0), 0.0, segs, openings=[(s_x - 3.5, s_x + 3.5)])
        cross = RoadSpec("cross", start, ch, [("straight", 300.0)], openings=[(146.5, 153.5)])
        streams = [
            StreamSpec("route", "ahead", slots=15, speed_min=5.0, speed_max=8.0, s_min=25.0, s_max=120.0),
            StreamSpec("cross", "timed", lateral=-1.75, slots=30, speed_min=6.0, speed_max=9.0,
                       conflict_s=150.0, horizon=28.0),
            StreamSpec("cross", "timed", lateral=-1.75, reverse=True, slots=30, speed_min=6.0,
                       speed_max=9.0, conflict_s=150.0, horizon=28.0),
        ]
        return Scenario(name, route, [cross], streams, traffic_density=rho, timeout_steps=500,
                        conflict_zones=[(s_x - 3.5, s_x + 3.5)])
    raise ConfigurationError(f"unknown scenario preset {name!r}")


PRESETS = ("straight_curve", "intersection", "long_route")


# ---------------------------------------------------------------- dynamics


@dataclass(frozen=True)
class VehicleLimits:
    max_steer: float = 0.6  # rad
    max_accel: float = 3.0  # m/s^2
    max_brake: float = 5.0  # m/s^2
    drag: float = 0.3  # 1/s, terminal speed = max_accel / drag
    wheelbase: float = 2.5
    length: float = 4.5
    width: float = 1.8
    dt: float = 0.1

    @property
    def terminal_speed(self) -> float:
        return self.max_accel / self.drag


@dataclass(frozen=True)
class SensorConfig:
    n_rays: int = 24
    max_range: float = 50.0
    n_neighbors: int = 4

    @property
    def obs_dim(self) -> int:
        return 8 + self.n_rays + 4 * self.n_neighbors


@dataclass(frozen=True)
class RewardConfig:
    distance: float = 1.0  # per metre of route progress
    speed: float = 0.1
    destination: float = 10.0
    failure_penalty: float = 5.0
    w_distance: float = 1.0
    w_speed: float = 1.0
    w_terminal: float = 1.0


@dataclass(frozen=True)
class CostConfig:
    out_of_road: float = 1.0
    vehicle_crash: float = 5.0
    object_crash: float = 5.0
    w_out_of_road: float = 1.0
    w_vehicle: float = 1.0
    w_object: float = 1.0


def map_action(cmd, limits: VehicleLimits = VehicleLimits()) -> tuple[float, float, float]:
    """Normalised ``(a1, a2)`` to ``(steer, throttle, brake)``; throttle and brake never both > 0."""
    a1 = float(np.clip(cmd[0], -1.0, 1.0))
    a2 = float(np.clip(cmd[1], -1.0, 1.0))
    return limits.max_steer * a1, limits.max_accel * max(0.0, a2), -limits.max_brake * min(0.0, a2)


@dataclass
class VehicleState:
    x: float
    y: float
    vx: float
    vy: float
    heading: float
    length: float = 4.5
    width: float = 1.8

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)

    def corners(self) -> np.ndarray:
        return rectangle_corners(self.x, self.y, self.heading, self.length, self.width)


@dataclass
class TrafficVehicle:
    vid: int
    path: Polyline
    s: float
    speed: float
    lateral: float
    length: float = 4.5
    width: float = 1.8

    @property
    def active(self) -> bool:
        return 0.0 <= self.s <= self.path.length

    def state(self) -> VehicleState:
        p, h, n = self.path.locate(self.s)
        p = p + self.lateral * n
        return VehicleState(float(p[0]), float(p[1]), self.speed * math.cos(h), self.speed * math.sin(h),
                            h, self.length, self.width)


class DoneReason(str, enum.Enum):
    DESTINATION = "destination"
    CRASH = "crash"
    OUT_OF_ROAD = "out_of_road"
    TIMEOUT = "timeout"


@dataclass
class StepOutcome:
    observation: np.ndarray
    reward: float
    cost: float
    done: bool
    done_reason: DoneReason | None
    info: dict


class DriveWorld:
    """One episode of a :class:`Scenario`.  Call :meth:`reset` before stepping."""

    def __init__(self, scenario: Scenario, limits: VehicleLimits = VehicleLimits(),
                 sensors: SensorConfig = SensorConfig(), rewards: RewardConfig = RewardConfig(),
                 costs: CostConfig = CostConfig()):
        self.scenario = scenario
        self.limits = limits
        self.sensors = sensors
        self.reward_cfg = rewards
        self.cost_cfg = costs
        try:
            self.route = self._road_line(scenario.route)
            self.roads = {r.name: (r, self._road_line(r)) for r in scenario.roads}
        except (TypeError, ValueError, IndexError) as exc:
            raise ConfigurationError(f"malformed track: {exc}") from exc
        self.roads[scenario.route.name] = (scenario.route, self.route)
        self.half_width = scenario.route.half_width
        if self.route.length <= scenario.checkpoint_interval:
            raise ConfigurationError("route shorter than one checkpoint interval")
        self.checkpoints = np.arange(scenario.checkpoint_interval, self.route.length, scenario.checkpoint_interval)
        self.checkpoints = np.append(self.checkpoints, self.route.length)
        edges = []
        for spec, line in self.roads.values():
            edges.append(line.offset_segments(spec.half_width, spec.openings))
            edges.append(line.offset_segments(-spec.half_width, spec.openings))
        self.edge_segments = np.concatenate(edges, axis=0)
        self.obstacles = [
            rectangle_corners(o.x, o.y, o.heading, o.length, o.width) for o in scenario.obstacles
        ]
        self._obstacle_segments = (
            np.concatenate([rectangle_segments(c) for c in self.obstacles]) if self.obstacles else np.zeros((0, 4))
        )
        self.ray_offsets = 2.0 * math.pi * np.arange(sensors.n_rays) / sensors.n_rays
        self.ego: VehicleState | None = None
        self.traffic: list[TrafficVehicle] = []
        self.done = True

    @staticmethod
    def _road_line(spec: RoadSpec) -> Polyline:
        segs = [tuple(s) for s in spec.segments]
        return build_polyline(spec.start, spec.heading, segs)

    @property
    def obs_dim(self) -> int:
        return self.sensors.obs_dim

    # -- lifecycle

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        p, h, _ = self.route.locate(0.0)
        lim = self.limits
        self.ego = VehicleState(float(p[0]), float(p[1]), 0.0, 0.0, wrap_angle(h), lim.length, lim.width)
        self.route_s = 0.0
        self.t_step = 0
        self.done = False
        self.traffic = self._spawn(rng)
        return self.observe()

    def _spawn(self, rng: np.random.Generator) -> list[TrafficVehicle]:
        vehicles = []
        vid = 0
        for stream in self.scenario.streams:
            spec, line = self.roads[stream.road]
            path = line
            if stream.reverse:
                path = Polyline(line.points[::-1].copy())
            count = int(rng.binomial(stream.slots, self.scenario.traffic_density))
            speeds = rng.uniform(stream.speed_min, stream.speed_max, size=count)
            if stream.mode == "ahead":
                raw = np.sort(rng.uniform(stream.s_min, stream.s_max, size=count))
                placed: list[float] = []
                for s in raw:
                    if not placed or s - placed[-1] >= stream.min_gap:
                        placed.append(float(s))
                positions = placed
                speeds = speeds[: len(placed)]
            elif stream.mode == "timed":
                times = np.sort(rng.uniform(0.0, stream.horizon, size=count))
                for k in range(1, len(times)):
                    times[k] = max(times[k], times[k - 1] + stream.min_headway)
                conflict = stream.conflict_s if not stream.reverse else path.length - stream.conflict_s
                positions = [conflict - v * t for v, t in zip(speeds, times)]
            else:
                raise ConfigurationError(f"unknown stream mode {stream.mode!r}")
            for s, v in zip(positions, speeds):
                vehicles.append(TrafficVehicle(vid, path, float(s), float(v), stream.lateral))
                vid += 1
        return vehicles

    def step(self, cmd) -> StepOutcome:
        if self.done or self.ego is None:
            raise LifecycleError("step() called on a finished episode; call reset()")
        lim = self.limits
        steer, throttle, brake = map_action(cmd, lim)
        ego = self.ego
        v = ego.speed
        v_new = max(0.0, v + lim.dt * (throttle - lim.drag * v - brake))
        heading = wrap_angle(ego.heading + lim.dt * v_new / lim.wheelbase * math.tan(steer))
        x = ego.x + lim.dt * v_new * math.cos(heading)
        y = ego.y + lim.dt * v_new * math.sin(heading)
        self.ego = VehicleState(x, y, v_new * math.cos(heading), v_new * math.sin(heading), heading,
                                ego.length, ego.width)
        for veh in self.traffic:
            veh.s += lim.dt * veh.speed
        self.t_step += 1

        s_new, lateral, _ = self.route.project((x, y))
        progress = s_new - self.route_s
        self.route_s = s_new

        corners = self.ego.corners()
        c1 = abs(lateral) + ego.width / 2.0 > self.half_width
        c2 = any(
            rectangles_overlap(corners, veh.state().corners()) for veh in self.traffic if veh.active
        )
        c3 = any(rectangles_overlap(corners, obs) for obs in self.obstacles)
        cc = self.cost_cfg
        cost = (cc.w_out_of_road * cc.out_of_road * c1 + cc.w_vehicle * cc.vehicle_crash * c2
                + cc.w_object * cc.object_crash * c3)

        reason = None
        if c2 or c3:
            reason = DoneReason.CRASH
        elif c1:
            reason = DoneReason.OUT_OF_ROAD
        elif s_new >= self.route.length - 1.0:
            reason = DoneReason.DESTINATION
        elif self.t_step >= self.scenario.timeout_steps:
            reason = DoneReason.TIMEOUT

        rc = self.reward_cfg
        r_dis = rc.distance * progress
        r_v = rc.speed * v_new / self.scenario.speed_limit
        r_s = 0.0
        if reason is DoneReason.DESTINATION:
            r_s = rc.destination
        elif reason in (DoneReason.CRASH, DoneReason.OUT_OF_ROAD):
            r_s = -rc.failure_penalty
        reward = rc.w_distance * r_dis + rc.w_speed * r_v + rc.w_terminal * r_s

        self.done = reason is not None
        info = {"c1": int(c1), "c2": int(c2), "c3": int(c3), "progress": progress, "route_s": s_new,
                "lateral": lateral, "r_dis": r_dis, "r_v": r_v, "r_s": r_s}
        return StepOutcome(self.observe(), float(reward), float(cost), self.done, reason, info)

    # -- perception

    def observe(self) -> np.ndarray:
        if self.ego is None:
            raise LifecycleError("observe() before reset()")
        ego = self.ego
        sens = self.sensors
        s, lateral, _ = self.route.project((ego.x, ego.y))
        dis_bound = self.half_width - abs(lateral)

        nxt = self.checkpoints[np.searchsorted(self.checkpoints, s + 1e-9, side="right")] \
            if s + 1e-9 < self.checkpoints[-1] else self.checkpoints[-1]
        cp, _, _ = self.route.locate(float(nxt))
        dx, dy = cp[0] - ego.x, cp[1] - ego.y
        nav = [math.hypot(dx, dy), wrap_angle(math.atan2(dy, dx) - ego.heading)]

        active = [veh for veh in self.traffic if veh.active]
        states = [veh.state() for veh in active]
        segs = [self.edge_segments, self._obstacle_segments]
        segs += [rectangle_segments(st.corners()) for st in states]
        lidar = ray_cast((ego.x, ego.y), ego.heading + self.ray_offsets, np.concatenate(segs), sens.max_range)
        lidar = lidar / sens.max_range

        c, sn = math.cos(ego.heading), math.sin(ego.heading)
        near = []
        for veh, st in zip(active, states):
            d = math.hypot(st.x - ego.x, st.y - ego.y)
            if d <= sens.max_range:
                near.append((d, veh.vid, st))
        near.sort(key=lambda item: (item[0], item[1]))
        neigh = np.zeros(4 * sens.n_neighbors)
        for k, (_, _, st) in enumerate(near[: sens.n_neighbors]):
            rx, ry = st.x - ego.x, st.y - ego.y
            rvx, rvy = st.vx - ego.vx, st.vy - ego.vy
            neigh[4 * k: 4 * k + 4] = [c * rx + sn * ry, -sn * rx + c * ry, c * rvx + sn * rvy, -sn * rvx + c * rvy]

        ego_block = [ego.x, ego.y, ego.vx, ego.vy, wrap_angle(ego.heading), dis_bound]
        return np.concatenate([ego_block, nav, lidar, neigh]).astype(np.float64)

    def snapshot(self) -> dict:
        """Ego and active-traffic kinematics for metric computation."""
        ego = self.ego
        return {
            "ego": (ego.x, ego.y, ego.vx, ego.vy, ego.heading),
            "traffic": {veh.vid: (st.x, st.y, st.vx, st.vy, st.heading)
                        for veh in self.traffic if veh.active for st in [veh.state()]},
            "route_s": self.route_s,
        }


def reset(scenario: Scenario, seed: int, **kw) -> tuple[DriveWorld, np.ndarray]:
    world = DriveWorld(scenario, **kw)
    return world, world.reset(seed)


def step(world: DriveWorld, cmd) -> StepOutcome:
    return world.step(cmd)


def observe(world: DriveWorld) -> np.ndarray:
    return world.observe()


def split_observation(obs: np.ndarray, sensors: SensorConfig = SensorConfig()) -> dict[str, np.ndarray]:
    r = sensors.n_rays
    return {
        "ego": obs[0:6],
        "nav": obs[6:8],
        "lidar": obs[8:8 + r],
        "neighbors": obs[8 + r:8 + r + 4 * sensors.n_neighbors].reshape(sensors.n_neighbors, 4),
    }
