"""Policy rollouts and driving-safety metrics.

Metrics per episode: total reward, total safety cost, safe running length
(metres of route progress, zeroed if the episode incurred any cost), minimum
time-to-collision against surrounding traffic, and post-encroachment times
at the scenario's conflict zones.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .driveworld import (
    DoneReason,
    DriveWorld,
    Scenario,
    VehicleLimits,
    rectangle_corners,
    rectangle_segments,
    rectangles_overlap,
)

INF = math.inf


class EvaluationError(ValueError):
    pass


@dataclass
class EpisodeRecord:
    seed: int
    route_length: float
    rewards: list[float] = field(default_factory=list)
    costs: list[float] = field(default_factory=list)
    route_s: list[float] = field(default_factory=list)
    speeds: list[float] = field(default_factory=list)
    done_reason: DoneReason | None = None
    ego_track: list = field(default_factory=list)  # rows x, y, vx, vy, heading
    neighbor_tracks: dict = field(default_factory=dict)  # vid -> {step: row}

    @property
    def total_reward(self) -> float:
        return float(sum(self.rewards))

    @property
    def total_cost(self) -> float:
        return float(sum(self.costs))

    @property
    def safe_length(self) -> float:
        """Route metres driven; zero once any violation occurred."""
        if self.total_cost > 0.0:
            return 0.0
        if self.done_reason is DoneReason.DESTINATION:
            return self.route_length
        progress = self.route_s[-1] if self.route_s else 0.0
        return float(min(max(progress, 0.0), self.route_length))

    @property
    def mean_speed(self) -> float:
        return float(np.mean(self.speeds)) if self.speeds else 0.0

    def ego_array(self) -> np.ndarray:
        return np.asarray(self.ego_track, dtype=np.float64).reshape(-1, 5)

    def neighbor_arrays(self) -> dict[int, np.ndarray]:
        """Per-vehicle ``[T, 5]`` tracks aligned with the ego track; NaN where absent."""
        n = len(self.ego_track)
        out = {}
        for vid, rows in self.neighbor_tracks.items():
            arr = np.full((n, 5), np.nan)
            for t, row in rows.items():
                arr[t] = row
            out[vid] = arr
        return out


def _record_snapshot(rec: EpisodeRecord, world: DriveWorld, t: int) -> None:
    snap = world.snapshot()
    rec.ego_track.append(snap["ego"])
    for vid, row in snap["traffic"].items():
        rec.neighbor_tracks.setdefault(vid, {})[t] = row


def rollout(act: Callable[[np.ndarray], np.ndarray], scenario: Scenario, seeds: Sequence[int],
            record_tracks: bool = False, world_kwargs: dict | None = None) -> list[EpisodeRecord]:
    """Run one episode per seed in lockstep; ``act`` maps ``[n, obs_dim]`` to ``[n, 2]``."""
    worlds = [DriveWorld(scenario, **(world_kwargs or {})) for _ in seeds]
    obs = [w.reset(s) for w, s in zip(worlds, seeds)]
    records = [EpisodeRecord(int(s), w.route.length) for w, s in zip(worlds, seeds)]
    if record_tracks:
        for rec, w in zip(records, worlds):
            _record_snapshot(rec, w, 0)
    live = list(range(len(worlds)))
    t = 0
    while live:
        actions = np.asarray(act(np.stack([obs[k] for k in live])), dtype=np.float64).reshape(len(live), -1)
        t += 1
        still = []
        for row, k in enumerate(live):
            out = worlds[k].step(actions[row])
            rec = records[k]
            rec.rewards.append(out.reward)
            rec.costs.append(out.cost)
            rec.route_s.append(out.info["route_s"])
            rec.speeds.append(worlds[k].ego.speed)
            if record_tracks:
                _record_snapshot(rec, worlds[k], t)
            obs[k] = out.observation
            if out.done:
                rec.done_reason = out.done_reason
            else:
                still.append(k)
        live = still
    return records


def policy_actor(policy, rng: np.random.Generator) -> Callable[[np.ndarray], np.ndarray]:
    """Wrap a diffusion policy (anything with ``sample(states, rng)``) or a per-state function."""
    if hasattr(policy, "sample"):
        return lambda states: policy.sample(states, rng)
    return lambda states: np.stack([np.asarray(policy(s), dtype=np.float64) for s in states])


# ---------------------------------------------------------------- TTC / PET


def _first_contact(moving: np.ndarray, velocity: np.ndarray, fixed: np.ndarray) -> float:
    """Earliest t >= 0 at which corners of ``moving`` + t*velocity hit edges of ``fixed``."""
    best = INF
    segs = rectangle_segments(fixed)
    a0, e = segs[:, :2], segs[:, 2:] - segs[:, :2]
    for c in moving:
        rel = a0 - c
        denom = velocity[0] * e[:, 1] - velocity[1] * e[:, 0]
        ok = np.abs(denom) > 1e-15
        if not ok.any():
            continue
        t = (rel[ok, 0] * e[ok, 1] - rel[ok, 1] * e[ok, 0]) / denom[ok]
        u = (rel[ok, 0] * velocity[1] - rel[ok, 1] * velocity[0]) / denom[ok]
        hit = (t >= 0.0) & (u >= 0.0) & (u <= 1.0)
        if hit.any():
            best = min(best, float(t[hit].min()))
    return best


def pair_ttc(ego_row, other_row, ego_size=(4.5, 1.8), other_size=(4.5, 1.8)) -> float:
    """Time until two constant-velocity rectangles first touch; ``inf`` if never.

    Zero-size vehicles degenerate to points and use centre distance.
    """
    ex, ey, evx, evy, eh = ego_row
    ox, oy, ovx, ovy, oh = other_row
    w = np.array([ovx - evx, ovy - evy])
    p = np.array([ox - ex, oy - ey])
    if float(np.dot(p, w)) >= 0.0 or float(np.dot(w, w)) == 0.0:
        return INF
    if ego_size[0] == 0.0 and other_size[0] == 0.0:
        # points: collide only if the relative ray passes through the origin
        cross = p[0] * w[1] - p[1] * w[0]
        if abs(cross) > 1e-9 * max(1.0, float(np.hypot(*p))):
            return INF
        return float(np.hypot(*p) / np.hypot(*w))
    ego = rectangle_corners(ex, ey, eh, *ego_size)
    other = rectangle_corners(ox, oy, oh, *other_size)
    if rectangles_overlap(ego, other):
        return 0.0
    return min(_first_contact(other, w, ego), _first_contact(ego, -w, other))


def compute_ttc(ego_track, neighbor_tracks, ego_size=(4.5, 1.8), other_size=(4.5, 1.8)) -> float:
    """Minimum over steps and neighbours of the pairwise TTC; ``inf`` when never converging.

    ``ego_track`` is ``[T, 5]`` (x, y, vx, vy, heading); ``neighbor_tracks`` is a
    mapping or sequence of equally long arrays with NaN rows where absent.
    """
    ego = np.asarray(ego_track, dtype=np.float64)
    tracks = neighbor_tracks.values() if isinstance(neighbor_tracks, dict) else neighbor_tracks
    best = INF
    for tr in tracks:
        tr = np.asarray(tr, dtype=np.float64)
        for t in range(min(len(ego), len(tr))):
            if np.isnan(tr[t]).any():
                continue
            best = min(best, pair_ttc(ego[t], tr[t], ego_size, other_size))
    return best


def point_in_polygon(x: float, y: float, poly: np.ndarray) -> bool:
    inside = False
    n = len(poly)
    for k in range(n):
        x0, y0 = poly[k]
        x1, y1 = poly[(k + 1) % n]
        if (y0 > y) != (y1 > y):
            xc = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
            if x < xc:
                inside = not inside
    return inside


def zone_traversals(track, zone, ) -> list[tuple[int, int]]:
    """``[(enter_step, exit_step)]``; exit is the first step back outside (len(track) if never)."""
    track = np.asarray(track, dtype=np.float64)
    zone = np.asarray(zone, dtype=np.float64)
    out, enter = [], None
    for t, row in enumerate(track):
        inside = not np.isnan(row[:2]).any() and point_in_polygon(row[0], row[1], zone)
        if inside and enter is None:
            enter = t
        elif not inside and enter is not None:
            out.append((enter, t))
            enter = None
    if enter is not None:
        out.append((enter, len(track)))
    return out


def compute_pet(ego_track, neighbor_tracks, zone, dt: float = 0.1, horizon: float = 10.0) -> list[float]:
    """Post-encroachment times between the ego and each neighbour at one conflict zone.

    For a pair of traversals where one vehicle exits at ``t1`` and the other
    enters at ``t2 >= t1`` the PET is ``t2 - t1``; if the second enters while
    the first is still inside the PET is 0.  Only values ``<= horizon`` are kept.
    """
    hz = round(1.0 / dt)
    ego_trav = zone_traversals(ego_track, zone)
    tracks = neighbor_tracks.values() if isinstance(neighbor_tracks, dict) else neighbor_tracks
    pets: list[float] = []
    for tr in tracks:
        for a_in, a_out in ego_trav:
            for b_in, b_out in zone_traversals(tr, zone):
                # order the pair by entry
                (f_in, f_out), (s_in, _) = sorted([(a_in, a_out), (b_in, b_out)])
                gap = max(s_in - f_out, 0)
                pet = gap / hz
                if pet <= horizon:
                    pets.append(pet)
    return pets


def conflict_polygons(world: DriveWorld) -> list[np.ndarray]:
    """Paved overlap squares for each conflict interval of the route."""
    polys = []
    for s0, s1 in world.scenario.conflict_zones:
        mid = 0.5 * (s0 + s1)
        p, h, _ = world.route.locate(mid)
        polys.append(rectangle_corners(p[0], p[1], h, s1 - s0, 2.0 * world.half_width))
    return polys


# ---------------------------------------------------------------- aggregate


@dataclass
class EpisodeMetrics:
    seed: int
    reward: float
    cost: float
    safe_length: float
    done_reason: str
    min_ttc: float
    pet: list[float]
    mean_speed: float
    steps: int


@dataclass
class EvalSummary:
    episodes: list[EpisodeMetrics]

    @staticmethod
    def _mean(values) -> float:
        values = [v for v in values if math.isfinite(v)]
        return float(np.mean(values)) if values else INF

    @property
    def mean_reward(self) -> float:
        return float(np.mean([e.reward for e in self.episodes]))

    @property
    def mean_cost(self) -> float:
        return float(np.mean([e.cost for e in self.episodes]))

    @property
    def mean_safe_length(self) -> float:
        return float(np.mean([e.safe_length for e in self.episodes]))

    @property
    def mean_min_ttc(self) -> float:
        return self._mean([e.min_ttc for e in self.episodes])

    @property
    def mean_pet(self) -> float:
        return self._mean([p for e in self.episodes for p in e.pet])

    @property
    def mean_speed(self) -> float:
        return float(np.mean([e.mean_speed for e in self.episodes]))

    @property
    def crash_rate(self) -> float:
        return float(np.mean([e.done_reason == DoneReason.CRASH.value for e in self.episodes]))

    def aggregate(self) -> dict:
        return {
            "mean_reward": self.mean_reward,
            "mean_cost": self.mean_cost,
            "mean_safe_length": self.mean_safe_length,
            "mean_min_ttc": self.mean_min_ttc,
            "mean_pet": self.mean_pet,
            "mean_speed": self.mean_speed,
            "crash_rate": self.crash_rate,
        }


def summarize(records: Sequence[EpisodeRecord], world: DriveWorld, limits: VehicleLimits = VehicleLimits()) -> EvalSummary:
    zones = conflict_polygons(world)
    size = (limits.length, limits.width)
    rows = []
    for rec in records:
        ttc, pets = INF, []
        if rec.ego_track:
            ego = rec.ego_array()
            neigh = rec.neighbor_arrays()
            ttc = compute_ttc(ego, neigh, size, size)
            for zone in zones:
                pets.extend(compute_pet(ego, neigh, zone, limits.dt))
        rows.append(EpisodeMetrics(rec.seed, rec.total_reward, rec.total_cost, rec.safe_length,
                                   rec.done_reason.value if rec.done_reason else "", ttc, pets,
                                   rec.mean_speed, len(rec.rewards)))
    return EvalSummary(rows)


def evaluate(policy, scenario: Scenario, episodes: int, seed: int, interaction_metrics: bool = True,
             world_kwargs: dict | None = None) -> EvalSummary:
    """Roll ``policy`` on seeds ``seed .. seed + episodes - 1``.

    Policy sampling noise comes from ``default_rng(seed)`` so results are
    reproducible.
    """
    if episodes < 1:
        raise EvaluationError("episodes must be >= 1")
    world = DriveWorld(scenario, **(world_kwargs or {}))
    state_dim = getattr(policy, "state_dim", None)
    if state_dim is not None and state_dim != world.obs_dim:
        raise EvaluationError(f"policy expects {state_dim}-dim states, scenario provides {world.obs_dim}")
    rng = np.random.default_rng(seed)
    seeds = [seed + k for k in range(episodes)]
    records = rollout(policy_actor(policy, rng), scenario, seeds, interaction_metrics, world_kwargs)
    return summarize(records, world, world.limits)


METRIC_FIELDS = ["episode", "seed", "reward", "cost", "safe_length", "done_reason", "min_ttc", "mean_pet",
                 "pet_count", "mean_speed", "steps"]


def write_metrics_csv(summary: EvalSummary, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for k, e in enumerate(summary.episodes):
            pet = float(np.mean(e.pet)) if e.pet else INF
            w.writerow([k, e.seed, repr(e.reward), repr(e.cost), repr(e.safe_length), e.done_reason,
                        repr(e.min_ttc), repr(pet), len(e.pet), repr(e.mean_speed), e.steps])
        agg = summary.aggregate()
        w.writerow(["aggregate", "", repr(agg["mean_reward"]), repr(agg["mean_cost"]),
                    repr(agg["mean_safe_length"]), f"crash_rate={agg['crash_rate']!r}", repr(agg["mean_min_ttc"]),
                    repr(agg["mean_pet"]), sum(len(e.pet) for e in summary.episodes), repr(agg["mean_speed"]),
                    sum(e.steps for e in summary.episodes)])


COMPARE_ROWS = [
    ("Mean Reward", "mean_reward"),
    ("Safety Cost", "mean_cost"),
    ("Safe Running Length", "mean_safe_length"),
    ("Min TTC", "mean_min_ttc"),
    ("PET", "mean_pet"),
    ("Mean Speed", "mean_speed"),
]


def comparison_table(named: dict[str, EvalSummary]) -> str:
    """Markdown table, one column per policy (ablation layout)."""
    names = list(named)
    lines = ["| Metric | " + " | ".join(names) + " |", "|---" * (len(names) + 1) + "|"]
    for label, key in COMPARE_ROWS:
        vals = [named[n].aggregate()[key] for n in names]
        lines.append(f"| {label} | " + " | ".join(f"{v:.3f}" for v in vals) + " |")
    return "\n".join(lines) + "\n"
