"""Scripted expert driver and the offline dataset it produces.

Dataset file (``.ddt``), all integers little-endian::

    b"DDT1"                          magic
    uint32 header_len, header bytes  UTF-8 JSON (schema_version, obs_dim,
                                     action_dim, record_count, metadata)
    record_count x:
        uint32 record_len            = 8 * (2*obs_dim + action_dim + 3)
        float64[obs_dim]             s
        float64[action_dim]          a
        float64                      r
        float64                      c
        float64[obs_dim]             s_next
        float64                      done (0.0 / 1.0)
    32 bytes                         SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .critics import Batch
from .driveworld import DoneReason, DriveWorld, Scenario, SensorConfig, VehicleLimits, split_observation

EXPERT_VERSION = "scripted-1"
SCHEMA_VERSION = 1
MAGIC = b"DDT1"


@dataclass(frozen=True)
class ExpertConfig:
    target_speed: float = 8.0
    speed_gain: float = 0.5
    brake_ray: float = 0.25  # full brake if the forward ray reads below this
    min_gap: float = 4.0
    headway: float = 1.5
    comfort_decel: float = 2.5
    yield_margin: float = 1.5  # s
    conflict_half_width: float = 3.5
    conflict_clearance: float = 4.5  # m either side of a crossing vehicle's track
    steer_saturate_bearing: float = math.pi / 3
    yield_crossing: bool = True


RECKLESS = ExpertConfig(target_speed=9.5, yield_crossing=False)


def _to_command(accel: float, limits: VehicleLimits) -> float:
    if accel >= 0.0:
        return min(accel / limits.max_accel, 1.0)
    return max(accel / limits.max_brake, -1.0)


def _time_to_cover(distance: float, v: float, accel: float, v_max: float) -> float:
    """Time to travel ``distance`` accelerating at ``accel`` up to ``v_max``."""
    if distance <= 0.0:
        return 0.0
    t_ramp = max(v_max - v, 0.0) / accel
    d_ramp = v * t_ramp + 0.5 * accel * t_ramp**2
    if distance <= d_ramp:
        return (-v + math.sqrt(v * v + 2.0 * accel * distance)) / accel
    return t_ramp + (distance - d_ramp) / v_max


def expert_act(obs, cfg: ExpertConfig = ExpertConfig(), limits: VehicleLimits = VehicleLimits(),
               sensors: SensorConfig = SensorConfig()) -> np.ndarray:
    """Pure-pursuit steering, IDM-style speed keeping, yielding at crossings.

    Uses only the observation vector.
    """
    parts = split_observation(np.asarray(obs, dtype=np.float64), sensors)
    _, _, vx, vy, _, _ = parts["ego"]
    v = math.hypot(vx, vy)
    dist, bearing = parts["nav"]

    # steering
    if abs(bearing) >= cfg.steer_saturate_bearing:
        a1 = math.copysign(1.0, bearing)
    else:
        lookahead = max(dist, 5.0)
        steer = math.atan(2.0 * limits.wheelbase * math.sin(bearing) / lookahead)
        a1 = float(np.clip(steer / limits.max_steer, -1.0, 1.0))

    # free-road speed keeping plus car following (IDM)
    accel = limits.max_accel * (1.0 - (v / cfg.target_speed) ** 4)
    v_limit = cfg.target_speed
    for dx, dy, dvx, dvy in parts["neighbors"]:
        if dx == 0.0 and dy == 0.0 and dvx == 0.0 and dvy == 0.0:
            continue
        ovx, ovy = dvx + v, dvy
        gap = dx - limits.length
        same_dir = ovx > 0.0 and abs(ovy) < 0.5 * max(ovx, 1e-6)
        in_path = abs(dy) < 2.5 + 0.0125 * dx * dx
        if dx > 0.0 and in_path and (same_dir or math.hypot(ovx, ovy) < 0.5):
            desired = cfg.min_gap + v * cfg.headway + v * (-dvx) / (2.0 * math.sqrt(limits.max_accel * cfg.comfort_decel))
            accel = min(accel, limits.max_accel * (1.0 - (v / cfg.target_speed) ** 4
                                                   - (max(desired, 0.0) / max(gap, 0.1)) ** 2))
            continue
        # crossing traffic: predict occupancy of the ego's path strip
        if cfg.yield_crossing and abs(ovy) > 1.0 and abs(ovy) > abs(ovx):
            approaching = dy * ovy < 0.0 or abs(dy) < cfg.conflict_half_width
            if not approaching:
                continue
            half = cfg.conflict_half_width
            t_in = max(0.0, (abs(dy) - half) / abs(ovy))
            t_out = (abs(dy) + half) / abs(ovy)
            if abs(dy) < half:
                t_in = 0.0
            d_in = dx - cfg.conflict_clearance - limits.length / 2.0
            d_out = dx + cfg.conflict_clearance + limits.length / 2.0
            if d_out <= 0.0:
                continue
            ramp = limits.max_accel - limits.drag * v
            e_in = _time_to_cover(d_in, v, max(ramp, 0.5), limits.terminal_speed)
            e_out = _time_to_cover(d_out, v, max(ramp, 0.5), limits.terminal_speed)
            conflict = e_in - cfg.yield_margin < t_out and t_in < e_out + cfg.yield_margin
            if not conflict:
                continue
            in_lane = dx - limits.length / 2.0 - limits.width / 2.0 < 0.5
            if in_lane or (d_in > 0.0 and v * v / (2.0 * limits.max_brake) > d_in + 1.0):
                # too late to stop: clear the strip
                accel = max(accel, limits.max_accel)
                v_limit = limits.terminal_speed
            elif d_in <= 0.0:
                accel = min(accel, -limits.max_brake)
            else:
                v_stop = math.sqrt(2.0 * cfg.comfort_decel * max(d_in - 1.5, 0.0))
                accel = min(accel, 2.0 * (v_stop - v))

    # command = desired acceleration plus drag compensation
    a2 = _to_command(accel + limits.drag * v, limits)
    if v > v_limit:
        a2 = min(a2, 0.0)
    if parts["lidar"][0] < cfg.brake_ray:
        a2 = -1.0
    return np.array([a1, a2], dtype=np.float64)


# ---------------------------------------------------------------- dataset


class DatasetError(ValueError):
    pass


class VersionError(DatasetError):
    pass


class TruncationError(DatasetError):
    pass


class ChecksumError(DatasetError):
    pass


class DatasetDimensionError(DatasetError):
    pass


@dataclass
class TrajectoryDataset:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def obs_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrajectoryDataset):
            return NotImplemented
        arrays = ("states", "actions", "rewards", "costs", "next_states", "dones")
        return self.metadata == other.metadata and all(
            getattr(self, k).tobytes() == getattr(other, k).tobytes() and getattr(self, k).shape == getattr(other, k).shape
            for k in arrays
        )

    def episode_slices(self) -> list[slice]:
        ends = np.flatnonzero(self.dones > 0.5)
        out, start = [], 0
        for e in ends:
            out.append(slice(start, int(e) + 1))
            start = int(e) + 1
        if start < len(self):
            out.append(slice(start, len(self)))
        return out

    def sample(self, rng: np.random.Generator, batch_size: int) -> Batch:
        idx = rng.integers(0, len(self), size=batch_size)
        return self.batch(idx)

    def batch(self, idx) -> Batch:
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx], self.costs[idx],
                     self.next_states[idx], self.dones[idx])

    def state_stats(self) -> tuple[np.ndarray, np.ndarray]:
        mean = self.states.mean(axis=0)
        std = self.states.std(axis=0)
        return mean, np.where(std < 1e-6, 1.0, std)


def collect(scenario: Scenario, episodes: int, seed: int, noise: float = 0.0,
            reckless_fraction: float = 0.0, cfg: ExpertConfig = ExpertConfig(),
            crash_warning_rate: float = 0.2, world_kwargs: dict | None = None) -> TrajectoryDataset:
    """Roll the expert for ``episodes`` episodes; episode ``k`` uses world seed ``seed + k``.

    ``noise`` adds Gaussian perturbations (std ``noise``) to the expert's
    commands before clipping; the executed (clipped) command is stored.
    A ``reckless_fraction`` of episodes is driven by :data:`RECKLESS`, which
    does not yield to crossing traffic.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    world = DriveWorld(scenario, **(world_kwargs or {}))
    cols = {k: [] for k in ("s", "a", "r", "c", "s2", "d")}
    reasons, returns, costs = [], [], []
    for k in range(episodes):
        obs = world.reset(seed + k)
        rng = np.random.default_rng([seed, k])
        driver = RECKLESS if rng.random() < reckless_fraction else cfg
        ep_r = ep_c = 0.0
        while True:
            a = expert_act(obs, driver, world.limits, world.sensors)
            if noise > 0.0:
                a = a + noise * rng.standard_normal(2)
            a = np.clip(a, -1.0, 1.0)
            out = world.step(a)
            cols["s"].append(obs)
            cols["a"].append(a)
            cols["r"].append(out.reward)
            cols["c"].append(out.cost)
            cols["s2"].append(out.observation)
            cols["d"].append(float(out.done))
            ep_r += out.reward
            ep_c += out.cost
            obs = out.observation
            if out.done:
                reasons.append(out.done_reason.value)
                break
        returns.append(ep_r)
        costs.append(ep_c)
    crash_rate = sum(r == DoneReason.CRASH.value for r in reasons) / episodes
    meta = {
        "scenario": scenario.name,
        "traffic_density": scenario.traffic_density,
        "seed": seed,
        "episodes": episodes,
        "episode_seeds": [seed, seed + episodes - 1],
        "expert_version": EXPERT_VERSION,
        "noise": noise,
        "reckless_fraction": reckless_fraction,
        "transitions": len(cols["r"]),
        "done_reasons": {r.value: reasons.count(r.value) for r in DoneReason},
        "mean_return": float(np.mean(returns)),
        "mean_cost": float(np.mean(costs)),
        "crash_rate": crash_rate,
        "warnings": [f"expert crash rate {crash_rate:.3f} exceeds {crash_warning_rate}"]
        if crash_rate > crash_warning_rate else [],
    }
    return TrajectoryDataset(
        np.array(cols["s"]), np.array(cols["a"]), np.array(cols["r"], dtype=np.float64),
        np.array(cols["c"], dtype=np.float64), np.array(cols["s2"]), np.array(cols["d"], dtype=np.float64),
        meta,
    )


def save(dataset: TrajectoryDataset, path) -> None:
    obs_dim, act_dim = dataset.obs_dim, dataset.action_dim
    header = json.dumps({
        "schema_version": SCHEMA_VERSION,
        "obs_dim": obs_dim,
        "action_dim": act_dim,
        "record_count": len(dataset),
        "metadata": dataset.metadata,
    }, sort_keys=True).encode()
    rows = np.concatenate([
        dataset.states, dataset.actions, dataset.rewards[:, None], dataset.costs[:, None],
        dataset.next_states, dataset.dones[:, None],
    ], axis=1).astype("<f8")
    rec_len = rows.shape[1] * 8
    prefix = struct.pack("<I", rec_len)
    body = bytearray(MAGIC + struct.pack("<I", len(header)) + header)
    for row in rows:
        body += prefix
        body += row.tobytes()
    Path(path).write_bytes(bytes(body) + hashlib.sha256(body).digest())


def load(path, expected_obs_dim: int | None = None) -> TrajectoryDataset:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise VersionError(f"{path}: not a .ddt dataset")
    if len(raw) < 8:
        raise TruncationError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    if len(raw) < 8 + hlen:
        raise TruncationError(f"{path}: truncated header")
    header = json.loads(raw[8:8 + hlen])
    if header.get("schema_version") != SCHEMA_VERSION:
        raise VersionError(f"{path}: schema version {header.get('schema_version')} != {SCHEMA_VERSION}")
    obs_dim, act_dim, count = header["obs_dim"], header["action_dim"], header["record_count"]
    if expected_obs_dim is not None and obs_dim != expected_obs_dim:
        raise DatasetDimensionError(f"{path}: observation dim {obs_dim} != expected {expected_obs_dim}")
    width = 2 * obs_dim + act_dim + 3
    rec_len = 8 * width
    pos = 8 + hlen
    rows = np.empty((count, width))
    for k in range(count):
        if pos + 4 + rec_len > len(raw):
            raise TruncationError(f"{path}: truncated at record {k}")
        (n,) = struct.unpack_from("<I", raw, pos)
        if n != rec_len:
            raise DatasetDimensionError(f"{path}: record {k} has length {n}, expected {rec_len}")
        rows[k] = np.frombuffer(raw, dtype="<f8", count=width, offset=pos + 4)
        pos += 4 + rec_len
    if len(raw) - pos != 32:
        raise TruncationError(f"{path}: missing or malformed checksum trailer")
    if hashlib.sha256(raw[:pos]).digest() != raw[pos:]:
        raise ChecksumError(f"{path}: checksum mismatch")
    o, a = obs_dim, act_dim
    return TrajectoryDataset(
        rows[:, :o].copy(), rows[:, o:o + a].copy(), rows[:, o + a].copy(), rows[:, o + a + 1].copy(),
        rows[:, o + a + 2:2 * o + a + 2].copy(), rows[:, 2 * o + a + 2].copy(), header["metadata"],
    )
