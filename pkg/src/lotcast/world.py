"""Procedural parking-lot world: layout, scripted policies, episode datasets.

Each episode simulates T_p + T_f steps of a small cast around an ego vehicle
that realizes one of three maneuvers — ``drive_through``, ``park_left``
(slot across the oncoming lane), ``park_right`` — at configured mixture
rates. Non-ego behavior is deliberately intention-dependent so a conditioned
predictor has real reactions to learn:

* parked vehicles hold their slots,
* a follower trails the ego and brakes when the ego brakes,
* an oncoming vehicle yields (decelerates to a stop) when the ego's
  scripted path will cross its lane within a ~3 s window,
* pedestrians cross the lane and pause while approaching traffic is near.

Episodes whose ground truth produces footprint contact, or brings any two
agents inside their summed safety radii, are rejected and resampled; more
than 50 rejections raises "infeasible config". Scenes are exported in the
ego frame of the last history step. Agent safety radii are width-based
(half width + 0.15 m) so adjacent parked cars and normal lane passes sit
outside the overlap penalty while genuine close encounters are inside it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geom
from .config import WorldConfig
from .metrics import overlap_rate
from .scene import (AgentAttr, Episode, Scene, Slot, VectorMap, canonical_dumps,
                    episode_from_json, episode_to_json, json_sha256)

MANEUVERS = ("drive_through", "park_left", "park_right")

_SLOT_DEPTH = 5.0
_SLOT_WIDTH = 2.6
_SLOT_PITCH = 2.8
_VEHICLE_ACCEL = 2.0          # m/s^2 comfortable accel/brake
_PED_PAUSE_RANGE = 7.0        # m; pedestrians watch traffic within this range


def _vehicle_attr(rng: np.random.Generator) -> AgentAttr:
    length = rng.uniform(4.2, 4.9)
    width = rng.uniform(1.7, 2.0)
    return AgentAttr("vehicle", (length, width), width / 2 + 0.15)


def _pedestrian_attr(rng: np.random.Generator) -> AgentAttr:
    side = rng.uniform(0.45, 0.65)
    return AgentAttr("pedestrian", (side, side), side / 2 + 0.15)


@dataclass(frozen=True)
class LotPlan:
    """Layout facts the policies need; the map is derived from this."""

    length: float
    width: float
    lane_y: float              # centerline of the driving corridor
    lane_half: float
    ego_y: float               # ego travel line (right-hand side, heading +x)
    oncoming_y: float          # opposing travel line (heading -x)
    slots: tuple[Slot, ...]    # top bank first, then bottom bank
    top_bank: tuple[int, ...]  # indices into slots
    bottom_bank: tuple[int, ...]


def plan_lot(config: WorldConfig, rng: np.random.Generator) -> LotPlan:
    lane_half = rng.uniform(3.3, 3.7)
    lane_y = config.lot_width / 2
    span = config.slot_cols * _SLOT_PITCH
    x0 = (config.lot_length - span) / 2 + _SLOT_PITCH / 2

    slots: list[Slot] = []
    top, bottom = [], []
    banks = [(lane_y + lane_half + _SLOT_DEPTH / 2, np.pi / 2, top),
             (lane_y - lane_half - _SLOT_DEPTH / 2, -np.pi / 2, bottom)]
    for row in range(min(config.slot_rows, 2)):
        y, heading, bank = banks[row]
        for col in range(config.slot_cols):
            bank.append(len(slots))
            slots.append(Slot(center=(x0 + col * _SLOT_PITCH, y), heading=heading,
                              length=_SLOT_DEPTH, width=_SLOT_WIDTH))
    return LotPlan(length=config.lot_length, width=config.lot_width,
                   lane_y=lane_y, lane_half=lane_half,
                   ego_y=lane_y - lane_half / 2, oncoming_y=lane_y + lane_half / 2,
                   slots=tuple(slots), top_bank=tuple(top), bottom_bank=tuple(bottom))


def lot_map(plan: LotPlan) -> VectorMap:
    L, W = plan.length, plan.width
    perimeter = np.array([
        [[0.0, 0.0], [L, 0.0]], [[L, 0.0], [L, W]],
        [[L, W], [0.0, W]], [[0.0, W], [0.0, 0.0]],
    ])
    xs = np.linspace(1.0, L - 1.0, 5)
    boundaries = tuple(
        np.stack([xs, np.full(5, y)], axis=1)
        for y in (plan.lane_y - plan.lane_half, plan.lane_y, plan.lane_y + plan.lane_half)
    )
    return VectorMap(soft_polylines=boundaries, hard_segments=perimeter,
                     slots=plan.slots)


def generate_lot(config: WorldConfig, rng: np.random.Generator) -> VectorMap:
    return lot_map(plan_lot(config, rng))


# -- path construction -------------------------------------------------------


def _bezier(p0, p1, p2, n: int = 24) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)[:, None]
    p0, p1, p2 = (np.asarray(p, dtype=np.float64) for p in (p0, p1, p2))
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2


def _park_path(start: np.ndarray, slot: Slot, plan: LotPlan) -> np.ndarray:
    """Straight approach, quadratic turn across the lane edge, glide to center."""
    cx, cy = slot.center
    top = cy > plan.lane_y
    y_edge = plan.lane_y + plan.lane_half if top else plan.lane_y - plan.lane_half
    approach = np.array([cx - 4.0, start[1]])
    turn = _bezier(approach, [cx, start[1]], [cx, y_edge])
    glide = np.stack([np.full(8, cx), np.linspace(y_edge, cy, 8)], axis=1)
    return np.concatenate([start[None], turn, glide[1:]], axis=0)


def _path_state(path: np.ndarray):
    seg = np.diff(path, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg_len)])
    heading = np.arctan2(seg[:, 1], seg[:, 0])
    return s, heading


def _along_path(path: np.ndarray, s_grid: np.ndarray, s_query: float):
    s_query = min(max(s_query, 0.0), s_grid[-1])
    x = np.interp(s_query, s_grid, path[:, 0])
    y = np.interp(s_query, s_grid, path[:, 1])
    return np.array([x, y])


class _PathFollower:
    """Arc-length tracker with trapezoidal speed and an optional stop at the end."""

    def __init__(self, path: np.ndarray, v0: float, v_cruise: float, stop_at_end: bool):
        self.path = path
        self.s_grid, self._headings = _path_state(path)
        self.total = float(self.s_grid[-1])
        self.s = 0.0
        self.v = v0
        self.v_cruise = v_cruise
        self.stop = stop_at_end

    def step(self, dt: float, dv: float = 0.0) -> None:
        v_des = self.v_cruise + dv
        if self.stop:
            remaining = max(self.total - self.s, 0.0)
            v_des = min(v_des, np.sqrt(2.0 * _VEHICLE_ACCEL * 0.8 * remaining))
        self.v += np.clip(v_des - self.v, -_VEHICLE_ACCEL * dt, _VEHICLE_ACCEL * dt)
        self.v = max(self.v, 0.0)
        self.s = min(self.s + self.v * dt, self.total)

    @property
    def pos(self) -> np.ndarray:
        return _along_path(self.path, self.s_grid, self.s)

    @property
    def heading(self) -> float:
        i = int(np.searchsorted(self.s_grid[1:-1], self.s, side="right"))
        return float(self._headings[min(i, len(self._headings) - 1)])


# -- episode simulation ------------------------------------------------------


@dataclass
class _Cast:
    attrs: list[AgentAttr]
    positions: np.ndarray      # (N, T, 2)
    headings: np.ndarray       # (N, T)


def _coverage(v: float, horizon: float) -> float:
    """Distance a follower covers in ``horizon`` s cruising at v, then stopping."""
    return v * horizon - v * v / (2.0 * _VEHICLE_ACCEL * 0.8)


def _ego_script(plan: LotPlan, maneuver: str, occupied: set[int], horizon: float,
                rng: np.random.Generator):
    """Returns (path, v_cruise, stop_at_end, target_slot index or None)."""
    v_c = rng.uniform(2.2, 3.4)
    x0 = rng.uniform(4.0, 9.0)
    start = np.array([x0, plan.ego_y])
    if maneuver == "drive_through":
        path = np.stack([start, np.array([plan.length - 2.0, plan.ego_y])])
        return path, v_c, False, None

    bank = plan.top_bank if maneuver == "park_left" else plan.bottom_bank
    lo, hi = x0 + 6.0, x0 + 14.0
    options = [i for i in bank if i not in occupied
               and lo <= plan.slots[i].center[0] <= hi]
    rng.shuffle(options)
    v_max = 4.8
    for target in options:
        path = _park_path(start, plan.slots[target], plan)
        length = _path_state(path)[0][-1]
        # smallest cruise speed that still arrives with margin, plus jitter
        speeds = np.linspace(1.8, v_max, 16)
        feasible = speeds[_coverage(speeds, horizon) >= length + 0.4]
        if feasible.size == 0:
            continue
        v_c = float(np.clip(feasible[0] * rng.uniform(1.05, 1.25), 1.8, v_max))
        return path, v_c, True, target
    return None


def _not_near(x: float, taken: list[float], gap: float = 3.5) -> bool:
    return all(abs(x - t) >= gap for t in taken)


def simulate_episode(config: WorldConfig, rng: np.random.Generator) -> Episode:
    maneuver = int(rng.choice(3, p=list(config.maneuver_mix)))
    for _ in range(51):
        result = _try_episode(config, maneuver, rng)
        if result is not None:
            return result
    raise RuntimeError("infeasible config: 50 consecutive episode rejections")


def _try_episode(config: WorldConfig, maneuver: int,
                 rng: np.random.Generator) -> Episode | None:
    plan = plan_lot(config, rng)
    T = config.t_past + config.t_future
    dt = config.dt
    occupied: set[int] = set()

    script = _ego_script(plan, MANEUVERS[maneuver], occupied, T * dt, rng)
    if script is None:
        return None
    ego_path, ego_v, ego_stop, target = script
    if target is not None:
        occupied.add(target)
    ego = _PathFollower(ego_path, ego_v, ego_v, ego_stop)

    n_extra = int(rng.integers(config.n_agents_min, config.n_agents_max + 1)) - 1
    attrs: list[AgentAttr] = [_vehicle_attr(rng)]
    movers: list[dict] = []    # policy descriptors, simulated per step
    ped_xs: list[float] = []

    for _ in range(max(n_extra, 0)):
        if rng.uniform() < config.pedestrian_fraction:
            interact = rng.uniform() < config.interaction_rate
            speed = rng.uniform(0.8, 1.6)
            if interact:
                t_meet = rng.uniform(2.5, 6.0)
                x_c = ego_path[0, 0] + ego_v * t_meet
            else:
                x_c = rng.uniform(3.0, plan.length - 3.0)
            if not _not_near(x_c, ped_xs, 2.0):
                continue
            ped_xs.append(x_c)
            down = rng.uniform() < 0.5
            y0 = plan.lane_y + (plan.lane_half + rng.uniform(2.0, 4.5)) * (1 if down else -1)
            movers.append({"kind": "pedestrian", "pos": np.array([x_c, y0]),
                           "vy": -speed if down else speed})
            attrs.append(_pedestrian_attr(rng))
        elif rng.uniform() < config.parked_fraction:
            free = [i for i in range(len(plan.slots)) if i not in occupied]
            if not free:
                continue
            slot_i = free[int(rng.integers(len(free)))]
            occupied.add(slot_i)
            slot = plan.slots[slot_i]
            movers.append({"kind": "parked", "pos": np.array(slot.center),
                           "heading": slot.heading})
            attrs.append(_vehicle_attr(rng))
        elif rng.uniform() < 0.5:
            gap = rng.uniform(7.0, 11.0)
            movers.append({"kind": "follower", "pos": np.array([ego_path[0, 0] - gap,
                                                                plan.ego_y]),
                           "v": ego_v})
            attrs.append(_vehicle_attr(rng))
        else:
            x_on = plan.length - rng.uniform(4.0, 10.0)
            movers.append({"kind": "oncoming",
                           "pos": np.array([x_on, plan.oncoming_y]),
                           "v": rng.uniform(2.0, 3.5)})
            attrs.append(_vehicle_attr(rng))

    N = 1 + len(movers)
    positions = np.zeros((N, T, 2))
    headings = np.zeros((N, T))

    ego_crosses_lane = MANEUVERS[maneuver] == "park_left"
    cross_x = ego_path[-1][0] if ego_crosses_lane else None
    noise = config.policy_noise

    for t in range(T):
        positions[0, t] = ego.pos
        headings[0, t] = ego.heading
        for a, mv in enumerate(movers, start=1):
            kind = mv["kind"]
            if kind == "parked":
                positions[a, t] = mv["pos"]
                headings[a, t] = mv["heading"]
                continue
            if kind == "pedestrian":
                pos = mv["pos"]
                in_band = abs(pos[1] - plan.lane_y) < plan.lane_half + 1.0
                traffic = [(positions[0, t, 0], ego.v, +1)]
                traffic += [(m["pos"][0], m["v"], +1 if m["kind"] == "follower" else -1)
                            for m in movers if m["kind"] in ("follower", "oncoming")]
                threat = in_band and any(
                    v > 0.3 and abs(pos[0] - x) < _PED_PAUSE_RANGE
                    and (pos[0] - x) * dirn > -2.0
                    for x, v, dirn in traffic
                )
                v = 0.0 if threat else mv["vy"]
                nv = v + 0.5 * noise * rng.standard_normal()
                positions[a, t] = pos
                headings[a, t] = -np.pi / 2 if mv["vy"] < 0 else np.pi / 2
                mv["pos"] = pos + np.array([0.0, nv * dt])
                continue
            if kind == "follower":
                pos = mv["pos"]
                lead = positions[0, t]
                gap = lead[0] - pos[0] - 5.5
                v_des = np.clip(gap / 1.2, 0.0, 5.0) if gap < 8.0 else ego.v_cruise
                mv["v"] += np.clip(v_des - mv["v"] + noise * rng.standard_normal(),
                                   -_VEHICLE_ACCEL * dt, _VEHICLE_ACCEL * dt)
                mv["v"] = max(mv["v"], 0.0)
                positions[a, t] = pos
                headings[a, t] = 0.0
                mv["pos"] = pos + np.array([mv["v"] * dt, 0.0])
                continue
            if kind == "oncoming":
                pos = mv["pos"]
                v_des = mv.get("v0", mv["v"])
                mv.setdefault("v0", v_des)
                if cross_x is not None:
                    time_gap = (pos[0] - cross_x) / max(mv["v"], 0.1)
                    ego_done = ego.s >= ego.total - _SLOT_DEPTH
                    if 0.0 < time_gap < 3.0 and not ego_done:
                        stop_at = cross_x + 6.0
                        remaining = max(pos[0] - stop_at, 0.0)
                        v_des = min(v_des, np.sqrt(2.0 * _VEHICLE_ACCEL * remaining))
                mv["v"] += np.clip(v_des - mv["v"] + noise * rng.standard_normal(),
                                   -_VEHICLE_ACCEL * dt, _VEHICLE_ACCEL * dt)
                mv["v"] = max(mv["v"], 0.0)
                positions[a, t] = pos
                headings[a, t] = np.pi
                mv["pos"] = pos + np.array([-mv["v"] * dt, 0.0])
                continue
        ego.step(dt, noise * rng.standard_normal())

    return _finalize_episode(config, plan, attrs, positions, headings, maneuver)


def _contacts(positions: np.ndarray, headings: np.ndarray,
              attrs: list[AgentAttr], walls: np.ndarray) -> bool:
    sizes = np.array([a.size for a in attrs])
    radii = np.array([a.safety_radius for a in attrs])
    corners = geom.footprint_corners(positions, headings,
                                     sizes[:, 0:1], sizes[:, 1:2])
    N = positions.shape[0]
    moving = [not np.allclose(positions[i], positions[i, 0]) for i in range(N)]
    for i in range(N):
        for j in range(i + 1, N):
            veh = attrs[i].category == "vehicle" or attrs[j].category == "vehicle"
            if veh and geom.rects_overlap(corners[i], corners[j]).any():
                return True
            if (moving[i] or moving[j]):
                d = np.linalg.norm(positions[i] - positions[j], axis=-1)
                if (d < radii[i] + radii[j]).any():
                    return True
    for i in range(N):
        if attrs[i].category == "vehicle":
            if geom.footprint_touches_segments(corners[i], walls).any():
                return True
    return False


def _state_history(positions: np.ndarray, headings: np.ndarray, dt: float) -> np.ndarray:
    """(N, T, 2)+(N, T) -> (N, T, 7) state rows [x, y, h, vx, vy, ax, ay]."""
    vel = np.gradient(positions, dt, axis=1)
    acc = np.gradient(vel, dt, axis=1)
    return np.concatenate([positions, headings[..., None], vel, acc], axis=-1)


def _to_ego_frame(states: np.ndarray, vmap: VectorMap, t_ref: int):
    origin = states[0, t_ref, 0:2].copy()
    theta = float(states[0, t_ref, 2])
    inv = geom.rot_matrix(theta).T
    out = states.copy()
    out[..., 0:2] = (out[..., 0:2] - origin) @ inv.T
    out[..., 2] = geom.wrap_angle(out[..., 2] - theta)
    out[..., 3:5] = out[..., 3:5] @ inv.T
    out[..., 5:7] = out[..., 5:7] @ inv.T

    polys = tuple((p - origin) @ inv.T for p in vmap.soft_polylines)
    segs = (vmap.hard_segments - origin) @ inv.T
    slots = tuple(
        Slot(center=tuple((np.asarray(s.center) - origin) @ inv.T),
             heading=float(geom.wrap_angle(s.heading - theta)),
             length=s.length, width=s.width)
        for s in vmap.slots
    )
    return out, VectorMap(soft_polylines=polys, hard_segments=segs, slots=slots)


def _finalize_episode(config: WorldConfig, plan: LotPlan, attrs: list[AgentAttr],
                      positions: np.ndarray, headings: np.ndarray,
                      maneuver: int) -> Episode | None:
    vmap = lot_map(plan)
    if _contacts(positions, headings, attrs, vmap.hard_segments):
        return None

    states = _state_history(positions, headings, config.dt)
    states, vmap = _to_ego_frame(states, vmap, config.t_past - 1)

    scene = Scene(dt=config.dt, attrs=tuple(attrs),
                  histories=states[:, : config.t_past], map=vmap)
    gt_futures = states[:, config.t_past:, 0:2].copy()
    episode = Episode(scene=scene, gt_futures=gt_futures,
                      gt_endpoint=gt_futures[0, -1].copy(),
                      intention=MANEUVERS[maneuver])
    if overlap_rate(gt_futures, scene):
        return None
    return episode


# -- datasets ----------------------------------------------------------------


def episode_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def generate_episodes(config: WorldConfig, seed: int, count: int,
                      start_index: int = 0) -> list[Episode]:
    return [simulate_episode(config, episode_rng(seed, start_index + i))
            for i in range(count)]


def make_dataset(config: WorldConfig, n_train: int, n_val: int,
                 out_dir: str | Path, seed: int) -> dict:
    """Write manifest.json plus episodes/NNNNNN.json; returns the manifest."""
    out = Path(out_dir)
    (out / "episodes").mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(n_train + n_val):
        ep = simulate_episode(config, episode_rng(seed, i))
        name = f"episodes/{i:06d}.json"
        (out / name).write_text(canonical_dumps(episode_to_json(ep)))
        names.append(name)
    manifest = {
        "format": "dataset/v1",
        "seed": seed,
        "n_train": n_train,
        "n_val": n_val,
        "train": names[:n_train],
        "val": names[n_train:],
        "world": {
            "lot_length": config.lot_length, "lot_width": config.lot_width,
            "slot_rows": config.slot_rows, "slot_cols": config.slot_cols,
            "n_agents_min": config.n_agents_min, "n_agents_max": config.n_agents_max,
            "pedestrian_fraction": config.pedestrian_fraction,
            "parked_fraction": config.parked_fraction,
            "policy_noise": config.policy_noise,
            "interaction_rate": config.interaction_rate,
            "maneuver_mix": list(config.maneuver_mix),
            "dt": config.dt, "t_past": config.t_past, "t_future": config.t_future,
        },
    }
    manifest["hash"] = json_sha256(manifest)
    (out / "manifest.json").write_text(canonical_dumps(manifest))
    return manifest


def load_dataset(path: str | Path) -> tuple[list[Episode], list[Episode], dict]:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    load = lambda name: episode_from_json(json.loads((root / name).read_text()))
    return ([load(n) for n in manifest["train"]],
            [load(n) for n in manifest["val"]], manifest)


# -- scripted probe scene ----------------------------------------------------


def yield_scenario(config: WorldConfig) -> tuple[Scene, np.ndarray, np.ndarray]:
    """A deterministic probe: ego mid-lane, one crossing pedestrian directly
    on the drive-through path, one pedestrian far from any plausible path.

    Returns (scene, drive_through_endpoint, park_endpoint) in scene frame.
    """
    rng = np.random.default_rng(0)
    plan = plan_lot(config, rng)
    vmap = lot_map(plan)
    dt, T_p = config.dt, config.t_past
    v_ego = 2.5

    x0 = 10.0
    t = np.arange(T_p) * dt
    ego_pos = np.stack([x0 + v_ego * t, np.full(T_p, plan.ego_y)], axis=1)
    ego_head = np.zeros(T_p)

    ego_last_x = ego_pos[-1, 0]
    cross_x = ego_last_x + 7.0
    ped_speed = 1.2
    ped_y = plan.ego_y + 1.0 + ped_speed * dt * np.arange(T_p)[::-1]
    near_pos = np.stack([np.full(T_p, cross_x), ped_y], axis=1)
    near_head = np.full(T_p, -np.pi / 2)

    far_pos = np.tile(np.array([4.0, plan.lane_y + plan.lane_half + 9.0]), (T_p, 1))
    far_head = np.full(T_p, 0.0)

    positions = np.stack([ego_pos, near_pos, far_pos])
    headings = np.stack([ego_head, near_head, far_head])
    states = _state_history(positions, headings, dt)
    states, vmap = _to_ego_frame(states, vmap, T_p - 1)

    attrs = (AgentAttr("vehicle", (4.6, 1.8), 1.05),
             AgentAttr("pedestrian", (0.5, 0.5), 0.4),
             AgentAttr("pedestrian", (0.5, 0.5), 0.4))
    scene = Scene(dt=dt, attrs=attrs, histories=states, map=vmap)

    horizon = config.t_future * dt * v_ego
    through_goal = np.array([horizon, 0.0])
    bank = [plan.slots[i] for i in plan.bottom_bank]
    ahead = [s for s in bank if 3.0 <= s.center[0] - ego_last_x <= horizon]
    slot = ahead[0] if ahead else bank[len(bank) // 2]
    park_goal = np.array([slot.center[0] - ego_last_x,
                          slot.center[1] - plan.ego_y])
    return scene, through_goal, park_goal
