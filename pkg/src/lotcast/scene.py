"""Scene data model and the versioned "scene/v1" JSON schema.

A scene is the model's whole world: N agents with T_p-step state histories
(state = [x, y, heading, vx, vy, ax, ay], all in the ego-aligned frame),
plus a vector map of soft drivable boundaries, hard obstacle segments, and
parking-slot rectangles. Agent 0 is always the ego vehicle.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import geom

SCENE_FORMAT = "scene/v1"
PRED_FORMAT = "pred/v1"
STATE_DIM = 7  # x, y, heading, vx, vy, ax, ay
CATEGORIES = ("vehicle", "pedestrian")


@dataclass(frozen=True)
class AgentAttr:
    category: str
    size: tuple[float, float]          # (length, width) meters
    safety_radius: float

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown agent category {self.category!r}")
        if min(self.size) <= 0 or self.safety_radius <= 0:
            raise ValueError("agent size and safety radius must be positive")


@dataclass(frozen=True)
class Slot:
    center: tuple[float, float]
    heading: float
    length: float
    width: float

    def corners(self) -> np.ndarray:
        return geom.footprint_corners(np.asarray(self.center, dtype=np.float64),
                                      self.heading, self.length, self.width)


@dataclass(frozen=True)
class VectorMap:
    soft_polylines: tuple[np.ndarray, ...]   # each (V>=2, 2)
    hard_segments: np.ndarray                # (S, 2, 2); S may be 0
    slots: tuple[Slot, ...]

    def __post_init__(self):
        for pl in self.soft_polylines:
            if pl.ndim != 2 or pl.shape[0] < 2 or pl.shape[1] != 2:
                raise ValueError("each soft polyline needs >= 2 vertices of 2 coords")
        hs = self.hard_segments
        if hs.size and (hs.ndim != 3 or hs.shape[1:] != (2, 2)):
            raise ValueError("hard_segments must have shape (S, 2, 2)")
        if hs.size:
            lengths = np.linalg.norm(hs[:, 1] - hs[:, 0], axis=-1)
            if np.any(lengths <= 0):
                raise ValueError("hard segments must have nonzero length")
        for s in self.slots:
            if s.length <= 0 or s.width <= 0:
                raise ValueError("slot rectangles must be non-degenerate")


def empty_map() -> VectorMap:
    return VectorMap(soft_polylines=(), hard_segments=np.zeros((0, 2, 2)), slots=())


@dataclass(frozen=True)
class Scene:
    dt: float
    attrs: tuple[AgentAttr, ...]             # index 0 is the ego vehicle
    histories: np.ndarray                    # (N, T_p, STATE_DIM)
    map: VectorMap = field(default_factory=empty_map)

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        h = self.histories
        if h.ndim != 3 or h.shape[2] != STATE_DIM:
            raise ValueError(f"histories must have shape (N, T_p, {STATE_DIM})")
        if h.shape[0] != len(self.attrs) or h.shape[0] < 1:
            raise ValueError("histories and attrs must cover the same N >= 1 agents")
        if h.shape[1] < 1:
            raise ValueError("histories need at least one step")
        if not np.all(np.isfinite(h)):
            raise ValueError("histories contain non-finite values")
        if self.attrs[0].category != "vehicle":
            raise ValueError("agent 0 (ego) must be a vehicle")

    @property
    def n_agents(self) -> int:
        return self.histories.shape[0]

    @property
    def t_past(self) -> int:
        return self.histories.shape[1]

    def last_positions(self) -> np.ndarray:
        return self.histories[:, -1, 0:2]

    def last_headings(self) -> np.ndarray:
        return self.histories[:, -1, 2]

    def sizes(self) -> np.ndarray:
        return np.array([a.size for a in self.attrs], dtype=np.float64)

    def radii(self) -> np.ndarray:
        return np.array([a.safety_radius for a in self.attrs], dtype=np.float64)

    def categories(self) -> list[str]:
        return [a.category for a in self.attrs]


@dataclass(frozen=True)
class JointScene:
    """One joint future: positions for every agent over the horizon."""
    futures: np.ndarray                      # (N, T_f, 2)
    score: float

    def __post_init__(self):
        if self.futures.ndim != 3 or self.futures.shape[2] != 2:
            raise ValueError("futures must have shape (N, T_f, 2)")
        if not np.all(np.isfinite(self.futures)):
            raise ValueError("futures contain non-finite values")


@dataclass(frozen=True)
class Episode:
    """A scene plus realized future and the ego's realized intention."""
    scene: Scene
    gt_futures: np.ndarray                   # (N, T_f, 2)
    gt_endpoint: np.ndarray                  # (2,) ego position at T_p + T_f
    intention: str = ""                      # maneuver label, informational

    def __post_init__(self):
        if self.gt_futures.shape[0] != self.scene.n_agents:
            raise ValueError("gt futures must cover every agent")
        if self.gt_futures.ndim != 3 or self.gt_futures.shape[2] != 2:
            raise ValueError("gt_futures must have shape (N, T_f, 2)")


# -- scene/v1 JSON -------------------------------------------------------------


def scene_to_json(scene: Scene) -> dict[str, Any]:
    return {
        "format": SCENE_FORMAT,
        "dt": scene.dt,
        "agents": [
            {
                "category": a.category,
                "size": list(a.size),
                "safety_radius": a.safety_radius,
                "history": scene.histories[i].tolist(),
            }
            for i, a in enumerate(scene.attrs)
        ],
        "map": {
            "soft_polylines": [pl.tolist() for pl in scene.map.soft_polylines],
            "hard_segments": scene.map.hard_segments.tolist(),
            "slots": [
                {"center": list(s.center), "heading": s.heading,
                 "length": s.length, "width": s.width}
                for s in scene.map.slots
            ],
        },
    }


def scene_from_json(doc: dict[str, Any]) -> Scene:
    fmt = doc.get("format", SCENE_FORMAT)
    if fmt != SCENE_FORMAT:
        raise ValueError(f"unsupported scene format {fmt!r}")
    agents = doc["agents"]
    if not agents:
        raise ValueError("scene has no agents")
    histories = np.asarray([a["history"] for a in agents], dtype=np.float64)
    attrs = tuple(
        AgentAttr(category=a["category"], size=tuple(a["size"]),
                  safety_radius=float(a["safety_radius"]))
        for a in agents
    )
    m = doc.get("map") or {}
    vmap = VectorMap(
        soft_polylines=tuple(np.asarray(pl, dtype=np.float64)
                             for pl in m.get("soft_polylines", [])),
        hard_segments=np.asarray(m.get("hard_segments", []),
                                 dtype=np.float64).reshape(-1, 2, 2),
        slots=tuple(Slot(center=tuple(s["center"]), heading=float(s["heading"]),
                         length=float(s["length"]), width=float(s["width"]))
                    for s in m.get("slots", [])),
    )
    return Scene(dt=float(doc["dt"]), attrs=attrs, histories=histories, map=vmap)


def episode_to_json(ep: Episode) -> dict[str, Any]:
    doc = scene_to_json(ep.scene)
    doc["gt_futures"] = ep.gt_futures.tolist()
    doc["gt_endpoint"] = ep.gt_endpoint.tolist()
    doc["intention"] = ep.intention
    return doc


def episode_from_json(doc: dict[str, Any]) -> Episode:
    return Episode(
        scene=scene_from_json(doc),
        gt_futures=np.asarray(doc["gt_futures"], dtype=np.float64),
        gt_endpoint=np.asarray(doc["gt_endpoint"], dtype=np.float64),
        intention=doc.get("intention", ""),
    )


def canonical_dumps(obj: Any) -> str:
    """Deterministic JSON text: sorted keys, no whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def json_sha256(obj: Any) -> str:
    return hashlib.sha256(canonical_dumps(obj).encode("utf-8")).hexdigest()
