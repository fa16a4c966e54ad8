"""Composite geometric potential over joint futures, with analytic gradients.

Five hinge-style terms, each returning (value, dC/dY) for futures Y of shape
(N, T_f, 2):

  overlap   pairwise agent clearance:   sum_{t, i<j} [(r_i + r_j - |y_i - y_j|)+]^2
  obstacle  footprint-to-obstacle:      sum_{i,t}    [(m_obs - d_min)+]^2
  tube      ego corridor adherence:     sum_t        [(d(y_0t, l) - R_tube)+]^2
  endpoint  ego terminal anchoring:     |y_{0,Tf} - g|^2
  smooth    velocity/acceleration caps

Hinge subgradients at kinks are 0, and shape-contact configurations sit on a
flat 0-distance plateau with zero gradient. Obstacle gradients chain through
footprint headings, which are themselves derived from consecutive positions.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import geom
from .scene import Scene


@dataclass(frozen=True)
class PotentialWeights:
    w_ov: float = 1.0
    w_obs: float = 1.0
    w_tube: float = 1.0
    w_end: float = 1.0
    w_sm: float = 1.0
    m_obs: float = 0.3       # obstacle clearance margin, meters
    r_tube: float = 2.0      # corridor radius, meters
    v_max: float = 8.0       # speed cap, m/s
    a_max: float = 4.0       # acceleration cap, m/s^2

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name.startswith("w_") and v < 0:
                raise ValueError(f"{f.name} must be nonnegative")
            if not f.name.startswith("w_") and v <= 0:
                raise ValueError(f"{f.name} must be positive")


TERM_NAMES = ("overlap", "obstacle", "tube", "endpoint", "smooth")


@dataclass(frozen=True)
class SceneGeometry:
    """The raw arrays the potential terms need, detached from ``Scene``.

    Useful when futures live in a transformed frame (training batches) or
    when only padded batch rows are available.
    """

    radii: np.ndarray          # (N,)
    sizes: np.ndarray          # (N, 2)
    last_pos: np.ndarray       # (N, 2)
    last_heading: np.ndarray   # (N,)
    hard_segments: np.ndarray  # (S, 2, 2)
    dt: float

    @classmethod
    def from_scene(cls, scene: Scene) -> "SceneGeometry":
        return cls(radii=scene.radii(), sizes=scene.sizes(),
                   last_pos=scene.last_positions(),
                   last_heading=scene.last_headings(),
                   hard_segments=scene.map.hard_segments, dt=scene.dt)

    def composite(self, futures: np.ndarray, token: np.ndarray,
                  weights: "PotentialWeights" = None) -> "PotentialReport":
        weights = weights if weights is not None else PotentialWeights()
        return composite_arrays(futures, self.radii, self.sizes, self.last_pos,
                                self.last_heading, self.hard_segments, self.dt,
                                token, weights)

    def col_delta(self, futures: np.ndarray, delta: float) -> tuple[float, np.ndarray]:
        return col_delta_arrays(futures, self.radii, self.sizes, self.last_pos,
                                self.last_heading, self.hard_segments, delta)


@dataclass(frozen=True)
class PotentialReport:
    total: float
    per_term: dict[str, float]        # weighted contributions, keys TERM_NAMES
    gradient: np.ndarray              # (N, T_f, 2)

    def to_json(self) -> dict:
        return {"total": self.total, "per_term": dict(self.per_term)}


def c_overlap(futures: np.ndarray, radii: np.ndarray) -> tuple[float, np.ndarray]:
    """Pairwise clearance hinge; unordered agent pairs counted once."""
    futures = np.asarray(futures, dtype=np.float64)
    radii = np.asarray(radii, dtype=np.float64)
    N = futures.shape[0]
    grad = np.zeros_like(futures)
    if N < 2:
        return 0.0, grad
    iu, ju = np.triu_indices(N, 1)
    diff = futures[iu] - futures[ju]                 # (P, T, 2)
    dist = np.linalg.norm(diff, axis=-1)             # (P, T)
    rsum = (radii[iu] + radii[ju])[:, None]
    hinge = np.maximum(rsum - dist, 0.0)
    value = float((hinge ** 2).sum())
    live = (hinge > 0.0) & (dist > 0.0)              # coincident pair: zero subgradient
    if live.any():
        u = np.where(live[..., None], diff / np.where(dist, dist, 1.0)[..., None], 0.0)
        g = -2.0 * hinge[..., None] * u
        np.add.at(grad, iu, g)
        np.add.at(grad, ju, -g)
    return value, grad


def c_obstacle(futures: np.ndarray, sizes: np.ndarray, last_pos: np.ndarray,
               last_heading: np.ndarray, hard_segments: np.ndarray,
               m_obs: float) -> tuple[float, np.ndarray]:
    """Footprint-to-nearest-obstacle hinge with heading chain rule.

    Headings along the future are derived from consecutive displacements, so
    the distance responds both to translating a footprint and to turning it;
    gradients flow to every position involved.
    """
    futures = np.asarray(futures, dtype=np.float64)
    grad = np.zeros_like(futures)
    segs = np.asarray(hard_segments, dtype=np.float64)
    if segs.size == 0:
        return 0.0, grad
    N, T, _ = futures.shape
    headings, src = geom.headings_from_positions(last_pos, last_heading, futures)
    r_circ = 0.5 * np.hypot(sizes[:, 0], sizes[:, 1])

    # cheap lower bound: center distance minus circumradius; prune inactive rows
    d_center, _ = geom.points_to_segments(futures, segs)          # (N, T, S)
    candidate = (d_center.min(axis=-1) - r_circ[:, None]) < m_obs  # (N, T)
    if not candidate.any():
        return 0.0, grad
    ai, at = np.nonzero(candidate)
    corners = geom.footprint_corners(futures[ai, at], headings[ai, at],
                                     sizes[ai, 0], sizes[ai, 1])   # (K, 4, 2)
    dmin, q_rect, q_seg, contact = geom.footprint_segment_clearance(corners, segs)
    hinge = np.maximum(m_obs - dmin, 0.0)
    value = float((hinge ** 2).sum())

    live = (hinge > 0.0) & (~contact)        # contact sits on the 0 plateau
    if live.any():
        li, lt = ai[live], at[live]
        h = hinge[live]
        d = dmin[live]
        u = (q_rect[live] - q_seg[live]) / d[:, None]
        coeff = -2.0 * h                                           # dC/dd
        np.add.at(grad, (li, lt), coeff[:, None] * u)
        # turn response: d(dist)/d(heading) via the contact lever arm
        lever = q_rect[live] - futures[li, lt]
        perp = np.stack([-lever[:, 1], lever[:, 0]], axis=-1)
        dphi = coeff * (u * perp).sum(axis=-1)
        s = src[li, lt]
        chain = s >= 0
        if chain.any():
            ci, cs, cphi = li[chain], s[chain], dphi[chain]
            prev = np.where(cs[:, None] > 0,
                            futures[ci, np.maximum(cs - 1, 0)], last_pos[ci])
            disp = futures[ci, cs] - prev
            n2 = (disp ** 2).sum(axis=-1)
            datan = np.stack([-disp[:, 1], disp[:, 0]], axis=-1) / n2[:, None]
            gd = cphi[:, None] * datan
            np.add.at(grad, (ci, cs), gd)
            older = cs > 0
            if older.any():
                np.add.at(grad, (ci[older], cs[older] - 1), -gd[older])
    return value, grad


def c_tube(ego_future: np.ndarray, token: np.ndarray, ego_last: np.ndarray,
           r_tube: float) -> tuple[float, np.ndarray]:
    """Corridor hinge around the segment from the ego's last pose to the token."""
    ego_future = np.asarray(ego_future, dtype=np.float64)
    token = np.asarray(token, dtype=np.float64)
    ego_last = np.asarray(ego_last, dtype=np.float64)
    d, q, _ = geom.point_segment_closest(ego_future, ego_last, token)
    hinge = np.maximum(d - r_tube, 0.0)
    value = float((hinge ** 2).sum())
    grad = np.zeros_like(ego_future)
    live = hinge > 0.0                       # implies d >= r_tube > 0
    if live.any():
        u = (ego_future[live] - q[live]) / d[live, None]
        grad[live] = 2.0 * hinge[live, None] * u
    return value, grad


def c_endpoint(ego_final: np.ndarray, token: np.ndarray) -> tuple[float, np.ndarray]:
    """Squared distance from the ego's final position to the intention token."""
    diff = np.asarray(ego_final, dtype=np.float64) - np.asarray(token, dtype=np.float64)
    return float((diff ** 2).sum()), 2.0 * diff


def c_smooth(futures: np.ndarray, dt: float, v_max: float,
             a_max: float) -> tuple[float, np.ndarray]:
    """Hinges on finite-difference speed and acceleration magnitudes."""
    futures = np.asarray(futures, dtype=np.float64)
    grad = np.zeros_like(futures)
    value = 0.0
    v = (futures[:, 1:] - futures[:, :-1]) / dt      # (N, T-1, 2)
    sv = np.linalg.norm(v, axis=-1)
    hv = np.maximum(sv - v_max, 0.0)
    value += float((hv ** 2).sum())
    live = hv > 0.0                                  # implies sv >= v_max > 0
    if live.any():
        gv = np.zeros_like(v)
        gv[live] = 2.0 * hv[live, None] * (v[live] / sv[live, None]) / dt
        grad[:, 1:] += gv
        grad[:, :-1] -= gv
    if v.shape[1] >= 2:
        a = (v[:, 1:] - v[:, :-1]) / dt              # (N, T-2, 2)
        sa = np.linalg.norm(a, axis=-1)
        ha = np.maximum(sa - a_max, 0.0)
        value += float((ha ** 2).sum())
        live = ha > 0.0
        if live.any():
            ga = np.zeros_like(a)
            ga[live] = 2.0 * ha[live, None] * (a[live] / sa[live, None]) / dt ** 2
            grad[:, 2:] += ga
            grad[:, 1:-1] -= 2.0 * ga
            grad[:, :-2] += ga
    return value, grad


def composite_arrays(futures: np.ndarray, radii: np.ndarray, sizes: np.ndarray,
                     last_pos: np.ndarray, last_heading: np.ndarray,
                     hard_segments: np.ndarray, dt: float, token: np.ndarray,
                     weights: PotentialWeights = PotentialWeights()) -> PotentialReport:
    """Weighted sum of all five terms; raw-array variant of ``composite``."""
    futures = np.asarray(futures, dtype=np.float64)
    v_ov, g_ov = c_overlap(futures, radii)
    v_obs, g_obs = c_obstacle(futures, sizes, last_pos, last_heading,
                              hard_segments, weights.m_obs)
    v_tu, g_tu = c_tube(futures[0], token, last_pos[0], weights.r_tube)
    v_end, g_end = c_endpoint(futures[0, -1], token)
    v_sm, g_sm = c_smooth(futures, dt, weights.v_max, weights.a_max)

    per_term = {
        "overlap": weights.w_ov * v_ov,
        "obstacle": weights.w_obs * v_obs,
        "tube": weights.w_tube * v_tu,
        "endpoint": weights.w_end * v_end,
        "smooth": weights.w_sm * v_sm,
    }
    grad = weights.w_ov * g_ov + weights.w_obs * g_obs + weights.w_sm * g_sm
    grad[0] += weights.w_tube * g_tu
    grad[0, -1] += weights.w_end * g_end
    return PotentialReport(total=float(sum(per_term.values())),
                           per_term=per_term, gradient=grad)


def composite(futures: np.ndarray, scene: Scene, token: np.ndarray,
              weights: PotentialWeights = PotentialWeights()) -> PotentialReport:
    """Weighted sum of all five terms for one joint future."""
    return composite_arrays(futures, scene.radii(), scene.sizes(),
                            scene.last_positions(), scene.last_headings(),
                            scene.map.hard_segments, scene.dt, token, weights)


def col_delta_arrays(futures: np.ndarray, radii: np.ndarray, sizes: np.ndarray,
                     last_pos: np.ndarray, last_heading: np.ndarray,
                     hard_segments: np.ndarray, delta: float) -> tuple[float, np.ndarray]:
    """Raw-array variant of ``col_delta``."""
    futures = np.asarray(futures, dtype=np.float64)
    v_ov, g_ov = c_overlap(futures, radii + delta / 2.0)
    if delta > 0:
        v_obs, g_obs = c_obstacle(futures, sizes, last_pos, last_heading,
                                  hard_segments, delta)
    else:
        v_obs, g_obs = 0.0, np.zeros_like(futures)
    return v_ov + v_obs, g_ov + g_obs


def col_delta(futures: np.ndarray, scene: Scene,
              delta: float) -> tuple[float, np.ndarray]:
    """Collision-overlap penalty with clearance margin delta.

    Agent pair clearances are inflated by delta/2 per agent, and obstacle
    proximity is penalized within margin delta. At delta = 0 this is exactly
    the overlap term plus a zero-margin obstacle term.
    """
    return col_delta_arrays(np.asarray(futures, dtype=np.float64), scene.radii(),
                            scene.sizes(), scene.last_positions(),
                            scene.last_headings(), scene.map.hard_segments, delta)
