"""Scene encoding: agent histories, social pooling, and the vector map.

The encoder turns a batch of scenes into fixed-width features:

* per-agent temporal encoding (width-3 conv -> GRU) followed by one layer of
  masked agent-to-agent attention and a type-conditioned affine,
* a social feature ``f_social`` max-pooled over non-ego agents (zero vector
  when the ego is alone),
* a map summary ``m`` from two element streams (soft drivable boundaries
  incl. parking slots, hard obstacle segments), each embedded per element,
  gated by the ego feature, and masked-max-pooled so that duplicating an
  element never changes the result; empty streams fall back to a learned
  null embedding,
* the fused ego context ``c = MLP([f_0; f_social; m])`` and per-agent
  conditioning vectors ``h_i = [f_i; f_social; m]`` of width ``3 d``.

Scenes are re-canonicalized into the ego frame (last ego pose at the origin,
heading zero) during packing; the stored frame maps model outputs back.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import ModelConfig
from .geom import rot_matrix, wrap_angle
from .nn import MLP, Module, MultiHeadSelfAttention, Param, Tensor
from .nn.layers import GRU, Conv1dSame
from .nn.tensor import concat
from .potentials import SceneGeometry
from .scene import CATEGORIES, Episode, Scene

_NEG = -1e30  # additive mask bias for max-pools


@dataclass
class SceneBatch:
    """Padded numpy views of a list of scenes, all in their ego frames."""

    scenes: list[Scene]
    hist: np.ndarray          # (B, N, T_p, 8): x, y, cos h, sin h, vx, vy, ax, ay
    agent_mask: np.ndarray    # (B, N) bool
    category: np.ndarray      # (B, N) int index into CATEGORIES
    last_pos: np.ndarray      # (B, N, 2)
    last_heading: np.ndarray  # (B, N)
    sizes: np.ndarray         # (B, N, 2)
    radii: np.ndarray         # (B, N)
    soft_feat: np.ndarray     # (B, P, V, 4): vertex xy + forward difference
    soft_vmask: np.ndarray    # (B, P, V) bool
    soft_mask: np.ndarray     # (B, P) bool
    hard_feat: np.ndarray     # (B, S, 4): endpoints flattened
    hard_segs: np.ndarray     # (B, S, 2, 2)
    hard_mask: np.ndarray     # (B, S) bool
    origin: np.ndarray        # (B, 2) ego-frame origin in the source frame
    rot: np.ndarray           # (B, 2, 2) local->source rotation
    gt_futures: np.ndarray | None = None   # (B, N, T_f, 2), ego frame
    gt_endpoint: np.ndarray | None = None  # (B, 2), ego frame
    intention: list[str] | None = None     # (B,) maneuver labels, informational
    _dt: float = field(default=0.0)

    @property
    def size(self) -> int:
        return self.hist.shape[0]

    @property
    def n_max(self) -> int:
        return self.hist.shape[1]

    @property
    def dt(self) -> float:
        return self._dt

    def to_source(self, pts: np.ndarray) -> np.ndarray:
        """Map ego-frame points (B, ..., 2) back into the source frame."""
        extra = pts.ndim - 2
        rot = self.rot.reshape((self.size,) + (1,) * (extra - 1) + (2, 2))
        origin = self.origin.reshape((self.size,) + (1,) * (extra - 1) + (2,))
        return np.einsum("...ij,...j->...i", rot, pts) + origin

    def n_valid(self, b: int) -> int:
        return int(self.agent_mask[b].sum())

    def geometry(self, b: int) -> SceneGeometry:
        """Ego-frame potential-term inputs for batch row ``b`` (valid agents)."""
        n = self.n_valid(b)
        return SceneGeometry(
            radii=self.radii[b, :n], sizes=self.sizes[b, :n],
            last_pos=self.last_pos[b, :n], last_heading=self.last_heading[b, :n],
            hard_segments=self.hard_segs[b][self.hard_mask[b]], dt=self._dt,
        )


def _slot_polyline(slot) -> np.ndarray:
    corners = slot.corners()
    return np.concatenate([corners, corners[:1]], axis=0)  # closed, 5 vertices


def _to_local(scene: Scene):
    """Return (origin, rot local->source) and the ego-frame copy of the data."""
    origin = scene.last_positions()[0].copy()
    theta = float(scene.last_headings()[0])
    rot = rot_matrix(theta)          # local -> source
    inv = rot.T                      # source -> local

    hist = scene.histories.copy()
    hist[..., 0:2] = (hist[..., 0:2] - origin) @ inv.T
    hist[..., 2] = wrap_angle(hist[..., 2] - theta)
    hist[..., 3:5] = hist[..., 3:5] @ inv.T
    hist[..., 5:7] = hist[..., 5:7] @ inv.T

    polys = [(_p - origin) @ inv.T for _p in scene.map.soft_polylines]
    polys += [(_slot_polyline(s) - origin) @ inv.T for s in scene.map.slots]
    segs = (scene.map.hard_segments - origin) @ inv.T
    return origin, rot, hist, polys, segs


def pack_scenes(scenes: Sequence[Scene]) -> SceneBatch:
    if not scenes:
        raise ValueError("cannot pack an empty scene list")
    t_past = scenes[0].t_past
    dt = scenes[0].dt
    for s in scenes:
        if s.t_past != t_past or abs(s.dt - dt) > 1e-12:
            raise ValueError("scenes in a batch must share t_past and dt")

    B = len(scenes)
    N = max(s.n_agents for s in scenes)
    locals_ = [_to_local(s) for s in scenes]
    P = max(1, max(len(loc[3]) for loc in locals_))
    V = max([2] + [len(p) for loc in locals_ for p in loc[3]])
    S = max(1, max(loc[4].shape[0] for loc in locals_))

    hist = np.zeros((B, N, t_past, 8), dtype=np.float64)
    agent_mask = np.zeros((B, N), dtype=bool)
    category = np.zeros((B, N), dtype=np.int64)
    last_pos = np.zeros((B, N, 2))
    last_heading = np.zeros((B, N))
    sizes = np.zeros((B, N, 2))
    radii = np.zeros((B, N))
    soft_feat = np.zeros((B, P, V, 4))
    soft_vmask = np.zeros((B, P, V), dtype=bool)
    soft_mask = np.zeros((B, P), dtype=bool)
    hard_feat = np.zeros((B, S, 4))
    hard_segs = np.zeros((B, S, 2, 2))
    hard_mask = np.zeros((B, S), dtype=bool)
    origin = np.zeros((B, 2))
    rot = np.zeros((B, 2, 2))

    for b, (scene, (org, r, h, polys, segs)) in enumerate(zip(scenes, locals_)):
        n = scene.n_agents
        hist[b, :n, :, 0:2] = h[..., 0:2]
        hist[b, :n, :, 2] = np.cos(h[..., 2])
        hist[b, :n, :, 3] = np.sin(h[..., 2])
        hist[b, :n, :, 4:8] = h[..., 3:7]
        agent_mask[b, :n] = True
        category[b, :n] = [CATEGORIES.index(c) for c in scene.categories()]
        last_pos[b, :n] = h[:, -1, 0:2]
        last_heading[b, :n] = h[:, -1, 2]
        sizes[b, :n] = scene.sizes()
        radii[b, :n] = scene.radii()
        for p, poly in enumerate(polys):
            v = len(poly)
            soft_feat[b, p, :v, 0:2] = poly
            soft_feat[b, p, : v - 1, 2:4] = np.diff(poly, axis=0)
            soft_vmask[b, p, :v] = True
            soft_mask[b, p] = True
        ns = segs.shape[0]
        if ns:
            hard_segs[b, :ns] = segs
            hard_feat[b, :ns] = segs.reshape(ns, 4)
            hard_mask[b, :ns] = True
        origin[b] = org
        rot[b] = r

    return SceneBatch(
        scenes=list(scenes), hist=hist, agent_mask=agent_mask, category=category,
        last_pos=last_pos, last_heading=last_heading, sizes=sizes, radii=radii,
        soft_feat=soft_feat, soft_vmask=soft_vmask, soft_mask=soft_mask,
        hard_feat=hard_feat, hard_segs=hard_segs, hard_mask=hard_mask,
        origin=origin, rot=rot, _dt=dt,
    )


def pack_episodes(episodes: Sequence[Episode]) -> SceneBatch:
    batch = pack_scenes([ep.scene for ep in episodes])
    B, N = batch.size, batch.n_max
    t_f = episodes[0].gt_futures.shape[1]
    gt = np.zeros((B, N, t_f, 2))
    gt_end = np.zeros((B, 2))
    inv = np.swapaxes(batch.rot, -1, -2)  # source -> local
    for b, ep in enumerate(episodes):
        n = ep.gt_futures.shape[0]
        gt[b, :n] = (ep.gt_futures - batch.origin[b]) @ inv[b].T
        gt_end[b] = (ep.gt_endpoint - batch.origin[b]) @ inv[b].T
    batch.gt_futures = gt
    batch.gt_endpoint = gt_end
    batch.intention = [ep.intention for ep in episodes]
    return batch


@dataclass
class SceneEmbedding:
    agent_feats: Tensor   # (B, N, d) type-conditioned per-agent features
    social: Tensor        # (B, d)
    map_summary: Tensor   # (B, d)
    context: Tensor       # (B, d_c) fused ego context
    agent_context: Tensor  # (B, N, 3d) conditioning vector per agent


def _masked_max(x: Tensor, mask: np.ndarray, axis: int) -> Tensor:
    bias = np.where(mask, 0.0, _NEG)[..., None]
    return (x + Tensor(np.broadcast_to(bias, x.shape).copy())).max(axis=axis)


class _MapStream(Module):
    """Per-element embedding, ego-feature gating, duplication-proof pooling."""

    def __init__(self, rng, d_elem_in: int, d: int, d_m: int):
        self.embed = MLP(rng, [d_elem_in, d_m, d_m])
        self.gate = MLP(rng, [d_m + d, d_m, d_m])
        self.null = Param(0.01 * rng.standard_normal(d_m))

    def pool(self, elem: Tensor, mask: np.ndarray, ego: Tensor) -> Tensor:
        B, E = elem.shape[0], elem.shape[1]
        ego_b = ego.reshape((B, 1, ego.shape[-1])).broadcast_to((B, E, ego.shape[-1]))
        gated = self.gate(concat([elem, ego_b], axis=-1))
        pooled = _masked_max(gated, mask, axis=1)
        occupied = mask.any(axis=1).astype(pooled.data.dtype)[:, None]
        return pooled * Tensor(occupied) + self.null.t * Tensor(1.0 - occupied)


class SceneEncoder(Module):
    """See the module docstring; all forwards are batched and mask-aware."""

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        d, d_m = cfg.d, cfg.d_m
        if 2 * d_m != d:
            raise ValueError("map summary needs 2 * d_m == d")
        self.conv = Conv1dSame(rng, 8, d)
        self.gru = GRU(rng, d, d)
        self.attn = MultiHeadSelfAttention(rng, d, cfg.n_heads)
        self.type_scale = Param(np.ones((len(CATEGORIES), d)))
        self.type_shift = Param(np.zeros((len(CATEGORIES), d)))
        self.soft_stream = _MapStream(rng, 4, d, d_m)
        self.hard_stream = _MapStream(rng, 4, d, d_m)
        self.fuse = MLP(rng, [3 * d, 2 * d, cfg.d_c])

    def encode_agents(self, batch: SceneBatch) -> Tensor:
        x = Tensor(batch.hist)
        f = self.gru(self.conv(x).relu())                     # (B, N, d)
        f = self.attn(f, batch.agent_mask)
        scale = self.type_scale.t[batch.category]             # (B, N, d)
        shift = self.type_shift.t[batch.category]
        f = f * scale + shift
        return f * Tensor(batch.agent_mask[..., None].astype(f.data.dtype))

    def social_pool(self, agent_feats: Tensor, batch: SceneBatch) -> Tensor:
        others = batch.agent_mask.copy()
        others[:, 0] = False
        pooled = _masked_max(agent_feats, others, axis=1)
        occupied = others.any(axis=1).astype(pooled.data.dtype)[:, None]
        return pooled * Tensor(occupied)                      # alone -> zeros

    def encode_map(self, batch: SceneBatch, ego_feat: Tensor) -> Tensor:
        soft_v = self.soft_stream.embed(Tensor(batch.soft_feat))  # (B, P, V, d_m)
        soft_elem = _masked_max(soft_v, batch.soft_vmask, axis=2)
        soft = self.soft_stream.pool(soft_elem, batch.soft_mask, ego_feat)
        hard_elem = self.hard_stream.embed(Tensor(batch.hard_feat))
        hard = self.hard_stream.pool(hard_elem, batch.hard_mask, ego_feat)
        return concat([soft, hard], axis=-1)                  # (B, 2 d_m) = (B, d)

    def __call__(self, batch: SceneBatch) -> SceneEmbedding:
        feats = self.encode_agents(batch)
        ego = feats[:, 0, :]
        social = self.social_pool(feats, batch)
        m = self.encode_map(batch, ego)
        context = self.fuse(concat([ego, social, m], axis=-1))
        B, N = batch.size, batch.n_max
        d = ego.shape[-1]
        tiled = concat([social, m], axis=-1).reshape((B, 1, 2 * d)).broadcast_to((B, N, 2 * d))
        agent_context = concat([feats, tiled], axis=-1)       # (B, N, 3d)
        return SceneEmbedding(agent_feats=feats, social=social, map_summary=m,
                              context=context, agent_context=agent_context)
