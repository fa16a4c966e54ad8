"""Token-conditioned joint prediction: condition, decode, assemble, select.

Stage 2 turns one intention token into a joint scene forecast:

1. ``TokenConditioner`` embeds the token endpoint, FiLM-modulates every
   agent's conditioning vector (identity at initialization), computes a
   sigmoid exposure gate from each agent's geometry relative to the ego's
   intended line of travel, and scales features through a small gating
   network driven by that scalar.
2. ``MarginalDecoder`` emits M marginal futures per agent as cumulative
   displacement sums anchored at the last observed position, plus a mode
   feature and a mode score per future.
3. ``assemble_scenes`` beam-searches over per-agent mode choices (agents in
   descending exposure order) to build K joint candidates; the partial-scene
   cost accumulates one agent at a time as ``-score(mode)`` plus a weighted
   pairwise-overlap penalty against already-placed agents. With a beam at
   least as wide as the full product space this is exhaustive enumeration.
4. ``SceneSelector`` scores each candidate from the ego context and the sum
   of chosen mode features; ties resolve to the lowest candidate index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .encoder import SceneBatch
from .geom import point_segment_closest
from .nn import MLP, Linear, Module, Param, Tensor, concat, softmax


@dataclass
class Conditioned:
    features: Tensor      # (B, N, d_h) token-conditioned per-agent features
    exposure: Tensor      # (B, N) exposure gate values in (0, 1)
    token_embed: Tensor   # (B, d_tau)

    @property
    def exposure_values(self) -> np.ndarray:
        return self.exposure.data


@dataclass
class Marginals:
    trajs: Tensor         # (B, N, M, T_f, 2) absolute positions
    mode_feats: Tensor    # (B, N, M, d_m)
    mode_scores: Tensor   # (B, N, M)


@dataclass
class Assembled:
    """Joint candidates for one scene: (K, N) mode choices plus beam costs."""

    choices: np.ndarray   # (K, N) int, zeros for padded agents
    costs: np.ndarray     # (K,)
    padded: bool          # True when fewer than K distinct candidates existed


class TokenConditioner(Module):
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        d_h = cfg.d_h
        self.token_mlp = MLP(rng, [2, cfg.d_tau, cfg.d_tau])
        self.film_gamma = Linear(rng, cfg.d_tau, d_h, zero_init=True)
        self.film_gamma.b.data = np.ones(d_h)       # start as the identity map
        self.film_delta = Linear(rng, cfg.d_tau, d_h, zero_init=True)
        self.gate_alpha = Param(np.array([cfg.gate_alpha_init]))
        self.gate_beta = Param(np.array([cfg.gate_beta_init]))
        self.gate_r_path = Param(np.array([cfg.gate_r_path_init]))
        self.gate_r_end = Param(np.array([cfg.gate_r_end_init]))
        self.gate_mlp = MLP(rng, [1, 16, d_h], zero_init_last=True)
        self.gate_mlp.layers[-1].b.data = 2.0 * np.ones(d_h)  # open gates at start
        self.cfg = cfg

    def exposure(self, batch: SceneBatch, token_end: np.ndarray) -> Tensor:
        """Per-agent exposure to the ego's intended line of travel, (B, N)."""
        ego_last = batch.last_pos[:, 0:1, :]
        goal = np.asarray(token_end, dtype=np.float64)[:, None, :]
        d_line, _, _ = point_segment_closest(batch.last_pos, ego_last, goal)
        d_end = np.linalg.norm(batch.last_pos - goal, axis=-1)

        r_min = self.cfg.gate_r_min
        r_path = (self.gate_r_path.t - r_min).relu() + r_min
        r_end = (self.gate_r_end.t - r_min).relu() + r_min
        act = (self.gate_alpha.t * (r_path - Tensor(d_line)).relu()
               + self.gate_beta.t * (r_end - Tensor(d_end)).relu()
               + self.cfg.gate_bias)
        return act.sigmoid()

    def __call__(self, agent_context: Tensor, batch: SceneBatch,
                 token_end: np.ndarray) -> Conditioned:
        B, N, d_h = agent_context.shape
        tau = self.token_mlp(Tensor(np.asarray(token_end, dtype=np.float64)))
        gamma = self.film_gamma(tau).reshape((B, 1, d_h))
        delta = self.film_delta(tau).reshape((B, 1, d_h))
        u = agent_context * gamma.broadcast_to((B, N, d_h)) + delta.broadcast_to((B, N, d_h))
        e = self.exposure(batch, token_end)
        gate = self.gate_mlp(e.reshape((B, N, 1))).sigmoid()
        return Conditioned(features=u * gate, exposure=e, token_embed=tau)


class MarginalDecoder(Module):
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        self.out_per_mode = 2 * cfg.t_future + cfg.d_m + 1
        self.head = MLP(rng, [cfg.d_h, 256, cfg.m_modes * self.out_per_mode])
        self.cfg = cfg

    def __call__(self, conditioned: Conditioned, batch: SceneBatch) -> Marginals:
        cfg = self.cfg
        B, N = conditioned.features.shape[:2]
        M, T = cfg.m_modes, cfg.t_future
        out = self.head(conditioned.features).reshape((B, N, M, self.out_per_mode))
        # per-step displacements: last observed velocity as a kinematic prior,
        # plus the learned residual
        prior = np.broadcast_to(
            (batch.hist[:, :, -1, 4:6] * batch.dt)[:, :, None, None, :],
            (B, N, M, T, 2))
        disp = Tensor(np.ascontiguousarray(prior)) + out[..., : 2 * T].reshape((B, N, M, T, 2))
        anchor = Tensor(batch.last_pos).reshape((B, N, 1, 1, 2))
        trajs = anchor.broadcast_to((B, N, M, T, 2)) + disp.cumsum(axis=3)
        return Marginals(
            trajs=trajs,
            mode_feats=out[..., 2 * T: 2 * T + cfg.d_m],
            mode_scores=out[..., -1],
        )


def exposure_order(exposure: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Valid agent indices in descending exposure order (ties: lower index)."""
    idx = np.flatnonzero(valid)
    return idx[np.lexsort((idx, -exposure[idx]))]


def pair_overlap_costs(trajs: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Overlap penalty between every agent-mode pair: (N, N, M, M)."""
    diff = trajs[:, None, :, None] - trajs[None, :, None, :]   # (N, N, M, M, T, 2)
    dist = np.linalg.norm(diff, axis=-1)
    r_sum = radii[:, None, None, None, None] + radii[None, :, None, None, None]
    gap = np.maximum(r_sum - dist, 0.0)
    return (gap**2).sum(axis=-1)


def assemble_scenes(
    trajs: np.ndarray,          # (N, M, T, 2)
    mode_scores: np.ndarray,    # (N, M)
    radii: np.ndarray,          # (N,)
    valid: np.ndarray,          # (N,) bool
    order: np.ndarray,          # valid agent indices, most exposed first
    top_r: int,
    k_scene: int,
    beam_width: int,
    w_beam: float,
) -> Assembled:
    if beam_width < k_scene:
        raise ValueError("beam too narrow")
    N, M = mode_scores.shape
    overlap = pair_overlap_costs(trajs, radii)
    ranked = np.stack([np.lexsort((np.arange(M), -mode_scores[i])) for i in range(N)])

    beam: list[tuple[float, tuple[int, ...]]] = [(0.0, ())]
    for pos, i in enumerate(order):
        grown: list[tuple[float, tuple[int, ...]]] = []
        for cost, assign in beam:
            for m in ranked[i, :top_r]:
                inc = -float(mode_scores[i, m])
                for prev_pos, j in enumerate(order[:pos]):
                    inc += w_beam * float(overlap[i, j, m, assign[prev_pos]])
                grown.append((cost + inc, assign + (int(m),)))
        grown.sort(key=lambda e: (e[0], e[1]))
        beam = grown[:beam_width]

    padded = len(beam) < k_scene
    while len(beam) < k_scene:
        beam.append(beam[-1])
    beam = beam[:k_scene]

    choices = np.zeros((k_scene, N), dtype=np.int64)
    for k, (_, assign) in enumerate(beam):
        for pos, i in enumerate(order):
            choices[k, i] = assign[pos]
    return Assembled(choices=choices,
                     costs=np.array([c for c, _ in beam]),
                     padded=padded)


def round_robin_choices(n_agents: int, m_modes: int, k_scene: int) -> np.ndarray:
    """Interaction-blind candidate assembly: candidate k pairs agent i with
    mode (k + i) mod M. The no-joint-search ablation baseline."""
    k = np.arange(k_scene)[:, None]
    i = np.arange(n_agents)[None, :]
    return ((k + i) % m_modes).astype(np.int64)


class SceneSelector(Module):
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        self.head = MLP(rng, [cfg.d_c + cfg.d_m, cfg.d, 1])
        self.cfg = cfg

    def logits(self, context: Tensor, mode_feats: Tensor,
               choices: np.ndarray, valid: np.ndarray) -> Tensor:
        """Candidate logits (B, K) from context plus summed chosen features."""
        B, N, M, d_m = mode_feats.shape
        K = choices.shape[1]
        expanded = mode_feats.reshape((B, 1, N, M, d_m)).broadcast_to((B, K, N, M, d_m))
        idx = np.broadcast_to(choices[:, :, :, None, None], (B, K, N, 1, d_m)).copy()
        chosen = expanded.take_along_axis(idx, axis=3).reshape((B, K, N, d_m))
        keep = valid.astype(chosen.data.dtype)[:, None, :, None]
        summed = (chosen * Tensor(np.broadcast_to(keep, (B, K, N, d_m)).copy())).sum(axis=2)
        ctx = context.reshape((B, 1, context.shape[-1])).broadcast_to((B, K, context.shape[-1]))
        return self.head(concat([ctx, summed], axis=-1)).reshape((B, K))

    def probs(self, logits: Tensor) -> np.ndarray:
        return softmax(logits, axis=-1).data

    @staticmethod
    def top1(probs: np.ndarray) -> np.ndarray:
        return probs.argmax(axis=-1)            # ties -> lowest index
