"""Ego intention tokens: a bank of goal proposals with calibrated scores.

Stage 1 learns ``K`` mode embeddings; each is fused with the scene context
to propose an endpoint (the intention token's anchor) and a logit. Training
is winner-takes-all on the closest endpoint with a cross-entropy term on the
winner's logit and a pairwise repulsion that keeps proposals spread out:

    L = lambda_xy * SmoothL1(g_hat_k*, g) + lambda_cls * CE(logits, k*)
        + lambda_div * sum_{k != k'} exp(-||g_hat_k - g_hat_k'||^2 / sigma_div^2)

Counterfactual sampling supports three strategies (``ranking``, ``random``,
``gt_noise``); a bank with a single mode has no counterfactual to offer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .nn import MLP, Linear, Module, Param, Tensor, concat, log_softmax, smooth_l1, softmax


@dataclass
class IntentionSet:
    """Proposals for a batch: endpoints (B, K, 2) and logits (B, K)."""

    endpoints: Tensor
    logits: Tensor

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits, axis=-1).data


@dataclass(frozen=True)
class Token:
    """One conditioning token: an endpoint and its provenance in the bank."""

    endpoint: np.ndarray          # (2,)
    index: int | None             # bank index, None for synthetic tokens
    prob: float = 0.0


class IntentionTokenizer(Module):
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        self.embeddings = Param(0.1 * rng.standard_normal((cfg.k_intent, cfg.d_e)))
        self.mode_mlp = MLP(rng, [cfg.d_c + cfg.d_e, cfg.d, cfg.d])
        self.endpoint_head = Linear(rng, cfg.d, 2)
        self.logit_head = Linear(rng, cfg.d, 1)
        self.cfg = cfg

    def propose_tokens(self, context: Tensor) -> IntentionSet:
        B = context.shape[0]
        K, d_e = self.embeddings.data.shape
        ctx = context.reshape((B, 1, context.shape[-1])).broadcast_to((B, K, context.shape[-1]))
        emb = self.embeddings.t.reshape((1, K, d_e)).broadcast_to((B, K, d_e))
        h = self.mode_mlp(concat([ctx, emb], axis=-1))
        endpoints = self.endpoint_head(h)                       # (B, K, 2)
        logits = self.logit_head(h).reshape((B, K))
        return IntentionSet(endpoints=endpoints, logits=logits)

    def stage1_loss(self, proposals: IntentionSet, gt_endpoint: np.ndarray) -> tuple[Tensor, dict]:
        """Winner-takes-all loss; returns (scalar, term breakdown incl. winners)."""
        cfg = self.cfg
        ends, logits = proposals.endpoints, proposals.logits
        B, K = logits.shape

        dists = np.linalg.norm(ends.data - gt_endpoint[:, None, :], axis=-1)
        winner = dists.argmin(axis=1)                           # ties -> lowest index

        picked = ends.take_along_axis(winner[:, None, None].repeat(2, axis=2), axis=1)
        resid = picked.reshape((B, 2)) - Tensor(gt_endpoint)
        l_xy = smooth_l1(resid).mean()

        logp = log_softmax(logits, axis=-1)
        l_cls = -logp.take_along_axis(winner[:, None], axis=1).mean()

        diff = ends.reshape((B, K, 1, 2)) - ends.reshape((B, 1, K, 2))
        sq = (diff * diff).sum(axis=-1)                         # (B, K, K)
        off_diag = 1.0 - np.eye(K)
        l_div = ((sq * (-1.0 / cfg.sigma_div**2)).exp() * Tensor(off_diag)).sum() * (1.0 / B)

        total = cfg.lambda_xy * l_xy + cfg.lambda_cls * l_cls + cfg.lambda_div * l_div
        terms = {"xy": float(l_xy.data), "cls": float(l_cls.data),
                 "div": float(l_div.data), "winner": winner}
        return total, terms


def token_bank(proposals: IntentionSet, row: int = 0) -> list[Token]:
    """Tokens of one batch row, most probable first (ties: lower index first)."""
    ends = proposals.endpoints.data[row]
    probs = proposals.probs[row]
    order = np.lexsort((np.arange(len(probs)), -probs))
    return [Token(endpoint=ends[k].copy(), index=int(k), prob=float(probs[k]))
            for k in order]


def sample_counterfactual(
    bank: list[Token],
    gt_index: int,
    gt_endpoint: np.ndarray,
    strategy: str,
    rng: np.random.Generator,
    sigma_noise: float,
) -> Token | None:
    """Pick an intention other than the realized one (None if impossible)."""
    if strategy == "gt_noise":
        jitter = sigma_noise * rng.standard_normal(2)
        return Token(endpoint=np.asarray(gt_endpoint, dtype=np.float64) + jitter,
                     index=None)
    alternatives = [t for t in bank if t.index != gt_index]
    if not alternatives:
        return None
    if strategy == "ranking":
        return alternatives[0]                  # bank is sorted by probability
    if strategy == "random":
        return alternatives[int(rng.integers(len(alternatives)))]
    raise ValueError(f"unknown counterfactual strategy: {strategy}")
