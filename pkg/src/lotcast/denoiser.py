"""Score network and deterministic project-then-guide refinement.

The score network predicts the Gaussian noise added to a clean joint future
at a known level sigma, conditioned on the per-agent scene features, the
intention token endpoint, and a sinusoidal sigma embedding. Refinement
alternates, for each sigma on a decreasing schedule,

    Y <- Y - eps(Y, sigma)                 (projection)
    Y <- Y - eta * grad C(Y)               (guidance)

where C is the composite geometric potential. The guidance step backtracks
(eta halved, at most ``max_halvings`` times) whenever it would increase C,
and is skipped outright if no tried step length decreases it, so the
guidance phase never raises the potential. The operator is deterministic,
runs without building autodiff graphs, and aborts with the step index on any
non-finite intermediate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import DenoiserConfig, ModelConfig
from .nn import MLP, Module, Tensor, concat, no_grad
from .potentials import PotentialWeights, SceneGeometry


@dataclass(frozen=True)
class NoiseSchedule:
    sigmas: tuple[float, ...]
    etas: tuple[float, ...]

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=np.float64)
        e = np.asarray(self.etas, dtype=np.float64)
        if len(s) != len(e):
            raise ValueError("sigmas and etas must have equal length")
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(e))):
            raise ValueError("schedule values must be finite")
        if np.any(s <= 0) or np.any(np.diff(s) >= 0):
            raise ValueError("sigmas must be positive and strictly decreasing")
        if np.any(e < 0):
            raise ValueError("etas must be nonnegative")

    @classmethod
    def from_config(cls, cfg: DenoiserConfig) -> "NoiseSchedule":
        return cls(sigmas=tuple(cfg.sigmas()), etas=(cfg.eta,) * cfg.t_steps)


def sigma_embedding(sigma: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of noise levels; (B,) -> (B, dim)."""
    half = dim // 2
    freqs = 2.0 ** np.arange(half)
    angles = np.pi * sigma[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


class ScoreNet(Module):
    """Per-agent noise predictor eps(Y, sigma; h_i, g_k)."""

    def __init__(self, rng: np.random.Generator, model_cfg: ModelConfig,
                 cfg: DenoiserConfig):
        t2 = 2 * model_cfg.t_future
        d_in = t2 + model_cfg.d_h + model_cfg.d_tau + 2 * cfg.sigma_embed
        self.token_mlp = MLP(rng, [2, model_cfg.d_tau, model_cfg.d_tau])
        self.body = MLP(rng, [d_in] + [cfg.hidden] * cfg.depth + [t2],
                        zero_init_last=True)
        self.t_future = model_cfg.t_future
        self.sigma_embed = cfg.sigma_embed

    def __call__(self, futures: Tensor | np.ndarray, sigma: np.ndarray,
                 agent_context: np.ndarray, token_end: np.ndarray,
                 last_pos: np.ndarray, agent_mask: np.ndarray) -> Tensor:
        """Predict noise for (B, N, T, 2) futures; padded agents emit zeros."""
        y = futures if isinstance(futures, Tensor) else Tensor(futures)
        B, N, T, _ = y.shape
        rel = y - Tensor(last_pos[:, :, None, :])
        flat = rel.reshape((B, N, 2 * T))

        tau = self.token_mlp(Tensor(np.asarray(token_end, dtype=np.float64)))
        d_tau = tau.shape[-1]
        tau_b = tau.reshape((B, 1, d_tau)).broadcast_to((B, N, d_tau))
        sig = sigma_embedding(np.asarray(sigma, dtype=np.float64), 2 * self.sigma_embed)
        sig_b = np.broadcast_to(sig[:, None, :], (B, N, sig.shape[-1])).copy()

        x = concat([flat, Tensor(agent_context), tau_b, Tensor(sig_b)], axis=-1)
        eps = self.body(x).reshape((B, N, T, 2))
        keep = agent_mask[:, :, None, None].astype(eps.data.dtype)
        return eps * Tensor(np.broadcast_to(keep, eps.shape).copy())


def pretrain_step(net: ScoreNet, gt_futures: np.ndarray, agent_context: np.ndarray,
                  token_end: np.ndarray, last_pos: np.ndarray,
                  agent_mask: np.ndarray, schedule: NoiseSchedule,
                  rng: np.random.Generator) -> Tensor:
    """Denoising loss on one batch: mean squared error against drawn noise."""
    B, N, T, _ = gt_futures.shape
    lo, hi = schedule.sigmas[-1], schedule.sigmas[0]
    sigma = rng.uniform(lo, hi, size=B)
    noise = sigma[:, None, None, None] * rng.standard_normal((B, N, T, 2))
    noise *= agent_mask[:, :, None, None]
    eps = net(gt_futures + noise, sigma, agent_context, token_end, last_pos, agent_mask)
    resid = eps - Tensor(noise)
    denom = max(float(agent_mask.sum()) * T * 2, 1.0)
    return (resid * resid).sum() * (1.0 / denom)


def _check_finite(y: np.ndarray, step: int, phase: str) -> None:
    if not np.all(np.isfinite(y)):
        raise FloatingPointError(
            f"refinement produced non-finite values at step {step} ({phase})")


def _predict_noise(net: ScoreNet, y: np.ndarray, sigma: float,
                   agent_context: np.ndarray, token_end: np.ndarray,
                   geo: SceneGeometry) -> np.ndarray:
    B = 1
    N = y.shape[0]
    mask = np.ones((B, N), dtype=bool)
    eps = net(y[None], np.array([sigma]), agent_context[None], token_end[None],
              geo.last_pos[None], mask)
    return eps.data[0]


def guided_step(net: ScoreNet, y: np.ndarray, sigma: float, eta: float,
                geo: SceneGeometry, agent_context: np.ndarray,
                token_end: np.ndarray, weights: PotentialWeights,
                step: int = 0, max_halvings: int = 3) -> np.ndarray:
    """One projection followed by one backtracked guidance application."""
    with no_grad():
        y_half = y - _predict_noise(net, y, sigma, agent_context, token_end, geo)
    _check_finite(y_half, step, "projection")

    report = geo.composite(y_half, token_end, weights)
    if not np.any(report.gradient):
        return y_half
    c_half = report.total
    for k in range(max_halvings + 1):
        candidate = y_half - (eta / 2**k) * report.gradient
        _check_finite(candidate, step, "guidance")
        if geo.composite(candidate, token_end, weights).total <= c_half:
            return candidate
    return y_half


def refine(net: ScoreNet, y_raw: np.ndarray, geo: SceneGeometry,
           agent_context: np.ndarray, token_end: np.ndarray,
           schedule: NoiseSchedule, weights: PotentialWeights,
           max_halvings: int = 3) -> np.ndarray:
    """Deterministic project-then-guide refinement of one joint future.

    ``y_raw``: (N, T, 2) in the same frame as ``geo``; ``agent_context``:
    (N, d_h). The result is a new array; inputs are never mutated.
    """
    token_end = np.asarray(token_end, dtype=np.float64)
    y = np.array(y_raw, dtype=np.float64)
    _check_finite(y, -1, "input")
    before = geo.composite(y, token_end, weights).total
    for step, (sigma, eta) in enumerate(zip(schedule.sigmas, schedule.etas)):
        y = guided_step(net, y, sigma, eta, geo, agent_context, token_end,
                        weights, step=step, max_halvings=max_halvings)
    # the projection steps are free to explore, but the refinement as a whole
    # must never leave the trajectory worse off on the potential it descends
    if geo.composite(y, token_end, weights).total > before:
        return np.array(y_raw, dtype=np.float64)
    return y
