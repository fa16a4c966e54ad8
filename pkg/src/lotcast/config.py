"""Configuration: model dimensions, training schedules, generator layout.

Every run is driven by one ``RunConfig`` whose canonical-JSON SHA-256 hash
stamps checkpoints, logs, and reproducibility records. Defaults follow the
method's published operating point (K_intent=6, M=6, K_scene=6, p_cf=0.5,
t_steps=5, AdamW 1e-4 cosine); hidden widths are free parameters.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .potentials import PotentialWeights
from .scene import json_sha256

TEACHER_MODES = ("none", "ema_only", "ema_unsafe_denoiser", "ema_sgd")
CF_STRATEGIES = ("ranking", "random", "gt_noise")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64               # agent feature width
    d_e: int = 32             # mode embedding width
    d_tau: int = 32           # token embedding width
    d_m: int = 32             # map element / mode feature width
    d_c: int = 64             # fused context width
    n_heads: int = 4
    k_intent: int = 6         # intention tokens proposed by Stage 1
    m_modes: int = 6          # marginal futures per agent
    k_scene: int = 6          # joint scene candidates
    top_r: int = 6            # marginals per agent entering the beam
    beam_width: int = 24
    w_beam: float = 1.0       # overlap penalty weight in the beam cost
    t_past: int = 10
    t_future: int = 10
    # exposure gate: alpha, beta, R_path, R_end are learnable (clamped >= min);
    # the bias is fixed so far-from-path agents rest well below e = 0.5
    gate_alpha_init: float = 1.0
    gate_beta_init: float = 1.0
    gate_r_path_init: float = 3.0
    gate_r_end_init: float = 5.0
    gate_r_min: float = 0.1
    gate_bias: float = -2.0
    gate_sharp_init: float = 6.0
    gate_mid_init: float = 0.4
    # Stage-1 loss weights
    lambda_xy: float = 1.0
    lambda_cls: float = 0.5
    lambda_div: float = 0.1
    sigma_div: float = 2.0    # meters, diversity repulsion bandwidth
    sigma_cf_noise: float = 1.5  # meters, gt_noise counterfactual jitter

    @property
    def d_h(self) -> int:
        return 3 * self.d     # [agent feat; social; map summary]

    def __post_init__(self):
        if not (1 <= self.top_r <= self.m_modes):
            raise ValueError("top_r must lie in [1, m_modes]")
        if self.beam_width < self.k_scene:
            raise ValueError("beam too narrow")
        if min(self.d, self.d_e, self.d_tau, self.d_m, self.d_c) <= 0:
            raise ValueError("widths must be positive")
        if self.d % self.n_heads:
            raise ValueError("d must divide across attention heads")
        if 2 * self.d_m != self.d:
            raise ValueError("map summary width requires 2 * d_m == d")


@dataclass(frozen=True)
class DenoiserConfig:
    hidden: int = 128
    depth: int = 2
    t_steps: int = 5
    sigma_hi: float = 1.0
    sigma_lo: float = 0.1
    eta: float = 0.05
    max_halvings: int = 3
    sigma_embed: int = 8

    def sigmas(self) -> list[float]:
        if self.t_steps == 1:
            return [self.sigma_hi]
        step = (self.sigma_hi - self.sigma_lo) / (self.t_steps - 1)
        return [self.sigma_hi - i * step for i in range(self.t_steps)]


@dataclass(frozen=True)
class Stage2Config:
    p_cf: float = 0.5
    tau_ema: float = 0.995
    delta: float = 0.2        # clearance margin in CoL_delta, meters
    lambda_raw: float = 1.0
    lambda_cons: float = 0.5
    lambda_safe: float = 1.0
    lambda_kd: float = 1.0
    lambda_marginal: float = 1.0   # L_SUP: winner-takes-all marginal term
    lambda_selector: float = 0.5   # L_SUP: selector cross-entropy term
    lambda_joint: float = 1.0      # L_SUP: selected-scene L2 term
    epochs: int = 20
    batch_size: int = 8
    cf_strategy: str = "ranking"
    use_selector: bool = True      # joint selection (beam + learned selector)
    use_sgd: bool = True           # safety-guided denoiser: consistency + refine
    use_ckd: bool = True
    teacher_mode: str = "ema_sgd"

    def __post_init__(self):
        if not 0.0 <= self.p_cf <= 1.0:
            raise ValueError("p_cf must lie in [0, 1]")
        if not 0.0 <= self.tau_ema < 1.0:
            raise ValueError("tau_ema must lie in [0, 1)")
        for name in ("lambda_raw", "lambda_cons", "lambda_safe", "lambda_kd",
                     "lambda_marginal", "lambda_selector", "lambda_joint"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.teacher_mode not in TEACHER_MODES:
            raise ValueError(f"teacher_mode must be one of {TEACHER_MODES}")
        if self.cf_strategy not in CF_STRATEGIES:
            raise ValueError(f"cf_strategy must be one of {CF_STRATEGIES}")


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-4
    weight_decay: float = 0.01
    stage1_epochs: int = 20
    denoiser_epochs: int = 20
    batch_size: int = 8


@dataclass(frozen=True)
class WorldConfig:
    lot_length: float = 50.0
    lot_width: float = 30.0
    slot_rows: int = 2
    slot_cols: int = 8
    n_agents_min: int = 2
    n_agents_max: int = 5
    pedestrian_fraction: float = 0.25
    parked_fraction: float = 0.4
    policy_noise: float = 0.3
    interaction_rate: float = 0.6   # chance of seeding an agent on the ego route
    maneuver_mix: tuple[float, float, float] = (0.35, 0.35, 0.3)
    dt: float = 0.4
    t_past: int = 10
    t_future: int = 10

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if abs(sum(self.maneuver_mix) - 1.0) > 1e-9:
            raise ValueError("maneuver mix must sum to 1")
        if self.n_agents_min > self.n_agents_max or self.n_agents_min < 1:
            raise ValueError("agent count range invalid")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    train: TrainConfig = field(default_factory=TrainConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    weights: PotentialWeights = field(default_factory=PotentialWeights)
    map_zero_positive_ap: str = "zero"   # "zero" | "exclude" for mAP samples
    miss_threshold: float = 2.0          # meters, per-agent FDE miss cutoff

    def to_json(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        return json_sha256(self.to_json())


def _build(cls, data: dict[str, Any]):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            v = data[f.name]
            if isinstance(v, list):
                v = tuple(v)
            kwargs[f.name] = v
    return cls(**kwargs)


def run_config_from_json(data: dict[str, Any]) -> RunConfig:
    sections = {
        "model": ModelConfig, "denoiser": DenoiserConfig, "stage2": Stage2Config,
        "train": TrainConfig, "world": WorldConfig, "weights": PotentialWeights,
    }
    unknown = set(data) - set(sections) - {"map_zero_positive_ap", "miss_threshold"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    kwargs: dict[str, Any] = {
        name: _build(cls, data.get(name, {})) for name, cls in sections.items()
    }
    if "map_zero_positive_ap" in data:
        kwargs["map_zero_positive_ap"] = data["map_zero_positive_ap"]
    if "miss_threshold" in data:
        kwargs["miss_threshold"] = float(data["miss_threshold"])
    cfg = RunConfig(**kwargs)
    if cfg.map_zero_positive_ap not in ("zero", "exclude"):
        raise ValueError("map_zero_positive_ap must be 'zero' or 'exclude'")
    return cfg


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as f:
        return run_config_from_json(json.load(f))
