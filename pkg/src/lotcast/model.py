"""Model assembly: component construction, persistence, and the full
scene -> joint-prediction pipeline.

A trained model is a directory of four checkpoints plus its configuration:

* ``tokenizer.ckpt`` — the intention encoder/tokenizer trained first and
  frozen afterwards (also conditions the refinement network),
* ``student.ckpt`` — the conditioned joint predictor (encoder, token
  conditioner, marginal decoder, scene selector),
* ``teacher.ckpt`` — the EMA mirror of the student used for distillation,
* ``denoiser.ckpt`` — the guided refinement noise predictor.

Prediction runs encode -> tokenize -> condition -> decode -> assemble ->
select, optionally refining every joint candidate, and reports results in
the source frame of the input scene.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, run_config_from_json
from .denoiser import NoiseSchedule, ScoreNet, refine
from .encoder import SceneBatch, SceneEncoder, pack_scenes
from .nn import Param
from .nn.ckpt import file_sha256, load_into, save_checkpoint
from .nn.optim import copy_params
from .nn.tensor import no_grad
from .potentials import PotentialReport
from .predictor import (MarginalDecoder, SceneSelector, TokenConditioner,
                        assemble_scenes, exposure_order, round_robin_choices)
from .scene import Scene
from .tokenizer import IntentionTokenizer, Token, token_bank

CHECKPOINTS = ("tokenizer.ckpt", "student.ckpt", "teacher.ckpt", "denoiser.ckpt")


@dataclass
class ModelState:
    cfg: RunConfig
    stage1_encoder: SceneEncoder
    tokenizer: IntentionTokenizer
    student_encoder: SceneEncoder
    conditioner: TokenConditioner
    decoder: MarginalDecoder
    selector: SceneSelector
    teacher_encoder: SceneEncoder
    teacher_conditioner: TokenConditioner
    teacher_decoder: MarginalDecoder
    teacher_selector: SceneSelector
    scorenet: ScoreNet
    schedule: NoiseSchedule = field(init=False)

    def __post_init__(self):
        self.schedule = NoiseSchedule.from_config(self.cfg.denoiser)

    @classmethod
    def new(cls, cfg: RunConfig, seed: int) -> "ModelState":
        streams = np.random.SeedSequence(seed).spawn(7)
        rngs = [np.random.default_rng(s) for s in streams]
        mc = cfg.model
        state = cls(
            cfg=cfg,
            stage1_encoder=SceneEncoder(rngs[0], mc),
            tokenizer=IntentionTokenizer(rngs[1], mc),
            student_encoder=SceneEncoder(rngs[2], mc),
            conditioner=TokenConditioner(rngs[3], mc),
            decoder=MarginalDecoder(rngs[4], mc),
            selector=SceneSelector(rngs[5], mc),
            teacher_encoder=SceneEncoder(rngs[2], mc),
            teacher_conditioner=TokenConditioner(rngs[3], mc),
            teacher_decoder=MarginalDecoder(rngs[4], mc),
            teacher_selector=SceneSelector(rngs[5], mc),
            scorenet=ScoreNet(rngs[6], mc, cfg.denoiser),
        )
        copy_params(state.teacher_params(), state.student_params())
        return state

    # -- parameter groups ---------------------------------------------------

    def tokenizer_params(self) -> dict[str, Param]:
        return {**self.stage1_encoder.params("encoder"),
                **self.tokenizer.params("tokenizer")}

    def student_params(self) -> dict[str, Param]:
        return {**self.student_encoder.params("encoder"),
                **self.conditioner.params("conditioner"),
                **self.decoder.params("decoder"),
                **self.selector.params("selector")}

    def teacher_params(self) -> dict[str, Param]:
        return {**self.teacher_encoder.params("encoder"),
                **self.teacher_conditioner.params("conditioner"),
                **self.teacher_decoder.params("decoder"),
                **self.teacher_selector.params("selector")}

    def denoiser_params(self) -> dict[str, Param]:
        return self.scorenet.params("scorenet")

    def _groups(self) -> dict[str, dict[str, Param]]:
        return {"tokenizer.ckpt": self.tokenizer_params(),
                "student.ckpt": self.student_params(),
                "teacher.ckpt": self.teacher_params(),
                "denoiser.ckpt": self.denoiser_params()}

    # -- persistence ----------------------------------------------------------

    def save(self, out_dir: str | Path) -> dict[str, str]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        h = self.cfg.config_hash()
        for name, params in self._groups().items():
            save_checkpoint(out / name, params, h)
        (out / "config.json").write_text(
            json.dumps(self.cfg.to_json(), indent=2, sort_keys=True))
        return checkpoint_hashes(out)

    @classmethod
    def load(cls, model_dir: str | Path, seed: int = 0) -> "ModelState":
        root = Path(model_dir)
        cfg = run_config_from_json(json.loads((root / "config.json").read_text()))
        state = cls.new(cfg, seed)
        h = cfg.config_hash()
        for name, params in state._groups().items():
            load_into(params, root / name, expect_config_hash=h)
        return state


def checkpoint_hashes(model_dir: str | Path) -> dict[str, str]:
    root = Path(model_dir)
    return {name: file_sha256(root / name)
            for name in CHECKPOINTS if (root / name).exists()}


# -- prediction ----------------------------------------------------------------


@dataclass
class JointPrediction:
    """K_scene joint futures for one scene, in the scene's source frame."""

    token: Token
    tokens: list[Token]             # full bank, most probable first
    candidates: np.ndarray          # (K, N, T_f, 2) after optional refinement
    raw_candidates: np.ndarray      # (K, N, T_f, 2) decoder output
    probs: np.ndarray               # (K,) selector probabilities
    exposures: np.ndarray           # (N,) gate activations in [0, 1]
    choices: np.ndarray             # (K, N) marginal mode per agent
    padded: bool                    # beam returned fewer than K distinct scenes
    refined: bool
    reports: list[PotentialReport]          # composite potential per candidate
    raw_reports: list[PotentialReport]

    @property
    def top1(self) -> int:
        return int(self.probs.argmax())


def propose(state: ModelState, batch: SceneBatch, row: int = 0) -> list[Token]:
    """The frozen tokenizer's intention bank for one packed scene."""
    with no_grad():
        emb = state.stage1_encoder(batch)
        proposals = state.tokenizer.propose_tokens(emb.context)
    return token_bank(proposals, row)


def predict(state: ModelState, scene: Scene, token_index: int | None = None,
            token_endpoint: np.ndarray | None = None,
            refine_output: bool = True) -> JointPrediction:
    """Full pipeline on one scene.

    The conditioning token is, in order of precedence: an explicit endpoint
    (scene frame), an index into the tokenizer's bank, or the bank's most
    probable entry.
    """
    cfg = state.cfg.model
    batch = pack_scenes([scene])
    tokens = propose(state, batch, 0)
    if token_endpoint is not None:
        token = Token(endpoint=np.asarray(token_endpoint, dtype=np.float64),
                      index=None, prob=float("nan"))
    elif token_index is not None:
        if not 0 <= token_index < len(tokens):
            raise ValueError(f"token index {token_index} out of range "
                             f"[0, {len(tokens)})")
        token = next(t for t in tokens if t.index == token_index)
    else:
        token = tokens[0]
    token_end = token.endpoint[None]

    use_selector = state.cfg.stage2.use_selector
    with no_grad():
        s1_context = state.stage1_encoder(batch).agent_context.data
        emb = state.student_encoder(batch)
        cond = state.conditioner(emb.agent_context, batch, token_end)
        marginals = state.decoder(cond, batch)

        valid = batch.agent_mask[0]
        exposure = cond.exposure.data[0]
        if use_selector:
            order = exposure_order(exposure, valid)
            assembled = assemble_scenes(
                marginals.trajs.data[0], marginals.mode_scores.data[0],
                batch.radii[0], valid, order, top_r=cfg.top_r,
                k_scene=cfg.k_scene, beam_width=cfg.beam_width, w_beam=cfg.w_beam)
            choices, padded = assembled.choices, assembled.padded
            logits = state.selector.logits(emb.context, marginals.mode_feats,
                                           choices[None], batch.agent_mask)
            probs = state.selector.probs(logits)[0]
        else:
            choices = round_robin_choices(batch.n_max, cfg.m_modes, cfg.k_scene)
            padded = False
            probs = np.full(cfg.k_scene, 1.0 / cfg.k_scene)

    n = batch.n_valid(0)
    trajs = marginals.trajs.data[0]                     # (N, M, T, 2)
    raw = trajs[np.arange(trajs.shape[0])[None, :], choices]
    geo = batch.geometry(0)
    weights = state.cfg.weights
    raw_reports = [geo.composite(raw[k, :n], token.endpoint, weights)
                   for k in range(raw.shape[0])]

    out = raw
    reports = raw_reports
    if refine_output:
        out = raw.copy()
        for k in range(raw.shape[0]):
            out[k, :n] = refine(state.scorenet, raw[k, :n], geo,
                                s1_context[0, :n], token.endpoint,
                                state.schedule, weights)
        reports = [geo.composite(out[k, :n], token.endpoint, weights)
                   for k in range(out.shape[0])]

    return JointPrediction(
        token=token, tokens=tokens,
        candidates=batch.to_source(out[None])[0],
        raw_candidates=batch.to_source(raw[None])[0],
        probs=probs, exposures=exposure[:n],
        choices=choices, padded=padded,
        refined=refine_output, reports=reports, raw_reports=raw_reports)
