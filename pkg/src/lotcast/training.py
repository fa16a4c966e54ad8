"""Two-stage training.

Stage 1 fits the intention tokenizer (encoder + token heads) with the
winner-takes-all endpoint loss. The refinement network is then pretrained to
denoise ground-truth futures conditioned on the frozen Stage-1 features.
Stage 2 trains the conditioned joint predictor:

* supervised branch — winner-takes-all marginal regression with mode-score
  classification, selector cross-entropy toward the min-FDE candidate, joint
  L2 on the selected scene, a stop-gradient consistency term toward the
  refined prediction, and a clearance penalty,
* counterfactual branch (drawn per batch with probability ``p_cf``) — the
  student's top-1 scene under a non-realized token is pulled toward the EMA
  teacher's (optionally refined) top-1 scene under the same token, plus the
  clearance penalty.

Only the student receives gradients; the teacher changes only through the
EMA rule, and the tokenizer and refinement network stay frozen throughout
Stage 2.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig
from .denoiser import pretrain_step, refine
from .encoder import SceneBatch, pack_episodes
from .metrics import MISS_THRESHOLD, Prediction, evaluate
from .model import ModelState, predict
from .nn import Tensor
from .nn.optim import AdamW, ema_update
from .nn.tensor import external_grad_op, log_softmax, no_grad, smooth_l1
from .potentials import PotentialWeights
from .predictor import (Conditioned, Marginals, assemble_scenes, exposure_order,
                        round_robin_choices)
from .scene import Episode
from .tokenizer import Token, sample_counterfactual, token_bank

_UNGUIDED = PotentialWeights(w_ov=0.0, w_obs=0.0, w_tube=0.0, w_end=0.0, w_sm=0.0)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start: start + batch_size]


def _elem_mask(batch: SceneBatch, t_f: int) -> np.ndarray:
    return batch.agent_mask[:, :, None, None].astype(np.float64)


def _masked_mse(pred: Tensor, target: np.ndarray, batch: SceneBatch,
                row_mask: np.ndarray | None = None) -> Tensor:
    """Mean squared error over valid agents' future points."""
    mask = np.broadcast_to(_elem_mask(batch, pred.shape[2]), pred.shape).copy()
    if row_mask is not None:
        mask = mask * row_mask[:, None, None, None]
    diff = (pred - Tensor(target)) * Tensor(mask)
    denom = max(float(mask.sum()), 1.0)
    return (diff * diff).sum() * (1.0 / denom)


def _gather_joint(trajs: Tensor, modes: np.ndarray) -> Tensor:
    """Select one mode per agent: (B, N, M, T, 2) x (B, N) -> (B, N, T, 2)."""
    B, N, M, T, _ = trajs.shape
    idx = np.broadcast_to(modes[:, :, None, None, None], (B, N, 1, T, 2)).copy()
    return trajs.take_along_axis(idx, axis=2).reshape((B, N, T, 2))


@dataclass
class PolicyForward:
    """One pass of the conditioned predictor plus candidate assembly."""

    cond: Conditioned
    marginals: Marginals
    choices: np.ndarray          # (B, K, N) mode assignments
    logits: Tensor | None        # (B, K) selector logits (None when disabled)
    probs: np.ndarray            # (B, K)
    top1: np.ndarray             # (B,)


def _forward_policy(encoder, conditioner, decoder, selector, batch: SceneBatch,
                    token_end: np.ndarray, cfg: RunConfig,
                    use_selector: bool) -> PolicyForward:
    mc = cfg.model
    emb = encoder(batch)
    cond = conditioner(emb.agent_context, batch, token_end)
    marginals = decoder(cond, batch)

    B, N = batch.size, batch.n_max
    choices = np.zeros((B, mc.k_scene, N), dtype=np.int64)
    trajs = marginals.trajs.data
    scores = marginals.mode_scores.data
    for b in range(B):
        valid = batch.agent_mask[b]
        if use_selector:
            order = exposure_order(cond.exposure.data[b], valid)
            assembled = assemble_scenes(
                trajs[b], scores[b], batch.radii[b], valid, order,
                top_r=mc.top_r, k_scene=mc.k_scene,
                beam_width=mc.beam_width, w_beam=mc.w_beam)
            choices[b] = assembled.choices
        else:
            choices[b] = round_robin_choices(N, mc.m_modes, mc.k_scene)

    if use_selector:
        logits = selector.logits(emb.context, marginals.mode_feats,
                                 choices, batch.agent_mask)
        probs = selector.probs(logits)
    else:
        logits = None
        probs = np.full((B, mc.k_scene), 1.0 / mc.k_scene)
    top1 = probs.argmax(axis=-1)
    return PolicyForward(cond=cond, marginals=marginals, choices=choices,
                         logits=logits, probs=probs, top1=top1)


def _candidate_fde(candidates: np.ndarray, gt: np.ndarray,
                   agent_mask: np.ndarray) -> np.ndarray:
    """Per-candidate FDE (mean over valid agents): (B, K, N, T, 2) -> (B, K)."""
    err = np.linalg.norm(candidates[..., -1, :] - gt[:, None, :, -1, :], axis=-1)
    mask = agent_mask[:, None, :]
    return (err * mask).sum(-1) / np.maximum(mask.sum(-1), 1)


def _all_candidates(trajs: np.ndarray, choices: np.ndarray) -> np.ndarray:
    """(B, N, M, T, 2) x (B, K, N) -> (B, K, N, T, 2), numpy only."""
    B, N = trajs.shape[:2]
    return trajs[np.arange(B)[:, None, None], np.arange(N)[None, None, :], choices]


def _safety_penalty(y_sel: Tensor, batch: SceneBatch, delta: float,
                    row_mask: np.ndarray | None = None) -> Tensor:
    """Batched clearance penalty via the analytic collision-overlap gradient."""
    B = batch.size
    total = Tensor(0.0)
    rows = 0
    for b in range(B):
        if row_mask is not None and not row_mask[b]:
            continue
        n = batch.n_valid(b)
        value, grad = batch.geometry(b).col_delta(y_sel.data[b, :n], delta)
        total = total + external_grad_op(y_sel[b, :n], value, grad)
        rows += 1
    return total * (1.0 / max(rows, 1))


def supervised_branch(state: ModelState, batch: SceneBatch) -> tuple[Tensor, dict]:
    """Eq.-style L_GT on one packed episode batch (gt token = true endpoint)."""
    cfg = state.cfg
    s2 = cfg.stage2
    gt = batch.gt_futures
    token_end = batch.gt_endpoint

    fw = _forward_policy(state.student_encoder, state.conditioner, state.decoder,
                         state.selector, batch, token_end, cfg, s2.use_selector)

    # winner-takes-all marginal regression + mode classification
    trajs = fw.marginals.trajs
    B, N, M, T, _ = trajs.shape
    d2 = ((trajs.data - gt[:, :, None]) ** 2).sum(-1).mean(-1)     # (B, N, M)
    winner = d2.argmin(-1)
    y_win = _gather_joint(trajs, winner)
    resid = (y_win - Tensor(gt)) * Tensor(
        np.broadcast_to(_elem_mask(batch, T), y_win.shape).copy())
    n_valid = max(float(batch.agent_mask.sum()) * T * 2, 1.0)
    l_wta = smooth_l1(resid).sum() * (1.0 / n_valid)

    log_modes = log_softmax(fw.marginals.mode_scores, axis=-1)
    idx = winner[:, :, None]
    picked = log_modes.take_along_axis(idx, axis=2).reshape((B, N))
    amask = batch.agent_mask.astype(np.float64)
    l_mode = -(picked * Tensor(amask)).sum() * (1.0 / max(amask.sum(), 1.0))
    l_marginal = l_wta + l_mode

    # selector cross-entropy toward the min-FDE candidate + joint L2 on top-1
    y_sel = _gather_joint(trajs, fw.choices[np.arange(B), fw.top1])
    if s2.use_selector:
        cand = _all_candidates(trajs.data, fw.choices)
        labels = _candidate_fde(cand, gt, batch.agent_mask).argmin(-1)
        log_p = log_softmax(fw.logits, axis=-1)
        l_sel = -log_p.take_along_axis(labels[:, None], axis=1).mean()
        l_joint = _masked_mse(y_sel, gt, batch)
    else:
        l_sel = Tensor(0.0)
        l_joint = Tensor(0.0)

    l_sup = (s2.lambda_marginal * l_marginal + s2.lambda_selector * l_sel
             + s2.lambda_joint * l_joint)

    # stop-gradient consistency toward the refined top-1 scene
    if s2.use_sgd and s2.lambda_cons > 0:
        with no_grad():
            s1_ctx = state.stage1_encoder(batch).agent_context.data
        target = y_sel.data.copy()
        for b in range(B):
            n = batch.n_valid(b)
            target[b, :n] = refine(state.scorenet, y_sel.data[b, :n],
                                   batch.geometry(b), s1_ctx[b, :n],
                                   token_end[b], state.schedule, cfg.weights)
        l_cons = _masked_mse(y_sel, target, batch)
    else:
        l_cons = Tensor(0.0)

    l_safe = (_safety_penalty(y_sel, batch, s2.delta)
              if s2.lambda_safe > 0 else Tensor(0.0))

    total = (s2.lambda_raw * l_sup + s2.lambda_cons * l_cons
             + s2.lambda_safe * l_safe)
    terms = {"l_sup": float(l_sup.data), "l_cons": float(l_cons.data),
             "l_safe": float(l_safe.data), "l_gt": float(total.data)}
    return total, terms


def _counterfactual_tokens(state: ModelState, batch: SceneBatch,
                           rng: np.random.Generator):
    """Per-row counterfactual endpoints from the frozen tokenizer bank."""
    s2 = state.cfg.stage2
    with no_grad():
        emb = state.stage1_encoder(batch)
        proposals = state.tokenizer.propose_tokens(emb.context)
    ends = np.array(batch.gt_endpoint, dtype=np.float64)
    mask = np.zeros(batch.size, dtype=bool)
    for b in range(batch.size):
        bank = token_bank(proposals, b)
        gt_idx = int(np.linalg.norm(
            proposals.endpoints.data[b] - batch.gt_endpoint[b], axis=-1).argmin())
        tok = sample_counterfactual(bank, gt_idx, batch.gt_endpoint[b],
                                    s2.cf_strategy, rng,
                                    state.cfg.model.sigma_cf_noise)
        if tok is not None:
            ends[b] = tok.endpoint
            mask[b] = True
    return ends, mask


def ckd_branch(state: ModelState, batch: SceneBatch,
               rng: np.random.Generator) -> tuple[Tensor, dict]:
    """Counterfactual distillation: student top-1 toward teacher top-1."""
    cfg = state.cfg
    s2 = cfg.stage2
    cf_end, cf_mask = _counterfactual_tokens(state, batch, rng)
    if not cf_mask.any():
        zero = Tensor(0.0)
        return zero, {"l_kd": 0.0, "kd_rows": 0}

    if s2.teacher_mode != "none":
        with no_grad():
            tf = _forward_policy(state.teacher_encoder, state.teacher_conditioner,
                                 state.teacher_decoder, state.teacher_selector,
                                 batch, cf_end, cfg, s2.use_selector)
            t_raw = _all_candidates(tf.marginals.trajs.data, tf.choices)[
                np.arange(batch.size), tf.top1]
            s1_ctx = state.stage1_encoder(batch).agent_context.data
        target = t_raw.copy()
        if s2.teacher_mode in ("ema_unsafe_denoiser", "ema_sgd"):
            weights = cfg.weights if s2.teacher_mode == "ema_sgd" else _UNGUIDED
            for b in range(batch.size):
                if not cf_mask[b]:
                    continue
                n = batch.n_valid(b)
                target[b, :n] = refine(state.scorenet, t_raw[b, :n],
                                       batch.geometry(b), s1_ctx[b, :n],
                                       cf_end[b], state.schedule, weights)
    else:
        target = None

    sf = _forward_policy(state.student_encoder, state.conditioner, state.decoder,
                         state.selector, batch, cf_end, cfg, s2.use_selector)
    y_stu = _gather_joint(sf.marginals.trajs,
                          sf.choices[np.arange(batch.size), sf.top1])

    row = cf_mask.astype(np.float64)
    l_match = (_masked_mse(y_stu, target, batch, row_mask=row)
               if target is not None else Tensor(0.0))
    l_safe = (_safety_penalty(y_stu, batch, s2.delta, row_mask=cf_mask)
              if s2.lambda_safe > 0 else Tensor(0.0))
    total = s2.lambda_kd * l_match + s2.lambda_safe * l_safe
    terms = {"l_kd": float(total.data), "kd_rows": int(cf_mask.sum())}
    return total, terms


def stage2_step(state: ModelState, batch: SceneBatch, opt: AdamW,
                rng: np.random.Generator) -> dict:
    """One optimizer step of L_S2 = L_GT + 1{CF} * L_KD, then the EMA update."""
    s2 = state.cfg.stage2
    opt.zero_grad()
    l_gt, terms = supervised_branch(state, batch)
    # drawn before the use_ckd gate so ablation toggles see identical streams
    cf = bool(rng.uniform() < s2.p_cf) and s2.use_ckd
    if cf:
        l_kd, kd_terms = ckd_branch(state, batch, rng)
        terms.update(kd_terms)
        total = l_gt + l_kd
    else:
        terms["l_kd"] = 0.0
        total = l_gt
    total.backward()
    lr = opt.step()
    ema_update(state.teacher_params(), state.student_params(), s2.tau_ema)
    terms.update({"loss": float(total.data), "cf": bool(cf), "lr": lr})
    return terms


def evaluate_model(state: ModelState, episodes: Sequence[Episode],
                   refine_output: bool | None = None,
                   limit: int | None = None) -> tuple[dict, list]:
    """Oracle/final metric table of the full pipeline on a validation set."""
    if refine_output is None:
        refine_output = state.cfg.stage2.use_sgd
    subset = list(episodes)[:limit] if limit else list(episodes)

    def predict_fn(ep: Episode) -> Prediction:
        p = predict(state, ep.scene, refine_output=refine_output)
        return Prediction(candidates=p.candidates, probs=p.probs)

    return evaluate(subset, predict_fn, threshold=MISS_THRESHOLD,
                    zero_positive=state.cfg.map_zero_positive_ap)


def _append_jsonl(path: str | Path | None, record: dict) -> None:
    if path is None:
        return
    with open(path, "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def run_stage2(state: ModelState, train: Sequence[Episode],
               val: Sequence[Episode], seed: int,
               log_path: str | Path | None = None,
               val_limit: int = 128) -> list[dict]:
    """Full Stage-2 loop; tokenizer and refinement network stay frozen."""
    cfg = state.cfg
    s2 = cfg.stage2
    # separate streams so the batch order is identical across ablation toggles
    shuffle_ss, branch_ss = np.random.SeedSequence([seed, 2]).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    branch_rng = np.random.default_rng(branch_ss)
    n_batches = max(1, -(-len(train) // s2.batch_size))
    opt = AdamW(state.student_params(), base_lr=cfg.train.base_lr,
                total_steps=s2.epochs * n_batches,
                weight_decay=cfg.train.weight_decay)
    log: list[dict] = []
    for epoch in range(s2.epochs):
        sums = {"l_gt": 0.0, "l_kd": 0.0}
        cf_count = 0
        count = 0
        for idx in _batches(len(train), s2.batch_size, shuffle_rng):
            batch = pack_episodes([train[i] for i in idx])
            terms = stage2_step(state, batch, opt, branch_rng)
            sums["l_gt"] += terms["l_gt"]
            sums["l_kd"] += terms["l_kd"]
            cf_count += int(terms["cf"])
            count += 1
        table, _ = evaluate_model(state, val, limit=val_limit)
        record = {"epoch": epoch, "l_gt": sums["l_gt"] / count,
                  "l_kd": sums["l_kd"] / count, "cf_rate": cf_count / count,
                  "val": table}
        log.append(record)
        _append_jsonl(log_path, record)
    return log


def train_stage1(state: ModelState, train: Sequence[Episode], seed: int,
                 log_path: str | Path | None = None) -> list[dict]:
    """Fit the intention tokenizer; everything else is untouched."""
    cfg = state.cfg
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    epochs = cfg.train.stage1_epochs
    bs = cfg.train.batch_size
    n_batches = max(1, -(-len(train) // bs))
    opt = AdamW(state.tokenizer_params(), base_lr=cfg.train.base_lr,
                total_steps=epochs * n_batches,
                weight_decay=cfg.train.weight_decay)
    log: list[dict] = []
    for epoch in range(epochs):
        sums = {"loss": 0.0, "xy": 0.0, "cls": 0.0, "div": 0.0}
        count = 0
        for idx in _batches(len(train), bs, rng):
            batch = pack_episodes([train[i] for i in idx])
            opt.zero_grad()
            emb = state.stage1_encoder(batch)
            proposals = state.tokenizer.propose_tokens(emb.context)
            loss, terms = state.tokenizer.stage1_loss(proposals, batch.gt_endpoint)
            loss.backward()
            opt.step()
            for k in ("xy", "cls", "div"):
                sums[k] += terms[k]
            sums["loss"] += float(loss.data)
            count += 1
        record = {"epoch": epoch,
                  **{k: v / count for k, v in sums.items()}}
        log.append(record)
        _append_jsonl(log_path, record)
    return log


def pretrain_denoiser(state: ModelState, train: Sequence[Episode], seed: int,
                      log_path: str | Path | None = None) -> list[dict]:
    """Denoising pretraining against the frozen Stage-1 features.

    Conditioning endpoints mix the true endpoint with jittered copies so the
    network stays usable under counterfactual tokens at refinement time.
    """
    cfg = state.cfg
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    epochs = cfg.train.denoiser_epochs
    bs = cfg.train.batch_size
    n_batches = max(1, -(-len(train) // bs))
    opt = AdamW(state.denoiser_params(), base_lr=cfg.train.base_lr,
                total_steps=epochs * n_batches,
                weight_decay=cfg.train.weight_decay)
    log: list[dict] = []
    for epoch in range(epochs):
        total = 0.0
        count = 0
        for idx in _batches(len(train), bs, rng):
            batch = pack_episodes([train[i] for i in idx])
            with no_grad():
                ctx = state.stage1_encoder(batch).agent_context.data
            token_end = batch.gt_endpoint.copy()
            jitter = rng.uniform(size=batch.size) < 0.5
            token_end[jitter] += state.cfg.model.sigma_cf_noise * rng.standard_normal(
                (int(jitter.sum()), 2))
            opt.zero_grad()
            loss = pretrain_step(state.scorenet, batch.gt_futures, ctx, token_end,
                                 batch.last_pos, batch.agent_mask,
                                 state.schedule, rng)
            loss.backward()
            opt.step()
            total += float(loss.data)
            count += 1
        record = {"epoch": epoch, "loss": total / count}
        log.append(record)
        _append_jsonl(log_path, record)
    return log
