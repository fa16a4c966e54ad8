"""Token conditioning, exposure gating, marginal decoding, joint assembly
(beam vs. exhaustive oracle), and the scene selector."""

import numpy as np
import pytest

from lotcast.config import ModelConfig
from lotcast.encoder import pack_scenes
from lotcast.nn import Tensor
from lotcast.predictor import (MarginalDecoder, SceneSelector, TokenConditioner,
                               assemble_scenes, exposure_order,
                               pair_overlap_costs, round_robin_choices)

from util import brute_force_scenes, rand_scene

CFG = ModelConfig(d=32, d_m=16, d_c=32, d_e=16, d_tau=16)


# -- exposure ------------------------------------------------------------------

def new_conditioner(cfg=CFG, seed=0):
    return TokenConditioner(np.random.default_rng(seed), cfg)


def batch_with_positions(positions):
    """A packed scene whose last positions are overwritten for closed forms."""
    scene = rand_scene(np.random.default_rng(0), len(positions))
    batch = pack_scenes([scene])
    batch.last_pos[0] = np.asarray(positions, dtype=np.float64)
    return batch


def test_exposure_closed_forms():
    # zero bias recovers the textbook cases; alpha=1, beta=1, r_path=3, r_end=5
    cfg = ModelConfig(d=32, d_m=16, d_c=32, d_e=16, d_tau=16, gate_bias=0.0)
    cond = new_conditioner(cfg)
    batch = batch_with_positions([(0.0, 0.0), (5.0, 0.0), (5.0, 50.0), (10.0, 0.0)])
    e = cond.exposure(batch, np.array([[10.0, 0.0]])).data[0]

    def sig(x):
        return 1.0 / (1.0 + np.exp(-x))

    np.testing.assert_allclose(e[1], sig(3.0), atol=1e-12)   # on the path
    np.testing.assert_allclose(e[2], sig(0.0), atol=1e-12)   # far from both
    np.testing.assert_allclose(e[3], sig(3.0 + 5.0), atol=1e-12)  # at the goal


def test_exposure_default_bias_shifts_baseline():
    cond = new_conditioner()
    batch = batch_with_positions([(0.0, 0.0), (5.0, 50.0)])
    e = cond.exposure(batch, np.array([[10.0, 0.0]])).data[0]
    np.testing.assert_allclose(e[1], 1.0 / (1.0 + np.exp(1.2)), atol=1e-12)


def test_exposure_decreases_with_lateral_distance():
    cond = new_conditioner()
    ys = np.linspace(0.0, 8.0, 9)
    batch = batch_with_positions([(0.0, 0.0)] + [(5.0, y) for y in ys])
    e = cond.exposure(batch, np.array([[10.0, 0.0]])).data[0, 1:]
    assert (np.diff(e) <= 1e-12).all()
    assert ((e > 0) & (e < 1)).all()


def test_exposure_order_descending_with_ties():
    exposure = np.array([0.2, 0.9, 0.9, 0.5, 0.1])
    valid = np.array([True, True, True, True, False])
    np.testing.assert_array_equal(exposure_order(exposure, valid), [1, 2, 3, 0])


# -- conditioning --------------------------------------------------------------

def test_conditioner_token_independent_at_init():
    # FiLM starts as identity (gamma=1, delta=0) and the gate starts open at a
    # constant sigmoid(2), so freshly initialized conditioning is a uniform
    # rescaling that cannot depend on the token endpoint
    cond = new_conditioner(seed=1)
    scene = rand_scene(np.random.default_rng(2), 3)
    batch = pack_scenes([scene])
    h = Tensor(np.random.default_rng(3).normal(size=(1, 3, CFG.d_h)))
    a = cond(h, batch, np.array([[4.0, 1.0]]))
    b = cond(h, batch, np.array([[-8.0, 3.0]]))
    np.testing.assert_allclose(a.features.data, b.features.data, atol=1e-12)
    gate = 1.0 / (1.0 + np.exp(-2.0))
    np.testing.assert_allclose(a.features.data, h.data * gate, atol=1e-12)
    assert a.exposure.shape == (1, 3)


def test_conditioner_token_sensitivity_after_perturbation():
    cond = new_conditioner(seed=4)
    cond.film_delta.w.data[:] = np.random.default_rng(5).normal(
        size=cond.film_delta.w.data.shape)
    scene = rand_scene(np.random.default_rng(6), 2)
    batch = pack_scenes([scene])
    h = Tensor(np.random.default_rng(7).normal(size=(1, 2, CFG.d_h)))
    a = cond(h, batch, np.array([[4.0, 1.0]]))
    b = cond(h, batch, np.array([[-8.0, 3.0]]))
    assert np.abs(a.features.data - b.features.data).max() > 1e-6


# -- marginal decoding ---------------------------------------------------------

def test_decoder_shapes():
    dec = MarginalDecoder(np.random.default_rng(8), CFG)
    cond = new_conditioner(seed=9)
    scene = rand_scene(np.random.default_rng(10), 3)
    batch = pack_scenes([scene])
    h = Tensor(np.random.default_rng(11).normal(size=(1, 3, CFG.d_h)))
    out = dec(cond(h, batch, np.array([[5.0, 0.0]])), batch)
    M, T = CFG.m_modes, CFG.t_future
    assert out.trajs.shape == (1, 3, M, T, 2)
    assert out.mode_feats.shape == (1, 3, M, CFG.d_m)
    assert out.mode_scores.shape == (1, 3, M)


def test_decoder_velocity_prior_with_zeroed_head():
    # with the residual head silenced, every mode must coast at the agent's
    # last observed velocity: y_t = p_last + t * v * dt
    dec = MarginalDecoder(np.random.default_rng(12), CFG)
    dec.head.layers[-1].w.data[:] = 0.0
    dec.head.layers[-1].b.data[:] = 0.0
    cond = new_conditioner(seed=13)
    scene = rand_scene(np.random.default_rng(14), 2)
    batch = pack_scenes([scene])
    h = Tensor(np.random.default_rng(15).normal(size=(1, 2, CFG.d_h)))
    out = dec(cond(h, batch, np.array([[5.0, 0.0]])), batch)
    t = np.arange(1, CFG.t_future + 1)[None, :, None]
    upper = batch.last_pos[0, :, None] + batch.hist[0, :, -1, 4:6][:, None] * batch.dt * t
    for m in range(CFG.m_modes):
        np.testing.assert_allclose(out.trajs.data[0, :, m], upper, atol=1e-12)
    np.testing.assert_array_equal(out.mode_scores.data, 0.0)


# -- joint assembly ------------------------------------------------------------

def test_pair_overlap_hand_value():
    # two static agents 1 m apart with radii 0.75: gap = 0.5 each of 3 steps
    trajs = np.zeros((2, 1, 3, 2))
    trajs[1, :, :, 0] = 1.0
    radii = np.array([0.75, 0.75])
    costs = pair_overlap_costs(trajs, radii)
    np.testing.assert_allclose(costs[0, 1, 0, 0], 3 * 0.5**2, atol=1e-12)
    np.testing.assert_allclose(costs[1, 0, 0, 0], costs[0, 1, 0, 0], atol=1e-12)
    assert costs[0, 0, 0, 0] > 0                    # self term exists but unused


def test_pair_overlap_zero_when_far():
    rng = np.random.default_rng(16)
    trajs = rng.normal(size=(2, 2, 4, 2))
    trajs[1] += 100.0
    costs = pair_overlap_costs(trajs, np.array([1.0, 1.0]))
    np.testing.assert_array_equal(costs[0, 1], 0.0)


@pytest.mark.parametrize("seed", range(12))
def test_beam_matches_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    N = int(rng.integers(1, 5))
    M = int(rng.integers(1, 5))
    k_scene = min(int(rng.integers(1, 7)), M**N)
    trajs = rng.normal(scale=3.0, size=(N, M, 4, 2)).cumsum(axis=2)
    scores = rng.normal(size=(N, M))
    radii = rng.uniform(0.5, 2.0, N)
    valid = np.ones(N, bool)
    order = exposure_order(rng.uniform(size=N), valid)
    got = assemble_scenes(trajs, scores, radii, valid, order,
                          top_r=M, k_scene=k_scene, beam_width=M**N, w_beam=1.0)
    want_choices, want_costs = brute_force_scenes(
        trajs, scores, radii, valid, order, w_beam=1.0, k_scene=k_scene)
    np.testing.assert_array_equal(got.choices, want_choices)
    np.testing.assert_allclose(got.costs, want_costs, atol=1e-9)
    assert not got.padded


def test_beam_single_agent_ranks_modes():
    scores = np.array([[0.1, 2.0, -1.0, 0.5]])
    trajs = np.zeros((1, 4, 3, 2))
    out = assemble_scenes(trajs, scores, np.array([1.0]), np.ones(1, bool),
                          np.array([0]), top_r=4, k_scene=4, beam_width=4,
                          w_beam=1.0)
    np.testing.assert_array_equal(out.choices[:, 0], [1, 3, 0, 2])
    np.testing.assert_allclose(out.costs, -np.sort(scores[0])[::-1], atol=1e-12)


def test_beam_pads_by_duplication():
    scores = np.array([[0.0, 1.0]])
    trajs = np.zeros((1, 2, 3, 2))
    out = assemble_scenes(trajs, scores, np.array([1.0]), np.ones(1, bool),
                          np.array([0]), top_r=1, k_scene=3, beam_width=3,
                          w_beam=1.0)
    assert out.padded
    np.testing.assert_array_equal(out.choices[:, 0], [1, 1, 1])
    assert out.costs[0] == out.costs[1] == out.costs[2]


def test_beam_too_narrow_raises():
    with pytest.raises(ValueError, match="beam too narrow"):
        assemble_scenes(np.zeros((1, 2, 3, 2)), np.zeros((1, 2)),
                        np.ones(1), np.ones(1, bool), np.array([0]),
                        top_r=2, k_scene=4, beam_width=3, w_beam=1.0)


def test_round_robin_table():
    got = round_robin_choices(n_agents=3, m_modes=4, k_scene=6)
    want = np.array([[0, 1, 2], [1, 2, 3], [2, 3, 0],
                     [3, 0, 1], [0, 1, 2], [1, 2, 3]])
    np.testing.assert_array_equal(got, want)


# -- scene selector ------------------------------------------------------------

def selector_inputs(seed, n=3, k=4):
    rng = np.random.default_rng(seed)
    context = Tensor(rng.normal(size=(1, CFG.d_c)))
    mode_feats = Tensor(rng.normal(size=(1, n, CFG.m_modes, CFG.d_m)))
    choices = rng.integers(0, CFG.m_modes, size=(1, k, n))
    valid = np.ones((1, n), bool)
    return context, mode_feats, choices, valid


def test_selector_probs_simplex():
    sel = SceneSelector(np.random.default_rng(17), CFG)
    context, mode_feats, choices, valid = selector_inputs(18)
    probs = sel.probs(sel.logits(context, mode_feats, choices, valid))
    assert probs.shape == (1, 4)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)


def test_selector_candidate_permutation_equivariance():
    sel = SceneSelector(np.random.default_rng(19), CFG)
    context, mode_feats, choices, valid = selector_inputs(20)
    perm = np.array([2, 0, 3, 1])
    a = sel.logits(context, mode_feats, choices, valid).data
    b = sel.logits(context, mode_feats, choices[:, perm], valid).data
    np.testing.assert_allclose(b, a[:, perm], atol=1e-12)


def test_selector_duplicate_candidates_equal_logits():
    sel = SceneSelector(np.random.default_rng(21), CFG)
    context, mode_feats, choices, valid = selector_inputs(22)
    choices[0, 2] = choices[0, 0]
    logits = sel.logits(context, mode_feats, choices, valid).data
    np.testing.assert_allclose(logits[0, 2], logits[0, 0], atol=1e-12)


def test_selector_ignores_invalid_agents():
    sel = SceneSelector(np.random.default_rng(23), CFG)
    context, mode_feats, choices, valid = selector_inputs(24)
    a = sel.logits(context, mode_feats, choices, valid).data
    mutated = Tensor(mode_feats.data.copy())
    valid2 = valid.copy()
    valid2[0, 2] = False
    base = sel.logits(context, mutated, choices, valid2).data
    mutated.data[0, 2] = 99.0                      # garbage in the masked row
    again = sel.logits(context, mutated, choices, valid2).data
    np.testing.assert_allclose(again, base, atol=1e-12)
    assert np.abs(a - base).max() > 1e-9           # the mask itself matters


def test_selector_top1_tie_lowest_index():
    probs = np.array([[0.25, 0.4, 0.4, 0.1], [0.5, 0.5, 0.0, 0.0]])
    np.testing.assert_array_equal(SceneSelector.top1(probs), [1, 0])
