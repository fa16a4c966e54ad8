"""Intention tokenizer: proposal calibration, winner-takes-all loss terms,
bank ordering, and counterfactual sampling strategies."""

import numpy as np
import pytest

from lotcast.config import ModelConfig
from lotcast.nn import Tensor
from lotcast.tokenizer import (IntentionSet, IntentionTokenizer,
                               sample_counterfactual, token_bank)


def make_set(endpoints, logits) -> IntentionSet:
    return IntentionSet(endpoints=Tensor(np.asarray(endpoints, dtype=np.float64)),
                        logits=Tensor(np.asarray(logits, dtype=np.float64)))


def make_bank(probs):
    ends = np.arange(len(probs) * 2, dtype=np.float64).reshape(-1, 2)
    return token_bank(make_set(ends[None], [np.log(np.asarray(probs))]))


# -- proposals -----------------------------------------------------------------

@pytest.mark.parametrize("k", [1, 3, 6])
def test_propose_shapes_and_prob_simplex(k):
    cfg = ModelConfig(k_intent=k)
    tok = IntentionTokenizer(np.random.default_rng(0), cfg)
    ctx = Tensor(np.random.default_rng(1).normal(size=(4, cfg.d_c)))
    out = tok.propose_tokens(ctx)
    assert out.endpoints.shape == (4, k, 2)
    assert out.logits.shape == (4, k)
    np.testing.assert_allclose(out.probs.sum(axis=1), 1.0, atol=1e-12)
    assert (out.probs > 0).all()


def test_single_mode_prob_is_one():
    cfg = ModelConfig(k_intent=1)
    tok = IntentionTokenizer(np.random.default_rng(2), cfg)
    out = tok.propose_tokens(Tensor(np.zeros((3, cfg.d_c))))
    np.testing.assert_array_equal(out.probs, 1.0)


def test_probs_invariant_to_logit_shift():
    ends = np.zeros((2, 3, 2))
    logits = np.array([[0.3, -1.0, 2.0], [0.0, 0.0, 1.0]])
    a = make_set(ends, logits).probs
    b = make_set(ends, logits + 7.5).probs
    np.testing.assert_allclose(b, a, atol=1e-12)


# -- bank ordering -------------------------------------------------------------

def test_bank_sorted_by_probability():
    bank = make_bank([0.1, 0.6, 0.3])
    assert [t.index for t in bank] == [1, 2, 0]
    assert bank[0].prob > bank[1].prob > bank[2].prob
    np.testing.assert_array_equal(bank[0].endpoint, [2.0, 3.0])


def test_bank_ties_break_toward_lower_index():
    bank = make_bank([0.25, 0.25, 0.25, 0.25])
    assert [t.index for t in bank] == [0, 1, 2, 3]


# -- stage-1 loss --------------------------------------------------------------

def test_stage1_loss_hand_value():
    cfg = ModelConfig(k_intent=2)
    tok = IntentionTokenizer(np.random.default_rng(3), cfg)
    proposals = make_set([[[0.0, 0.0], [3.0, 4.0]]], [[0.0, 0.0]])
    gt = np.array([[0.0, 0.0]])
    total, terms = tok.stage1_loss(proposals, gt)
    assert terms["winner"].tolist() == [0]
    assert terms["xy"] == 0.0                       # exact hit
    np.testing.assert_allclose(terms["cls"], np.log(2.0), atol=1e-12)
    div = 2.0 * np.exp(-25.0 / cfg.sigma_div**2)    # two off-diagonal pairs
    np.testing.assert_allclose(terms["div"], div, atol=1e-12)
    np.testing.assert_allclose(
        float(total.data),
        cfg.lambda_xy * terms["xy"] + cfg.lambda_cls * terms["cls"]
        + cfg.lambda_div * terms["div"], atol=1e-12)


def test_stage1_winner_tie_goes_to_lower_index():
    cfg = ModelConfig(k_intent=3)
    tok = IntentionTokenizer(np.random.default_rng(4), cfg)
    proposals = make_set([[[1.0, 0.0], [0.0, 1.0], [5.0, 5.0]]], [[0.0, 0.0, 0.0]])
    _, terms = tok.stage1_loss(proposals, np.array([[0.0, 0.0]]))
    assert terms["winner"].tolist() == [0]          # both at distance 1


def test_stage1_terms_nonnegative():
    cfg = ModelConfig()
    tok = IntentionTokenizer(np.random.default_rng(5), cfg)
    rng = np.random.default_rng(6)
    proposals = tok.propose_tokens(Tensor(rng.normal(size=(5, cfg.d_c))))
    total, terms = tok.stage1_loss(proposals, rng.normal(size=(5, 2)))
    assert terms["xy"] >= 0 and terms["cls"] >= 0 and terms["div"] >= 0
    assert float(total.data) >= 0


def test_diversity_term_penalizes_proximity():
    cfg = ModelConfig(k_intent=2)
    tok = IntentionTokenizer(np.random.default_rng(7), cfg)
    gt = np.array([[0.0, 0.0]])
    near = make_set([[[0.0, 0.0], [0.1, 0.0]]], [[0.0, 0.0]])
    far = make_set([[[0.0, 0.0], [9.0, 0.0]]], [[0.0, 0.0]])
    _, t_near = tok.stage1_loss(near, gt)
    _, t_far = tok.stage1_loss(far, gt)
    assert t_near["div"] > t_far["div"]
    # coincident proposals pay the maximum penalty, K*(K-1) off-diag terms
    same = make_set([[[1.0, 1.0], [1.0, 1.0]]], [[0.0, 0.0]])
    _, t_same = tok.stage1_loss(same, gt)
    np.testing.assert_allclose(t_same["div"], 2.0, atol=1e-12)


def test_diversity_gradient_repels():
    cfg = ModelConfig(k_intent=2, lambda_xy=0.0, lambda_cls=0.0)
    tok = IntentionTokenizer(np.random.default_rng(8), cfg)
    ends = Tensor(np.array([[[0.0, 0.0], [0.5, 0.0]]]), requires_grad=True)
    proposals = IntentionSet(endpoints=ends, logits=Tensor(np.zeros((1, 2))))
    total, _ = tok.stage1_loss(proposals, np.array([[0.0, 0.0]]))
    total.backward()
    # the two proposals are pushed apart along the axis joining them
    assert ends.grad[0, 0, 0] > 0 and ends.grad[0, 1, 0] < 0


# -- counterfactual sampling ---------------------------------------------------

def test_counterfactual_ranking_picks_best_alternative():
    bank = make_bank([0.5, 0.3, 0.2])
    rng = np.random.default_rng(9)
    cf = sample_counterfactual(bank, gt_index=0, gt_endpoint=np.zeros(2),
                               strategy="ranking", rng=rng, sigma_noise=1.0)
    assert cf.index == 1                            # next most probable
    cf2 = sample_counterfactual(bank, gt_index=1, gt_endpoint=np.zeros(2),
                                strategy="ranking", rng=rng, sigma_noise=1.0)
    assert cf2.index == 0                           # the top token itself


def test_counterfactual_single_mode_returns_none():
    bank = make_bank([1.0])
    rng = np.random.default_rng(10)
    for strategy in ("ranking", "random"):
        assert sample_counterfactual(bank, 0, np.zeros(2), strategy, rng, 1.0) is None


def test_counterfactual_random_uniform_over_alternatives():
    bank = make_bank([0.4, 0.3, 0.2, 0.1])
    rng = np.random.default_rng(11)
    counts = {0: 0, 2: 0, 3: 0}
    for _ in range(3000):
        cf = sample_counterfactual(bank, 1, np.zeros(2), "random", rng, 1.0)
        counts[cf.index] += 1
    assert 1 not in counts
    for c in counts.values():
        assert 880 <= c <= 1120                     # ~1000 +/- 4 sigma


def test_counterfactual_gt_noise():
    bank = make_bank([0.6, 0.4])
    rng = np.random.default_rng(12)
    gt = np.array([3.0, -1.0])
    cf = sample_counterfactual(bank, 0, gt, "gt_noise", rng, sigma_noise=0.0)
    np.testing.assert_array_equal(cf.endpoint, gt)
    assert cf.index is None                         # synthetic token
    noisy = sample_counterfactual(bank, 0, gt, "gt_noise", rng, sigma_noise=1.5)
    assert np.linalg.norm(noisy.endpoint - gt) > 0


def test_counterfactual_unknown_strategy():
    bank = make_bank([0.6, 0.4])
    with pytest.raises(ValueError, match="unknown counterfactual strategy"):
        sample_counterfactual(bank, 0, np.zeros(2), "swap", np.random.default_rng(0), 1.0)
