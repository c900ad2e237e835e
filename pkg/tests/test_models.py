import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from corella.alignment import (
    AlignmentConfig, LossWeights, ProjectionHeads, alignment_loss, alignment_per_sample, total_loss,
)
from corella.autodiff import Node, make_rng, parameter
from corella.autodiff.ops import attention_weights
from corella.crm import CrmConfig, CrmModel, crm_loss, cross_layer
from corella.llm import LlmSurrogate, llm_loss, yes_no_prob, yes_no_prob_array
from op_cases import tiny_batch, tiny_models


# --- recommender ---------------------------------------------------------------

def test_cross_layer_zero_weights_is_identity():
    rng = make_rng(0)
    x0, xl = Node(rng.normal(size=(2, 8))), Node(rng.normal(size=(2, 8)))
    out = cross_layer(x0, xl, Node(np.zeros((8, 8))), Node(np.zeros(8)))
    np.testing.assert_array_equal(out.values, xl.values)


def test_cross_layer_identity_weight_hand_value():
    x = make_rng(1).normal(size=(1, 8))
    out = cross_layer(Node(x), Node(x), Node(np.eye(8)), Node(np.zeros(8)))
    for j in range(8):
        assert out.values[0, j] == x[0, j] * x[0, j] + x[0, j]


@pytest.mark.parametrize("depth", [1, 2, 5])
def test_cross_stack_preserves_dimension(depth):
    crm = CrmModel(["a", "b"], [3, 4], CrmConfig(d_emb=4, n_cross=depth, deep=[6]), make_rng(0))
    prob, hidden = crm.forward(np.array([[1, 2], [0, 3]]))
    assert len(hidden) == depth and all(h.shape == (2, 8) for h in hidden)
    assert np.all((prob.values > 0) & (prob.values < 1))


def test_zero_head_gives_half():
    crm, _, _ = tiny_models()
    crm.head_w.values = np.zeros(crm.head_w.shape)
    crm.head_b.values = np.zeros(1)
    ids, *_ = tiny_batch()
    np.testing.assert_array_equal(crm.predict(ids), 0.5)


def test_crm_loss_examples():
    assert crm_loss(Node([0.5, 0.5]), [0, 1]).item() == pytest.approx(math.log(2), abs=1e-15)
    assert crm_loss(Node([1.0, 0.0]), [1, 0]).item() <= 1e-11
    assert crm_loss(Node([0.9]), [0]).item() == pytest.approx(2.302585092994046, abs=1e-12)


def test_crm_parameter_names_and_bad_ids():
    crm, _, _ = tiny_models()
    assert "crm.embedding.user_id" in crm.params and "crm.cross.0.W" in crm.params
    assert "crm.deep.1.b" in crm.params and "crm.head.W" in crm.params
    with pytest.raises(IndexError, match="item_id"):
        crm.forward(np.array([[0, 99, 0]]))
    with pytest.raises(ValueError):
        crm.forward(np.array([[0, 1]]))


# --- language model ------------------------------------------------------------

def test_zero_lm_head_gives_zero_logits():
    _, llm, _ = tiny_models()
    llm.lm_head.values = np.zeros(llm.lm_head.shape)
    _, tokens, lengths, _, _ = tiny_batch()
    logits, _ = llm.forward(tokens, lengths)
    np.testing.assert_array_equal(logits.values, 0.0)


def test_causality_appending_tokens_keeps_prefix_outputs():
    _, llm, _ = tiny_models(n_blocks=2)
    rng = make_rng(5)
    seq = rng.integers(11, size=(1, 9))
    full, _ = llm.forward(seq, all_positions=True)
    for t in range(1, 9):
        prefix, _ = llm.forward(seq[:, :t], all_positions=True)
        np.testing.assert_allclose(prefix.values[0], full.values[0, :t], atol=1e-12, rtol=0)
    # perturbing a later token leaves earlier positions untouched
    changed = seq.copy()
    changed[0, 6] = (changed[0, 6] + 1) % 11
    other, _ = llm.forward(changed, all_positions=True)
    np.testing.assert_array_equal(other.values[0, :6], full.values[0, :6])
    assert not np.allclose(other.values[0, 6:], full.values[0, 6:])


def test_single_token_input():
    _, llm, _ = tiny_models()
    logits, hidden = llm.forward(np.array([[4]]))
    assert logits.shape == (1, 11) and np.all(np.isfinite(logits.values))
    assert len(hidden) == 1 and hidden[0].shape == (1, 8)


def test_padding_does_not_change_answer_slot():
    _, llm, _ = tiny_models()
    seq = np.array([[1, 5, 6, 7]])
    padded = np.array([[1, 5, 6, 7, 0, 0]])
    a, _ = llm.forward(seq)
    b, _ = llm.forward(padded, lengths=[4])
    np.testing.assert_allclose(a.values, b.values, atol=1e-13, rtol=0)


def test_attention_rows_sum_to_one():
    rng = make_rng(2)
    w = attention_weights(rng.normal(size=(2, 3, 6, 4)), rng.normal(size=(2, 3, 6, 4)), causal=True)
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)
    assert np.all(np.triu(w[0, 0], 1) == 0)


def test_yes_no_prob_examples():
    assert yes_no_prob_array(np.array([0.0, 0.3, 0.3]), 1, 2) == 0.5
    assert yes_no_prob_array(np.array([1.0, 0.0]), 0, 1) == pytest.approx(math.e / (math.e + 1), abs=1e-12)
    node = yes_no_prob(Node(np.array([[1.0, 0.0]])), 0, 1)
    assert node.values[0] == pytest.approx(0.7310585786300049, abs=1e-12)


@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(-100, 100))
def test_yes_no_prob_shift_invariant_and_bounded(a, b, c):
    p = yes_no_prob_array(np.array([a, b]), 0, 1)
    q = yes_no_prob_array(np.array([a + c, b + c]), 0, 1)
    assert abs(p - q) <= 1e-12 and 0 < p < 1


def test_yes_no_prob_monotone():
    a = np.linspace(-5, 5, 101)
    p = yes_no_prob_array(np.stack([a, np.zeros_like(a)], -1), 0, 1)
    assert np.all(np.diff(p) > 0)
    q = yes_no_prob_array(np.stack([np.zeros_like(a), a], -1), 0, 1)
    assert np.all(np.diff(q) < 0)


def test_llm_loss_examples():
    V = 7
    assert llm_loss(Node(np.zeros((2, V))), [1, 3]).item() == pytest.approx(math.log(V), abs=1e-14)
    logits = np.zeros((1, V))
    logits[0, 4] = 50.0
    assert llm_loss(Node(logits), [4]).item() < 1e-9
    assert llm_loss(Node(np.zeros((1, 2))), [0]).item() == pytest.approx(math.log(2), abs=1e-15)


def test_llm_rejects_bad_inputs():
    _, llm, _ = tiny_models()
    with pytest.raises(IndexError):
        llm.forward(np.array([[99]]))
    with pytest.raises(ValueError):
        llm.forward(np.zeros((1, 13), dtype=int))
    with pytest.raises(ValueError):
        LlmSurrogate(5, 1, 1)


def test_llm_parameter_names():
    _, llm, _ = tiny_models()
    for name in ("llm.tok_emb", "llm.block.0.attn.Wq", "llm.block.0.ff.W2", "llm.lm_head"):
        assert name in llm.params


# --- alignment -----------------------------------------------------------------

def _identity_heads(dim):
    eye, zero = np.eye(dim), np.zeros(dim)
    return ProjectionHeads.from_arrays([(eye, zero, eye, zero)])


def test_alignment_examples():
    heads = _identity_heads(2)
    assert alignment_loss([np.array([1.0, 2.0])], [np.array([1.0, 2.0])], heads).item() == 0.0
    assert alignment_loss([np.array([3.0, 4.0])], [np.zeros(2)], heads, 2.0).item() == 25.0
    assert alignment_loss([np.array([3.0, 4.0])], [np.zeros(2)], heads, 1.0).item() == 5.0


def test_alignment_sums_pairs_and_samples():
    eye, zero = np.eye(2), np.zeros(2)
    heads = ProjectionHeads.from_arrays([(eye, zero, eye, zero), (eye, zero, eye, zero)])
    hl = [np.array([[3.0, 4.0], [0.0, 1.0]]), np.array([[1.0, 0.0], [0.0, 0.0]])]
    hc = [np.zeros((2, 2)), np.zeros((2, 2))]
    per = alignment_per_sample(hl, hc, heads, 2.0)
    np.testing.assert_array_equal(per.values, [26.0, 1.0])
    assert alignment_loss(hl, hc, heads, reduction="sum").item() == 27.0
    assert alignment_loss(hl, hc, heads, reduction="mean").item() == 13.5


@given(st.integers(0, 1000), st.sampled_from([0.5, 1.0, 2.0, 3.0]))
def test_alignment_non_negative(seed, exponent):
    rng = make_rng(seed, "align")
    heads = ProjectionHeads(4, 6, 2, 3, rng)
    hl = [rng.normal(size=(3, 4)) for _ in range(2)]
    hc = [rng.normal(size=(3, 6)) for _ in range(2)]
    assert alignment_loss(hl, hc, heads, exponent).item() >= 0


def test_alignment_gradient_reaches_all_four_blocks():
    rng = make_rng(9)
    heads = ProjectionHeads(4, 6, 1, 3, rng)
    hl, hc = parameter(rng.normal(size=(2, 4))), parameter(rng.normal(size=(2, 6)))
    alignment_loss([hl], [hc], heads).backward()
    for g in (hl.grad, hc.grad, heads.params["align.0.g_llm.W"].grad,
              heads.params["align.0.g_crm.W"].grad):
        assert g is not None and np.abs(g).sum() > 0


def test_alignment_exponent_one_zero_gradient_at_coincidence():
    heads = _identity_heads(2)
    hl = parameter(np.array([[1.0, 2.0]]))
    alignment_loss([hl], [np.array([[1.0, 2.0]])], heads, 1.0).backward()
    np.testing.assert_array_equal(hl.grad, 0.0)


def test_alignment_config_and_shape_checks():
    with pytest.raises(ValueError):
        AlignmentConfig(llm_layers=[1], crm_layers=[2, 3])
    with pytest.raises(ValueError):
        AlignmentConfig(exponent=0)
    with pytest.raises(ValueError):
        alignment_loss([np.zeros(3)], [np.zeros(2)], _identity_heads(2))


def test_total_loss_arithmetic():
    b = total_loss(0.7, 0.6, 2.0, LossWeights(1, 1, 0.1))
    assert abs(b.total - 1.5) <= 1e-12 and abs(b.node.item() - 1.5) <= 1e-12
    assert total_loss(0.7, 0.6, 2.0, LossWeights(0, 1, 0)).total == 0.6
    assert total_loss(0.7, 0.6, 2.0, LossWeights(1, 0, 0)).total == 0.7
    assert total_loss(None, 0.6, None, LossWeights(0, 1, 0)).node.item() == 0.6


def test_total_loss_rejects_bad_weights_and_missing_terms():
    with pytest.raises(ValueError):
        LossWeights(-1, 1, 0)
    with pytest.raises(ValueError):
        LossWeights(0, 0, 0)
    with pytest.raises(ValueError):
        total_loss(None, 0.6, 1.0, LossWeights(1, 1, 0))
