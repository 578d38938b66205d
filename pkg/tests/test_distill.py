import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import tensor_core as tc
from data import BOS_ID, EOS_ID, PAD_ID
from distill import (decoder_sent_distill, encoder_sent_distill, joint_loss, sent_distill_loss,
                     word_distill_loss)
from errors import DistillationError, ShapeError
from pretrain import teacher_representations
from tensor_core import Tensor
from transformer_core import TransformerModel, translation_loss


def one_hot(ids, vocab):
    return np.eye(vocab)[ids]


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3, 4), elements=st.floats(-5, 5)))
def test_sentence_loss_of_identical_states_is_zero(values):
    with tc.precision("float64"):
        assert sent_distill_loss(Tensor(values), Tensor(values)).item() == 0.0


def test_sentence_loss_value_and_gradient(float64):
    student = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0], [9.0, 9.0]]]), requires_grad=True)
    teacher = Tensor(np.array([[[0.0, 2.0], [3.0, 2.0], [0.0, 0.0]]]))
    mask = np.array([[True, True, False]])
    loss = sent_distill_loss(student, teacher, mask)
    assert loss.item() == pytest.approx((1.0 + 4.0) / 2)
    tc.backward(loss)
    np.testing.assert_allclose(student.grad, [[[1.0, 0.0], [0.0, 2.0], [0.0, 0.0]]])


def test_sentence_loss_needs_equal_widths():
    with pytest.raises(DistillationError, match="d_model"):
        sent_distill_loss(Tensor(np.zeros((1, 2, 4))), Tensor(np.zeros((1, 2, 8))))
    with pytest.raises(ShapeError):
        sent_distill_loss(Tensor(np.zeros((1, 2, 4))), Tensor(np.zeros((1, 3, 4))))
    with pytest.raises(DistillationError):
        sent_distill_loss(Tensor(np.zeros((1, 2, 4))), Tensor(np.zeros((1, 2, 4))), np.zeros((1, 2), bool))


def test_one_hot_teacher_reduces_to_translation_loss(float64):
    logits = Tensor(np.random.default_rng(0).normal(size=(2, 3, 7)))
    refs = np.array([[5, 6, EOS_ID], [4, EOS_ID, PAD_ID]])
    mask = refs != PAD_ID
    kd = word_distill_loss(logits, Tensor(one_hot(refs, 7)), mask)
    assert kd.item() == pytest.approx(translation_loss(logits, refs).item(), rel=1e-12)


def test_uniform_teacher_gives_cross_entropy_to_uniform(float64):
    logits = Tensor(np.zeros((1, 2, 5)))
    kd = word_distill_loss(logits, Tensor(np.full((1, 2, 5), 0.2)))
    assert kd.item() == pytest.approx(math.log(5))


def test_word_loss_rejects_non_distributions():
    with pytest.raises(DistillationError):
        word_distill_loss(Tensor(np.zeros((1, 2, 3))), Tensor(np.full((1, 2, 3), 0.5)))
    with pytest.raises(ShapeError):
        word_distill_loss(Tensor(np.zeros((1, 2, 3))), Tensor(np.full((1, 2, 4), 0.25)))
    with pytest.raises(DistillationError):
        word_distill_loss(Tensor(np.zeros((1, 1, 2))), Tensor(np.full((1, 1, 2), 0.5)), np.zeros((1, 1), bool))


def test_joint_loss_superposition(float64):
    rng = np.random.default_rng(1)
    logits = Tensor(rng.normal(size=(1, 3, 6)), requires_grad=True)
    states = Tensor(rng.normal(size=(1, 3, 4)), requires_grad=True)
    refs = np.array([[5, 6, EOS_ID]])
    teacher_probs = Tensor(np.full((1, 3, 6), 1 / 6))
    teacher_states = Tensor(rng.normal(size=(1, 3, 4)))

    def terms():
        return (translation_loss(logits, refs), sent_distill_loss(states, teacher_states),
                word_distill_loss(logits, teacher_probs))

    parts = []
    for build in (lambda t: t[0], lambda t: t[1], lambda t: t[2]):
        logits.grad = states.grad = None
        tc.backward(build(terms()))
        parts.append((np.zeros_like(logits.data) if logits.grad is None else logits.grad.copy(),
                      np.zeros_like(states.data) if states.grad is None else states.grad.copy()))

    logits.grad = states.grad = None
    l_t, l_s, l_w = terms()
    bundle = joint_loss(l_t, l_s, l_w, eta=0.3, beta=0.7)
    assert bundle.total.item() == pytest.approx(l_t.item() + 0.3 * l_s.item() + 0.7 * l_w.item())
    tc.backward(bundle.total)
    np.testing.assert_allclose(logits.grad, parts[0][0] + 0.7 * parts[2][0], atol=1e-12)
    np.testing.assert_allclose(states.grad, 0.3 * parts[1][1], atol=1e-12)


def test_zero_weights_and_missing_terms_leave_translation_loss():
    l_t = Tensor(1.5, requires_grad=True)
    l_s = Tensor(2.0, requires_grad=True)
    bundle = joint_loss(l_t, l_s, None, eta=0.0, beta=0.5)
    assert bundle.total is l_t
    assert bundle.active == ["l_t", "l_s"]
    assert bundle.values() == {"l_t": 1.5, "l_s": 2.0, "l_w": 0.0, "total": 1.5}
    with pytest.raises(DistillationError):
        joint_loss(l_t, eta=-1.0)
    with pytest.raises(ShapeError):
        joint_loss(Tensor(np.zeros(2)))


def test_encoder_and_decoder_sentence_distillation(tiny_config, teachers):
    model = TransformerModel(tiny_config, seed=0)
    src = np.array([[5, 6, 7, EOS_ID]])
    enc = model.encode(src)
    loss = encoder_sent_distill(enc, teachers.get("src", "masked"), src)
    top = teacher_representations(teachers.get("src", "masked"), src)[-1]
    expected = ((enc.output.data - top.data) ** 2).sum() / 4
    assert loss.item() == pytest.approx(expected, rel=1e-5)
    averaged = encoder_sent_distill(enc, teachers.get("src", "masked"), src, layers=[1, 2])
    assert averaged.item() > 0
    with pytest.raises(DistillationError):
        encoder_sent_distill(enc, teachers.get("src", "masked"), src, layers=[3])
    with pytest.raises(ShapeError):
        encoder_sent_distill(enc, teachers.get("src", "masked"), src[:, :3])

    y_in = np.array([[BOS_ID, 8, 9]])
    _, dec = model.decode(y_in, enc)
    assert decoder_sent_distill(dec, teachers.get("tgt", "causal"), y_in).item() > 0
