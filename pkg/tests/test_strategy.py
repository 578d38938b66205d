import numpy as np
import pytest

import tensor_core as tc
from data import make_batch
from errors import ConfigError, FinetuneError, PlanError
from evaluation import beam_search, translate_corpus
from pretrain import PretrainedModel, TeacherPool
from strategy import (DECODER_FUSION_CAVEAT, Ablation, IntegrationPlan, PlanMode, Side, TeacherChoice, Translator,
                      ablation_suite, apply_finetune, build_training_step, resolve_layers, validate_plan)
from tests.conftest import make_teacher_config
from transformer_core import TransformerModel

PAIRS = [([5, 6, 7], [8, 9]), ([10, 11], [12, 13, 14])]


@pytest.fixture
def batch():
    return make_batch(PAIRS, [0, 1])


def kd_only(**overrides):
    fields = dict(fusion_side=Side.NONE, encoder_teacher=TeacherChoice.NONE)
    fields.update(overrides)
    return IntegrationPlan(**fields)


@pytest.mark.parametrize("selector,expected", [
    ("embedding", [0]), ("output", [3]), ("middle", [1, 2]), ("all", [0, 1, 2, 3]), ((3, 1, 1), [1, 3]),
])
def test_resolve_layers(selector, expected):
    assert resolve_layers(selector, 3) == expected


def test_resolve_layers_out_of_range():
    with pytest.raises(PlanError) as info:
        resolve_layers((0, 5), 3)
    assert info.value.violations == ["layer 5 out of range"]


def test_plan_json_round_trip_normalises():
    plan = IntegrationPlan(ablations=(Ablation.NO_WORD_DISTILL, Ablation.NO_GATING, Ablation.NO_GATING),
                           fusion_layers=(2, 0, 2))
    assert plan.ablations == (Ablation.NO_GATING, Ablation.NO_WORD_DISTILL)
    assert plan.fusion_layers == (0, 2)
    assert IntegrationPlan.from_json(plan.to_json()) == plan


def test_default_plan_is_valid(tiny_config, teachers):
    report = validate_plan(IntegrationPlan(), tiny_config, teachers)
    assert report.valid, report.violations
    assert report.attachments == {"fusion_encoder": [0, 1, 2], "distill_decoder": [2]}
    assert report.added_parameters == 2 * (8 * 8 + 8 + 8 * 8 + 8) + 2 * (8 + 1)
    assert report.active_losses == ["l_t", "l_s", "l_w"]
    assert validate_plan(IntegrationPlan(), tiny_config).added_parameters is None


@pytest.mark.parametrize("plan,fragment", [
    (IntegrationPlan(fusion_side=Side.NONE, distill_side=Side.NONE), "empty APT plan"),
    (IntegrationPlan(mode=PlanMode.BASELINE), "baseline plan must not attach"),
    (IntegrationPlan(mode=PlanMode.FINETUNE, fusion_side=Side.NONE, distill_side=Side.NONE,
                     encoder_teacher=TeacherChoice.NONE, decoder_teacher=TeacherChoice.NONE), "at least one teacher"),
    (IntegrationPlan(fusion_layers=(0, 7)), "layer 7 out of range"),
    (IntegrationPlan(encoder_teacher=TeacherChoice.NONE), "needs a encoder_teacher"),
    (kd_only(ablations=(Ablation.NO_SENT_DISTILL, Ablation.NO_WORD_DISTILL)), "every distillation term"),
])
def test_invalid_plans_are_reported(tiny_config, teachers, plan, fragment):
    report = validate_plan(plan, tiny_config, teachers)
    assert not report.valid
    assert any(fragment in v for v in report.violations)


def test_missing_teacher_is_reported(tiny_config, teachers):
    pool = TeacherPool([teachers.get("tgt", "causal")])
    report = validate_plan(IntegrationPlan(), tiny_config, pool)
    assert any("not loaded" in v for v in report.violations)


def test_teacher_shape_mismatches_are_reported(tiny_config):
    wide = make_teacher_config("tgt", d_model=16, d_ff=32)
    big_vocab = make_teacher_config("tgt", vocab=20)
    width = validate_plan(kd_only(), tiny_config, TeacherPool([PretrainedModel("causal", wide)]))
    assert any("d_model" in v for v in width.violations)
    word_only = kd_only(ablations=(Ablation.NO_SENT_DISTILL,))
    assert validate_plan(word_only, tiny_config, TeacherPool([PretrainedModel("causal", wide)])).valid
    vocab = validate_plan(kd_only(), tiny_config, TeacherPool([PretrainedModel("causal", big_vocab)]))
    assert any("vocabulary" in v for v in vocab.violations)


def test_warnings(tiny_config, teachers):
    decoder_fusion = validate_plan(IntegrationPlan(fusion_side=Side.DECODER, distill_side=Side.NONE,
                                                   encoder_teacher=TeacherChoice.NONE), tiny_config, teachers)
    assert decoder_fusion.valid and DECODER_FUSION_CAVEAT in decoder_fusion.warnings
    finetune = validate_plan(IntegrationPlan(mode=PlanMode.FINETUNE, fusion_side=Side.NONE, distill_side=Side.NONE,
                                             decoder_teacher=TeacherChoice.MASKED), tiny_config, teachers)
    assert finetune.valid
    assert any("masked teacher" in w for w in finetune.warnings)
    experimental = validate_plan(IntegrationPlan(mode=PlanMode.FINETUNE), tiny_config, teachers)
    assert experimental.valid and experimental.experimental


def test_build_training_step_rejects_invalid_plans(tiny_config):
    with pytest.raises(PlanError):
        build_training_step(IntegrationPlan(), TransformerModel(tiny_config), TeacherPool())


def test_baseline_step(tiny_config, batch):
    step = build_training_step(IntegrationPlan.baseline(), TransformerModel(tiny_config, seed=0))
    bundle = step(batch)
    assert bundle.active == ["l_t"] == step.active_losses
    assert step.added_parameters == 0


def test_apt_step_starts_from_the_baseline(tiny_config, teachers, batch):
    baseline = build_training_step(IntegrationPlan.baseline(), TransformerModel(tiny_config, seed=0))
    apt = build_training_step(IntegrationPlan(), TransformerModel(tiny_config, seed=0), teachers)
    base_bundle = baseline(batch)
    apt_bundle = apt(batch)
    assert apt_bundle.active == ["l_t", "l_s", "l_w"] == apt.active_losses
    assert apt_bundle.l_t.item() == pytest.approx(base_bundle.l_t.item(), abs=1e-6)
    assert apt_bundle.total.item() > apt_bundle.l_t.item()
    assert apt.added_parameters == validate_plan(IntegrationPlan(), tiny_config, teachers).added_parameters
    assert set(apt.last_traces) == {"encoder"}


def test_zero_distillation_weights_match_the_baseline(tiny_config, teachers, batch):
    baseline = build_training_step(IntegrationPlan.baseline(), TransformerModel(tiny_config, seed=0))
    silent = build_training_step(kd_only(eta=0.0, beta=0.0), TransformerModel(tiny_config, seed=0), teachers)
    a, b = baseline(batch), silent(batch)
    tc.backward(a.total)
    tc.backward(b.total)
    assert b.total.item() == a.total.item()
    grads_a, grads_b = baseline.model.params.gradients(), silent.model.params.gradients()
    assert set(grads_a) == set(grads_b)
    for name in grads_a:
        np.testing.assert_array_equal(grads_a[name], grads_b[name])


def test_fast_teacher_mode(tiny_config, teachers, batch):
    step = build_training_step(IntegrationPlan(mode=PlanMode.APT, fusion_side=Side.NONE,
                                               decoder_teacher=TeacherChoice.MASKED,
                                               encoder_teacher=TeacherChoice.NONE),
                               TransformerModel(tiny_config, seed=0), teachers, teacher_mode="fast")
    bundle = step(batch)
    assert bundle.l_w is not None and np.isfinite(bundle.l_w.item())


def test_apply_finetune_copies_teacher_weights(tiny_config, teachers):
    student = TransformerModel(tiny_config, seed=0)
    cross_before = student.params["dec.0.cross_attn.wq.w"].data.copy()
    encoder_teacher, decoder_teacher = teachers.get("src", "masked"), teachers.get("tgt", "causal")
    copied = apply_finetune(student, encoder_teacher, decoder_teacher)
    np.testing.assert_array_equal(student.params["src_embed"].data, encoder_teacher.params["embed"].data)
    np.testing.assert_array_equal(student.params["enc.1.ffn.w2.w"].data, encoder_teacher.params["stack.1.ffn.w2.w"].data)
    np.testing.assert_array_equal(student.params["dec.0.self_attn.wq.w"].data,
                                  decoder_teacher.params["stack.0.attn.wq.w"].data)
    np.testing.assert_array_equal(student.params["out.w"].data, decoder_teacher.params["lm_head.w"].data)
    np.testing.assert_array_equal(student.params["dec.0.cross_attn.wq.w"].data, cross_before)
    assert "out.b" in copied["decoder"] and "src_embed" in copied["encoder"]


def test_apply_finetune_copies_the_shallower_depth(tiny_config):
    student = TransformerModel(tiny_config, seed=0)
    shallow = PretrainedModel("masked", make_teacher_config("src", depth=1), seed=5)
    untouched = student.params["enc.1.attn.wq.w"].data.copy()
    copied = apply_finetune(student, encoder_teacher=shallow)
    assert not any(name.startswith("enc.1.") for name in copied["encoder"])
    np.testing.assert_array_equal(student.params["enc.1.attn.wq.w"].data, untouched)


def test_apply_finetune_is_atomic(tiny_config, teachers):
    student = TransformerModel(tiny_config, seed=0)
    before = student.params.checksum()
    wide = PretrainedModel("causal", make_teacher_config("tgt", d_model=16, d_ff=32), seed=0)
    with pytest.raises(FinetuneError):
        apply_finetune(student, teachers.get("src", "masked"), wide)
    assert student.params.checksum() == before
    with pytest.raises(FinetuneError):
        apply_finetune(student)


def test_translator_scores_are_log_distributions(tiny_config, teachers):
    step = build_training_step(IntegrationPlan(), TransformerModel(tiny_config, seed=0), teachers)
    translator = step.translator()
    enc = translator.start([5, 6, 7])
    rows = translator.next_log_probs(enc, [[1, 5], [1, 6]])
    assert rows.shape == (2, tiny_config.tgt_vocab)
    np.testing.assert_allclose(np.exp(rows).sum(axis=-1), 1.0, atol=1e-6)
    hyp = beam_search(translator, [5, 6, 7], beam_size=2, max_len=5)
    assert 1 <= len(hyp.tokens) <= 5
    plain = Translator(TransformerModel(tiny_config, seed=0))
    assert plain.vocab_size == tiny_config.tgt_vocab


def test_threaded_translation_counts_every_teacher_pass(tiny_config, teachers):
    step = build_training_step(IntegrationPlan(), TransformerModel(tiny_config, seed=0), teachers)
    teacher = teachers.get("src", "masked")
    sources = [[5, 6, 7], [8, 9], [10, 11, 12, 13], [6], [7, 7, 9], [14, 5]]
    before = teacher.forward_passes
    serial = translate_corpus(step.translator(), sources, beam_size=2, max_len=4, threads=1)
    serial_passes = teacher.forward_passes - before
    before = teacher.forward_passes
    parallel = translate_corpus(step.translator(), sources, beam_size=2, max_len=4, threads=4)
    assert [h.tokens for h in parallel] == [h.tokens for h in serial]
    assert teacher.forward_passes - before == serial_passes >= len(sources)
    assert set(step.last_traces) == {"encoder"}


def test_ablation_suites(tiny_config, teachers):
    table5 = ablation_suite("table5")
    assert len(table5) == 7 and next(iter(table5)) == "baseline"
    table3 = ablation_suite("table3")
    assert "fusion_no_gating_no_layer_attention" in table3 and "kd_no_sent" in table3
    assert list(ablation_suite("table6")) == ["baseline"] + [f"fusion_{s}" for s in ("embedding", "middle", "output", "all")] \
        + [f"kd_{s}" for s in ("embedding", "middle", "output", "all")]
    for suite in ("table3", "table5", "table6"):
        for name, plan in ablation_suite(suite).items():
            report = validate_plan(plan, tiny_config, teachers)
            assert report.valid, (suite, name, report.violations)
    with pytest.raises(ConfigError):
        ablation_suite("table9")
