import json

import numpy as np
import pytest

import teacher_cache
import tensor_core as tc
import trainer
from checkpoint import Checkpoint
from cli import GRADCHECK_MODEL
from data import make_batch, make_batches
from errors import CheckpointError, FrozenTeacherError, NumericError, PlanError, TrainingAborted
from evaluation import beam_search
from optim import OptimizerState, adam_step
from pretrain import TeacherPool
from strategy import IntegrationPlan, PlanMode, Side, TeacherChoice, build_training_step
from trainer import gradcheck, load_student, parameter_group, student_checkpoint, train, validation_loss
from transformer_core import TransformerModel, translation_loss
from utils.run_logger import get_event_logger


def steps_per_epoch(data, config, model_config):
    return len(make_batches(data.train_pairs, config.batch_size, min(config.max_len, model_config.max_len)))


def test_metrics_stream_has_one_record_per_step_and_epoch(tiny_config, tiny_data, tiny_trainer_config, tmp_path):
    config = tiny_trainer_config.model_copy(update={"epochs": 2})
    metrics = tmp_path / "metrics.jsonl"
    result = train(IntegrationPlan.baseline(), tiny_data, tiny_config, config, seed=0, metrics_path=metrics,
                   checkpoint_path=tmp_path / "student.ckpt", verbose=False)
    steps = steps_per_epoch(tiny_data, config, tiny_config)
    lines = [json.loads(line) for line in metrics.read_text().splitlines()]
    assert len(lines) == 2 * steps + 2 == len(result.metrics)
    assert [r["epoch"] for r in lines if "epoch" in r] == [1, 2]
    assert [r["step"] for r in lines if "step" in r] == list(range(1, 2 * steps + 1))
    assert all(r["l_s"] == 0.0 and r["l_w"] == 0.0 and r["total"] == r["l_t"] for r in lines if "step" in r)
    assert result.optimizer_steps == 2 * steps and result.skipped_steps == 0
    assert (tmp_path / "student.ckpt").exists()
    assert result.best_epoch in (1, 2)


def test_training_is_deterministic(tiny_config, tiny_data, tiny_trainer_config, teachers, tmp_path):
    runs = []
    for name in ("a", "b"):
        result = train(IntegrationPlan(), tiny_data, tiny_config, tiny_trainer_config, teachers, seed=7,
                       metrics_path=tmp_path / f"{name}.jsonl", verbose=False)
        runs.append(result)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert runs[0].checkpoint.checksum() == runs[1].checkpoint.checksum()
    other = train(IntegrationPlan(), tiny_data, tiny_config, tiny_trainer_config, teachers, seed=8, verbose=False)
    assert other.checkpoint.checksum() != runs[0].checkpoint.checksum()


def test_apt_training_leaves_teachers_untouched(tiny_config, tiny_data, tiny_trainer_config, teachers):
    before = teachers.checksums()
    result = train(IntegrationPlan(), tiny_data, tiny_config, tiny_trainer_config, teachers, seed=0, verbose=False)
    assert teachers.checksums() == before
    steps = [r for r in result.metrics if "step" in r]
    assert all(r["l_s"] > 0.0 and r["l_w"] > 0.0 for r in steps)
    assert all(r["total"] == pytest.approx(r["l_t"] + 0.5 * r["l_s"] + 0.5 * r["l_w"], rel=1e-5) for r in steps)
    assert not any(name.startswith("stack.") for name in result.model.params.names())


def test_teacher_change_fails_the_run(tiny_config, tiny_data, tiny_trainer_config, teachers, monkeypatch):
    original = trainer.adam_step
    victim = teachers.get("tgt", "causal")

    def tampering_step(params, grads, state, logger=None):
        name = victim.params.names()[0]
        victim.params.assign(name, victim.params[name].data + 0.5)
        return original(params, grads, state, logger=logger)

    monkeypatch.setattr(trainer, "adam_step", tampering_step)
    with pytest.raises(FrozenTeacherError):
        train(IntegrationPlan(), tiny_data, tiny_config, tiny_trainer_config, teachers, verbose=False)


def test_non_finite_loss_aborts_with_last_checkpoint(tiny_config, tiny_data, tiny_trainer_config, tmp_path,
                                                     monkeypatch):
    config = tiny_trainer_config.model_copy(update={"epochs": 2})
    steps = steps_per_epoch(tiny_data, config, tiny_config)
    original = tc.backward
    calls = {"n": 0}

    def failing_backward(loss):
        calls["n"] += 1
        if calls["n"] > steps:
            raise NumericError("loss is nan")
        return original(loss)

    monkeypatch.setattr(tc, "backward", failing_backward)
    path = tmp_path / "student.ckpt"
    with pytest.raises(TrainingAborted) as info:
        train(IntegrationPlan.baseline(), tiny_data, tiny_config, config, checkpoint_path=path, verbose=False)
    assert info.value.last_checkpoint == str(path)
    assert info.value.code == "E_ABORTED"
    events = get_event_logger().get_history(event="training_aborted")
    assert events and events[-1]["step"] == steps + 1


def test_abort_before_any_checkpoint(tiny_config, tiny_data, tiny_trainer_config, monkeypatch):
    def failing_backward(loss):
        raise NumericError("loss is inf")

    monkeypatch.setattr(tc, "backward", failing_backward)
    with pytest.raises(TrainingAborted) as info:
        train(IntegrationPlan.baseline(), tiny_data, tiny_config, tiny_trainer_config, verbose=False)
    assert info.value.last_checkpoint is None


def test_finetune_without_teachers_is_rejected(tiny_config, tiny_data, tiny_trainer_config):
    plan = IntegrationPlan(mode=PlanMode.FINETUNE, fusion_side=Side.NONE, distill_side=Side.NONE)
    with pytest.raises(PlanError):
        train(plan, tiny_data, tiny_config, tiny_trainer_config, TeacherPool(), verbose=False)


def test_teacher_cache_is_reused_across_epochs(tiny_config, tiny_data, tiny_trainer_config, teachers):
    config = tiny_trainer_config.model_copy(update={"epochs": 2, "use_teacher_cache": True})
    train(IntegrationPlan(), tiny_data, tiny_config, config, teachers, verbose=False)
    assert teacher_cache.get_cache().get_stats()["hits"] > 0


def test_student_checkpoint_round_trip(tiny_config, tiny_data, tiny_trainer_config, teachers, tmp_path):
    result = train(IntegrationPlan(), tiny_data, tiny_config, tiny_trainer_config, teachers, seed=0,
                   checkpoint_path=tmp_path / "student.ckpt", verbose=False)
    step, src_tok, tgt_tok = load_student(tmp_path / "student.ckpt", teachers)
    assert src_tok.vocab == tiny_data.src_tokenizer.vocab and tgt_tok.vocab == tiny_data.tgt_tokenizer.vocab
    assert step.plan == IntegrationPlan()
    state = step.model.params.state_dict()
    assert set(state) == set(result.checkpoint.tensors)
    for name, value in result.checkpoint.tensors.items():
        np.testing.assert_array_equal(state[name], value)
    source = tiny_data.valid_sources[0]
    reloaded = beam_search(step.translator(), source, beam_size=2, max_len=6)
    original = beam_search(result.step.translator(), source, beam_size=2, max_len=6)
    assert reloaded.tokens == original.tokens
    assert result.checkpoint.metadata["seed"] == 0


def test_student_checkpoint_carries_plan_and_vocabularies(tiny_config, tiny_data, teachers):
    step = build_training_step(IntegrationPlan(), TransformerModel(tiny_config, seed=0), teachers)
    ckpt = student_checkpoint(step, tiny_data.src_tokenizer, tiny_data.tgt_tokenizer,
                              {"src_masked": "a.ckpt", "tgt_causal": "b.ckpt"}, {"epoch": 3})
    assert ckpt.kind == "nmt"
    assert ckpt.metadata["teachers"] == {"src_masked": "a.ckpt", "tgt_causal": "b.ckpt"}
    assert ckpt.metadata["epoch"] == 3
    assert any(name.startswith("fusion.encoder.") for name in ckpt.tensors)
    restored = Checkpoint.from_bytes(ckpt.to_bytes())
    rebuilt, _, _ = load_student(restored, teachers)
    np.testing.assert_array_equal(rebuilt.model.params["fusion.encoder.adapter.0.w1.w"].data,
                                  step.model.params["fusion.encoder.adapter.0.w1.w"].data)


def test_load_student_rejects_teacher_checkpoints(teachers):
    with pytest.raises(CheckpointError):
        load_student(teachers.get("src", "masked").to_checkpoint())


def test_validation_loss_is_unsmoothed_nll(tiny_config):
    config = tiny_config.model_copy(update={"label_smoothing": 0.3})
    step = build_training_step(IntegrationPlan.baseline(), TransformerModel(config, seed=0))
    pairs = [([5, 6, 7], [8, 9]), ([10, 11], [12, 13, 14])]
    batch = make_batch(pairs, [0, 1])
    logits, _ = step.decode(batch.tgt_in, step.encode(batch.src))
    expected = translation_loss(logits, batch.tgt_out, 0.0).item()
    assert validation_loss(step, pairs, batch_size=2, max_len=12) == pytest.approx(expected, rel=1e-5)
    assert np.isnan(validation_loss(step, [], batch_size=2, max_len=12))


@pytest.mark.parametrize("name,group", [
    ("enc.0.attn.wq.w", "enc.attn"),
    ("dec.1.ffn.w2.b", "dec.ffn"),
    ("src_embed", "src_embed"),
    ("fusion.encoder.adapter.2.w1.w", "fusion.encoder.adapter"),
])
def test_parameter_group(name, group):
    assert parameter_group(name) == group


def test_gradcheck_baseline_passes():
    report = gradcheck(IntegrationPlan.baseline(), GRADCHECK_MODEL, seed=0, coordinates=80)
    assert report.passed, report.failures
    assert report.max_rel_error <= 1e-4
    assert report.checked >= 80


def test_gradcheck_apt_covers_fusion_and_skips_teachers():
    report = gradcheck(IntegrationPlan(), GRADCHECK_MODEL, seed=1, coordinates=80)
    assert report.passed, report.failures
    assert any(group.startswith("fusion.encoder") for group in report.group_max)
    assert not any(name.startswith("stack.") for name in report.parameter_names)
    assert report.to_dict()["passed"] is True


def test_gradcheck_decoder_fusion_plan():
    plan = IntegrationPlan(fusion_side=Side.DECODER, distill_side=Side.NONE, encoder_teacher=TeacherChoice.NONE)
    report = gradcheck(plan, GRADCHECK_MODEL, seed=2, coordinates=60)
    assert report.passed, report.failures
    assert any(group.startswith("fusion.decoder") for group in report.group_max)


def test_attention_and_layer_weights_stay_normalised_while_training(tiny_config, tiny_data, teachers):
    model = TransformerModel(tiny_config, seed=0)
    step = build_training_step(IntegrationPlan(), model, teachers, zero_init=False)
    state = OptimizerState(d_model=tiny_config.d_model, warmup_steps=4)
    sampled = 0
    for index, batch in enumerate(make_batches(tiny_data.train_pairs, 2, tiny_config.max_len)):
        model.params.zero_grad()
        tc.backward(step(batch).total)
        adam_step(model.params, model.params.gradients(), state)
        if index % 10:
            continue
        sampled += 1
        for sums in step.last_traces["encoder"].alpha_sums():
            np.testing.assert_allclose(sums, 1.0, atol=1e-6)
        enc = step.encode(batch.src)
        _, dec = step.decode(batch.tgt_in, enc)
        for weights in enc.attentions + dec.self_attentions + dec.cross_attentions:
            np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-6)
    assert sampled >= 2
