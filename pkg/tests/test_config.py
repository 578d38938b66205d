import json

import pytest

from config import DataConfig, RunConfig, TeacherPaths, load_corpora, load_run_config, parse_run_config
from errors import ConfigError, EmptyCorpusError
from strategy import IntegrationPlan, Side


def test_defaults_validate():
    config = parse_run_config({})
    assert config == RunConfig()
    assert config.plan == IntegrationPlan()
    assert config.teachers.as_dict() == {"src_masked": None, "src_causal": None, "tgt_masked": None,
                                         "tgt_causal": None}


def test_nested_sections_parse():
    config = parse_run_config({"seed": 4, "model": {"d_model": 16, "n_heads": 2},
                               "plan": {"fusion_side": "none", "distill_side": "decoder"},
                               "teachers": {"tgt_causal": "t.ckpt"}})
    assert config.seed == 4 and config.model.d_model == 16
    assert config.plan.fusion_side is Side.NONE
    assert config.teachers.tgt_causal == "t.ckpt"


@pytest.mark.parametrize("document,location", [
    ({"bogus": 1}, "bogus"),
    ({"model": {"d_model": 10, "n_heads": 4}}, "model"),
    ({"trainer": {"epochs": 0}}, "trainer.epochs"),
    ({"teachers": {"src_fancy": "x"}}, "teachers.src_fancy"),
    ({"plan": {"eta": -1.0}}, "plan"),
])
def test_invalid_documents_raise_config_error(document, location):
    with pytest.raises(ConfigError) as info:
        parse_run_config(document)
    assert location in str(info.value)
    assert info.value.code == "E_CONFIG"


def test_json_text_is_accepted():
    assert parse_run_config('{"seed": 9}').seed == 9
    with pytest.raises(ConfigError):
        parse_run_config('{"seed": "nine"}')


def test_load_run_config_round_trip(tmp_path):
    config = RunConfig(seed=3, teachers=TeacherPaths(src_masked="a.ckpt"))
    path = tmp_path / "run.json"
    path.write_text(config.model_dump_json(indent=2))
    assert load_run_config(path) == config


def test_load_run_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_run_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{seed: 1")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_run_config(bad)


def test_teacher_config_follows_side_vocabulary():
    config = parse_run_config({"model": {"src_vocab": 100, "tgt_vocab": 200}})
    assert config.teacher_config("src").vocab == 100
    tgt = config.teacher_config("tgt")
    assert (tgt.vocab, tgt.language) == (200, "tgt")


def test_data_dir_defaults_to_environment(tmp_path):
    assert DataConfig().corpus_dir == str(tmp_path / "env" / "corpus")


def test_load_corpora_fits_tokenizers_on_parallel_and_mono(tiny_run_config, tiny_corpora):
    corpora, src_tok, tgt_tok = load_corpora(tiny_run_config)
    assert corpora.train_src == tiny_corpora.train_src
    for sentence in tiny_corpora.mono_tgt:
        assert 3 not in tgt_tok.encode(sentence)
    assert len(src_tok.vocab) <= tiny_run_config.model.src_vocab


def test_load_corpora_errors(tiny_run_config, tmp_path):
    empty = tiny_run_config.model_copy(update={"data": DataConfig(corpus_dir=str(tmp_path / "nothing"))})
    with pytest.raises(EmptyCorpusError):
        load_corpora(empty)
    small = tiny_run_config.model_copy(update={"model": tiny_run_config.model.model_copy(update={"tgt_vocab": 6})})
    with pytest.raises(ConfigError, match="target vocabulary"):
        load_corpora(small)


def test_config_files_are_plain_json(tmp_path):
    document = json.loads(RunConfig().model_dump_json())
    assert set(document) == {"seed", "model", "pretrain", "teachers", "plan", "trainer", "data"}
