import numpy as np
import pytest
from hypothesis import HealthCheck, settings

import run_tracker
import teacher_cache
import tensor_core as tc
import utils.run_logger as run_logger
from config import DataConfig, RunConfig
from data import SyntheticTaskSpec, Tokenizer, generate_synthetic
from pretrain import PretrainedModel, TeacherConfig, TeacherKind, TeacherPool
from trainer import ParallelData, TrainerConfig
from transformer_core import ModelConfig

VOCAB = 16

settings.register_profile("apt", deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile("apt")


@pytest.fixture(autouse=True)
def isolated_environment(tmp_path, monkeypatch):
    """Point every APT_* directory at a temp dir and reset the global singletons."""
    for name, sub in (("APT_DATA_DIR", "corpus"), ("APT_CHECKPOINT_DIR", "checkpoints"), ("APT_LOG_DIR", "logs"),
                      ("APT_OUTPUT_DIR", "outputs"), ("APT_CACHE_DIR", "cache")):
        monkeypatch.setenv(name, str(tmp_path / "env" / sub))
    monkeypatch.delenv("APT_THREADS", raising=False)
    monkeypatch.setattr(run_logger, "_event_logger_instance", None)
    monkeypatch.setattr(teacher_cache, "_cache_instance", None)
    monkeypatch.setattr(run_tracker, "_run_tracker", None)
    tc.set_default_dtype("float32")
    yield
    tc.set_default_dtype("float32")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def float64():
    with tc.precision("float64"):
        yield


@pytest.fixture
def tiny_config():
    return ModelConfig(d_model=8, n_heads=2, enc_depth=2, dec_depth=2, d_ff=16, src_vocab=VOCAB, tgt_vocab=VOCAB,
                       dropout=0.0, label_smoothing=0.0, max_len=12)


def make_teacher_config(language: str, **overrides) -> TeacherConfig:
    fields = dict(d_model=8, n_heads=2, depth=2, d_ff=16, vocab=VOCAB, max_len=14, dropout=0.0, language=language,
                  epochs=1, batch_size=8, warmup_steps=4)
    fields.update(overrides)
    return TeacherConfig(**fields)


@pytest.fixture
def teacher_config():
    return make_teacher_config


@pytest.fixture
def teachers():
    """Randomly initialised frozen teachers for both languages and both kinds."""
    pool = TeacherPool()
    for seed, (language, kind) in enumerate([("src", TeacherKind.MASKED), ("src", TeacherKind.CAUSAL),
                                             ("tgt", TeacherKind.MASKED), ("tgt", TeacherKind.CAUSAL)]):
        pool.add(PretrainedModel(kind, make_teacher_config(language), seed=seed + 10))
    return pool


@pytest.fixture
def tiny_spec():
    return SyntheticTaskSpec(vocab_size=8, min_len=2, max_len=4, n_parallel=40, n_valid=8, n_test=8,
                             n_src_mono=60, n_tgt_mono=60, cipher="identity", reorder_window=2, seed=3)


@pytest.fixture
def tiny_corpora(tiny_spec):
    return generate_synthetic(tiny_spec)


@pytest.fixture
def tiny_data(tiny_corpora):
    src_tok = Tokenizer.fit(tiny_corpora.train_src + tiny_corpora.mono_src)
    tgt_tok = Tokenizer.fit(tiny_corpora.train_tgt + tiny_corpora.mono_tgt)
    return ParallelData.from_corpora(tiny_corpora, src_tok, tgt_tok)


@pytest.fixture
def tiny_trainer_config():
    return TrainerConfig(epochs=1, batch_size=8, max_len=12, warmup_steps=4, valid_max_sentences=4,
                         decode_max_len=6, use_teacher_cache=False)


def random_ids(rng, batch, length, vocab=VOCAB, low=5):
    return rng.integers(low, vocab, size=(batch, length))


@pytest.fixture
def tiny_run_config(tmp_path, tiny_spec, tiny_corpora, tiny_config, tiny_trainer_config):
    """A RunConfig over the tiny corpora written to disk."""
    corpus_dir = tmp_path / "corpus"
    tiny_corpora.write(corpus_dir)
    return RunConfig(seed=0, model=tiny_config, pretrain=make_teacher_config("src"), trainer=tiny_trainer_config,
                     data=DataConfig(corpus_dir=str(corpus_dir), task=tiny_spec))
