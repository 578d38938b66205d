"""
Run configuration: one JSON document describing a complete run.

Every section is a pydantic model with unknown keys rejected, so a config is
fully validated before any work starts.
"""

import json
from pathlib import Path
from typing import Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from data import SyntheticCorpora, SyntheticTaskSpec, Tokenizer
from errors import ConfigError, EmptyCorpusError
from pretrain import TeacherConfig
from strategy import IntegrationPlan
from trainer import TrainerConfig
from transformer_core import ModelConfig
from utils.paths import get_data_dir


class TeacherPaths(BaseModel):
    """Checkpoint paths of the frozen teachers; any of them may be absent."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    src_masked: Optional[str] = None
    src_causal: Optional[str] = None
    tgt_masked: Optional[str] = None
    tgt_causal: Optional[str] = None

    def as_dict(self):
        return self.model_dump()


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    corpus_dir: str = Field(default_factory=lambda: str(get_data_dir()))
    bpe_merges: int = Field(0, ge=0)
    max_vocab: Optional[int] = Field(None, ge=6)
    task: SyntheticTaskSpec = SyntheticTaskSpec()


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int = 0
    model: ModelConfig = ModelConfig()
    pretrain: TeacherConfig = TeacherConfig()
    teachers: TeacherPaths = TeacherPaths()
    plan: IntegrationPlan = IntegrationPlan()
    trainer: TrainerConfig = TrainerConfig()
    data: DataConfig = DataConfig()

    def teacher_config(self, language: str) -> TeacherConfig:
        """Pretraining config for one side, sized to that side's vocabulary."""
        vocab = self.model.src_vocab if language == "src" else self.model.tgt_vocab
        return self.pretrain.model_copy(update={"language": language, "vocab": vocab})


def _violations(exc: ValidationError):
    return [f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in exc.errors()]


def parse_run_config(document: Union[dict, str]) -> RunConfig:
    try:
        if isinstance(document, str):
            return RunConfig.model_validate_json(document)
        return RunConfig.model_validate(document)
    except ValidationError as exc:
        raise ConfigError("invalid run config: " + "; ".join(_violations(exc))) from exc


def load_run_config(path: Union[str, Path]) -> RunConfig:
    """Read and validate a RunConfig JSON file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return parse_run_config(document)


def load_corpora(config: RunConfig) -> Tuple[SyntheticCorpora, Tokenizer, Tokenizer]:
    """
    Read the corpus directory and fit one tokenizer per language.

    Tokenizers are fitted on the parallel training side plus the monolingual
    corpus, so teachers and students built from the same directory share
    vocabularies.
    """
    corpora = SyntheticCorpora.read(config.data.corpus_dir)
    if not corpora.train_src:
        raise EmptyCorpusError(f"no training corpus under {config.data.corpus_dir}")
    src_tok = Tokenizer.fit(corpora.train_src + corpora.mono_src, config.data.bpe_merges, config.data.max_vocab)
    tgt_tok = Tokenizer.fit(corpora.train_tgt + corpora.mono_tgt, config.data.bpe_merges, config.data.max_vocab)
    for side, tok, limit in (("source", src_tok, config.model.src_vocab), ("target", tgt_tok, config.model.tgt_vocab)):
        if len(tok.vocab) > limit:
            raise ConfigError(f"{side} vocabulary has {len(tok.vocab)} entries, model allows {limit}")
    return corpora, src_tok, tgt_tok
