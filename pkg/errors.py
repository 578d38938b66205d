"""
Exception hierarchy for the APT translation stack.

Every error carries a short machine-parseable ``code`` so the command line
can print ``<CODE>: <message>`` and exit nonzero.
"""

from typing import List, Optional


class AptError(Exception):
    """Base class for all errors raised by this package."""

    code = "E_APT"


class ShapeError(AptError, ValueError):
    code = "E_SHAPE"


class NumericError(AptError, ArithmeticError):
    """A completed operation produced NaN or Inf."""

    code = "E_NUMERIC"


class GraphError(AptError, RuntimeError):
    """Misuse of the autodiff graph (non-scalar or detached backward)."""

    code = "E_GRAPH"


class VocabularyError(AptError, ValueError):
    code = "E_VOCAB"


class SequenceLengthError(AptError, ValueError):
    code = "E_LENGTH"


class SequenceError(AptError, ValueError):
    """Malformed id sequence, e.g. a decoder prefix without the bos marker."""

    code = "E_SEQUENCE"


class DecodeError(AptError, ValueError):
    """Beam width or generation limit that leaves nothing to search."""

    code = "E_DECODE"


class EmptyCorpusError(AptError, ValueError):
    code = "E_EMPTY_CORPUS"


class BudgetError(AptError, RuntimeError):
    code = "E_BUDGET"


class FusionError(AptError, ValueError):
    code = "E_FUSION"


class DistillationError(AptError, ValueError):
    code = "E_DISTILL"


class PlanError(AptError, ValueError):
    code = "E_PLAN"

    def __init__(self, message: str, violations: Optional[List[str]] = None):
        super().__init__(message)
        self.violations = list(violations or [])


class FinetuneError(AptError, ValueError):
    code = "E_FINETUNE"


class CheckpointError(AptError, ValueError):
    code = "E_CHECKPOINT"


class ConfigError(AptError, ValueError):
    code = "E_CONFIG"


class SpecError(AptError, ValueError):
    """Degenerate synthetic task description."""

    code = "E_SPEC"


class TrainingAborted(AptError, RuntimeError):
    code = "E_ABORTED"

    def __init__(self, message: str, last_checkpoint: Optional[str] = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class FrozenTeacherError(AptError, RuntimeError):
    code = "E_TEACHER_MUTATED"
