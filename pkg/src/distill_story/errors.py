"""Exception types shared across the package.

Each maps to a CLI exit code: ConfigurationError-family errors exit 2,
quality/artifact errors exit 3, everything else is a bug.
"""


class DistillStoryError(Exception):
    """Base class for all package errors."""

    code = "E_INTERNAL"


class ConfigurationError(DistillStoryError, ValueError):
    """Invalid configuration; message names the offending field."""

    code = "E_CONFIG"


class DomainError(DistillStoryError, ValueError):
    """Argument outside the mathematical domain of an operation."""

    code = "E_DOMAIN"


class ShapeError(DistillStoryError, ValueError):
    """Mismatched array/tensor shapes."""

    code = "E_SHAPE"


class ContractError(DistillStoryError, ValueError):
    """A documented precondition was violated by the caller."""

    code = "E_CONTRACT"


class SceneError(DistillStoryError, ValueError):
    """Invalid synthetic scene geometry."""

    code = "E_SCENE"


class VocabularyError(DistillStoryError, KeyError):
    """Token or id missing from the vocabulary."""

    code = "E_VOCAB"


class ExplanationError(DistillStoryError, RuntimeError):
    """Explanation could not be computed (e.g. degenerate design)."""

    code = "E_EXPLAIN"


class AssemblyError(DistillStoryError, ValueError):
    """Story assembly failed; message lists what is missing."""

    code = "E_ASSEMBLY"


class RenderError(DistillStoryError, RuntimeError):
    """Story rendering failed (missing asset, unwritable target)."""

    code = "E_RENDER"


class TrainingDivergence(DistillStoryError, RuntimeError):
    """Training aborted on a non-finite loss or gradient."""

    code = "E_DIVERGED"


class QualityFloorError(DistillStoryError, RuntimeError):
    """A trained model missed its required metric floor."""

    code = "E_QUALITY"


class CheckpointError(DistillStoryError, ValueError):
    """Checkpoint missing, malformed, or incompatible."""

    code = "E_CHECKPOINT"


class MissingArtifactError(DistillStoryError, FileNotFoundError):
    """A pipeline stage needs an artifact an earlier stage has not produced."""

    code = "E_MISSING"


class LockError(DistillStoryError, RuntimeError):
    """Another process holds the output-root lock."""

    code = "E_LOCKED"
