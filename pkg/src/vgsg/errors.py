"""Exception types shared across the package."""

from .numerics.tensor import DegenerateInputError, DimensionError, ValidationError


class ConfigurationError(ValueError):
    """Inconsistent or unsupported configuration."""


class VocabularyError(ValueError):
    """Token id outside the configured vocabulary."""


class IngestionError(ValueError):
    """Dataset file is malformed, corrupted, or of the wrong version."""


class IntegrityError(ValueError):
    """Artifacts disagree with each other (seed, checksum, config hash)."""


class SamplingError(ValueError):
    """A batch cannot be drawn under the requested constraints."""


class ProtocolError(ValueError):
    """Retrieval evaluation precondition violated (e.g. query without a match)."""


class TrainingDivergence(RuntimeError):
    """A loss term became non-finite."""

    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term!r} is non-finite ({value})")
        self.term = term
        self.value = value


__all__ = [
    "ConfigurationError",
    "DegenerateInputError",
    "DimensionError",
    "IngestionError",
    "IntegrityError",
    "ProtocolError",
    "SamplingError",
    "TrainingDivergence",
    "ValidationError",
    "VocabularyError",
]
