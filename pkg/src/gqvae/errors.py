"""Exception types shared across the package."""


class GqVaeError(Exception):
    """Base class for all package errors."""


class ConfigError(GqVaeError):
    """Invalid configuration value or combination."""


class CorpusError(GqVaeError):
    """Corpus ingestion problem (empty stream, unreadable file, ...)."""


class UnknownCharacterError(GqVaeError):
    """A character outside the vocabulary was seen in strict mode."""

    def __init__(self, char: str, offset: int | None = None):
        self.char = char
        self.offset = offset
        loc = f" at offset {offset}" if offset is not None else ""
        super().__init__(f"unknown character {char!r}{loc}")


class UnknownTokenError(GqVaeError):
    """A token id with no dictionary entry was passed to detokenize."""

    def __init__(self, token_id: int):
        self.token_id = token_id
        super().__init__(f"unknown token id {token_id}")


class NumericError(GqVaeError):
    """A non-finite value appeared where a finite one is required."""


class CheckpointError(GqVaeError):
    """Checkpoint is corrupt, truncated, or from an incompatible version."""


class MetricError(GqVaeError):
    """A metric is undefined for the given inputs (e.g. empty corpus)."""
