"""Exception hierarchy shared across the engine."""

from __future__ import annotations


class HybridRAGError(Exception):
    """Base class for every error raised by the engine."""


class LoadError(HybridRAGError):
    def __init__(self, path, message: str | None = None):
        self.path = str(path)
        super().__init__(message or f"cannot load {self.path}")


class ValidationError(HybridRAGError, ValueError):
    pass


class ProviderError(HybridRAGError):
    def __init__(self, message: str, attempts: int = 1):
        self.attempts = attempts
        super().__init__(message)


class ProtocolError(ProviderError):
    pass


class FixtureError(HybridRAGError):
    def __init__(self, digest: str, message: str | None = None):
        self.digest = digest
        super().__init__(message or f"no scripted response for prompt digest {digest}")


class FormatError(HybridRAGError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class ExtractionError(HybridRAGError):
    def __init__(self, message: str, raw: str):
        self.raw = raw
        super().__init__(message)


class ChunkError(HybridRAGError):
    """A per-chunk failure during graph construction."""

    def __init__(self, chunk_id: str, stage: str, cause: Exception):
        self.chunk_id = chunk_id
        self.stage = stage
        self.cause = cause
        super().__init__(f"{stage} failed for chunk {chunk_id}: {cause}")


class StageError(HybridRAGError):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")


class MetricError(HybridRAGError):
    def __init__(self, message: str, raw: str | None = None):
        self.raw = raw
        super().__init__(message)
