"""Exception hierarchy shared by all pipeline stages."""

from __future__ import annotations

from pathlib import Path


class DiffMatchError(Exception):
    """Base class for every error the CLI maps to a nonzero exit code."""


class ConfigError(DiffMatchError, ValueError):
    """Invalid configuration file or value. Message always names the key."""


class BackendError(DiffMatchError):
    """Backend not loaded, wrong input geometry, unsupported layer, no gradients."""


class MapError(DiffMatchError, ValueError):
    """Invalid attention-map request: special or out-of-range token, bad sigma."""


class MatchError(DiffMatchError, ValueError):
    """Invalid matching request (no queries, no targets, misaligned predictions)."""


class FormatError(DiffMatchError):
    """Corrupt or mismatched binary/text artifact (map, embedding, results)."""


class CacheError(DiffMatchError):
    """Embedding cache layout or content problem."""


class OptimizationError(DiffMatchError):
    """Embedding optimisation failed (divergence, non-finite loss)."""

    def __init__(
        self,
        message: str,
        step: int | None = None,
        member: int | None = None,
        query_index: int | None = None,
    ) -> None:
        self.reason = message
        self.step = step
        self.member = member
        self.query_index = query_index
        parts = [message]
        if step is not None:
            parts.append(f"step={step}")
        if member is not None:
            parts.append(f"member={member}")
        if query_index is not None:
            parts.append(f"query={query_index}")
        super().__init__(" ".join(parts))

    def with_member(self, member: int) -> OptimizationError:
        return OptimizationError(self.reason, self.step, member, self.query_index)

    def with_query(self, query_index: int) -> OptimizationError:
        return OptimizationError(self.reason, self.step, self.member, query_index)


class DatasetError(DiffMatchError):
    """Missing dataset files or malformed annotation records."""

    def __init__(self, message: str, path: Path | str | None = None) -> None:
        self.path = path
        super().__init__(f"{message} ({path})" if path is not None else message)
