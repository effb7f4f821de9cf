from __future__ import annotations

from typing import Any


class DetAdaptError(Exception):
    """Base class for failures the runner maps to an exit code."""


class ConfigError(DetAdaptError):
    pass


class DataError(DetAdaptError):
    """Manifest, image or statistics file problems."""


class ManifestError(DataError):
    def __init__(self, message: str, line: int | None = None, index: int | None = None) -> None:
        where = []
        if line is not None:
            where.append(f"line {line}")
        if index is not None:
            where.append(f"box {index}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.line = line
        self.index = index


class NumericalError(DetAdaptError):
    def __init__(self, message: str, dump: dict[str, Any] | None = None) -> None:
        super().__init__(message)
        self.dump = dump or {}


class CheckpointMismatchError(DetAdaptError):
    def __init__(self, missing: list[str], unexpected: list[str]) -> None:
        parts = []
        if missing:
            parts.append(f"missing: {', '.join(missing)}")
        if unexpected:
            parts.append(f"unexpected: {', '.join(unexpected)}")
        super().__init__("checkpoint does not match architecture; " + "; ".join(parts))
        self.missing = missing
        self.unexpected = unexpected


class ShapeError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


class StatisticsError(RuntimeError):
    pass
