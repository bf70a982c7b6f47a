from typing import Any, Sequence


class SpecDraftError(Exception):
    pass


class ShapeError(SpecDraftError):
    def __init__(self, primitive: str, *shapes: Sequence[int], detail: str = "") -> None:
        self.primitive = primitive
        self.shapes = [tuple(shape) for shape in shapes]
        rendered = " vs ".join(str(shape) for shape in self.shapes)
        message = f"{primitive}: incompatible shapes {rendered}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class DomainError(SpecDraftError):
    pass


class GraphError(SpecDraftError):
    pass


class MissingGradientError(SpecDraftError):
    def __init__(self, names: Sequence[str]) -> None:
        self.names = list(names)
        super().__init__(f"No gradient populated for parameter(s): {', '.join(self.names)}")


class ContractViolation(SpecDraftError):
    pass


class NonFiniteLossError(SpecDraftError):
    def __init__(self, message: str, snapshot: dict[str, Any]) -> None:
        super().__init__(message)
        self.snapshot = snapshot


class CheckpointError(SpecDraftError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    def __init__(self, found: int, supported: int) -> None:
        self.found = found
        self.supported = supported
        super().__init__(f"Checkpoint format version {found} is not supported (this build reads version {supported})")


class ConfigError(SpecDraftError):
    def __init__(self, message: str, json_path: str = "$") -> None:
        self.json_path = json_path
        super().__init__(f"{json_path}: {message}")


class CorpusError(SpecDraftError):
    pass


class FatalError(SpecDraftError):
    pass


class ContextOverflowError(SpecDraftError):
    def __init__(self, length: int, limit: int) -> None:
        self.length = length
        self.limit = limit
        super().__init__(f"sequence of length {length} exceeds the context limit of {limit} tokens")
