import os
from contextlib import contextmanager
from enum import Enum
from pathlib import Path
from typing import Iterator, List, Optional

import typer

from specdraft.bench.grid import GridCell
from specdraft.errors import CheckpointError, ConfigError, CorpusError, FatalError, SpecDraftError
from specdraft.log import get_logger
from specdraft.models.heads import SHIPPED_K, HeadKind

logger = get_logger()

EXIT_FAILURE = 1
EXIT_USAGE = 2


class Switch(str, Enum):
    on = "on"
    off = "off"


def validate_config_file(value: Optional[Path]) -> Optional[Path]:
    if value is None:
        return value
    if value.suffix != ".json":
        raise typer.BadParameter("Config file must end in .json")
    return value


def validate_file_parent(value: Optional[Path]) -> Optional[Path]:
    if value is None:
        return value
    if not value.parent.exists() or not value.parent.is_dir():
        raise typer.BadParameter("File must be in a folder that exists")
    if not os.access(value.parent, os.W_OK):
        raise typer.BadParameter("File must be in a folder that is writable")
    return value


def validate_k(ctx: typer.Context, value: Optional[int]) -> Optional[int]:
    """K outside the shipped grid is a usage error unless ``--allow-any-k`` was given."""
    if value is None:
        return value
    if value < 1:
        raise typer.BadParameter("K must be at least 1")
    if value not in SHIPPED_K and not ctx.params.get("allow_any_k", False):
        raise typer.BadParameter(f"K must be one of {', '.join(map(str, SHIPPED_K))}; pass --allow-any-k to override")
    return value


def parse_cell(text: str) -> GridCell:
    """
    Parses ``KIND:K:AL``, e.g. ``medusa:1:off``.
    """
    parts = text.split(":")
    if len(parts) != 3:
        raise typer.BadParameter(f"Cell '{text}' must look like KIND:K:AL, e.g. medusa:1:off")
    kind, k, al = parts
    try:
        head_kind = HeadKind(kind)
    except ValueError:
        raise typer.BadParameter(f"Unknown head kind '{kind}' in cell '{text}'") from None
    if not k.isdigit() or int(k) < 1:
        raise typer.BadParameter(f"K must be a positive integer in cell '{text}'")
    if al not in (Switch.on.value, Switch.off.value):
        raise typer.BadParameter(f"AL must be 'on' or 'off' in cell '{text}'")
    return GridCell(head_kind, int(k), al == Switch.on.value)


def validate_cells(values: Optional[List[str]]) -> List[GridCell]:
    return [parse_cell(value) for value in values or []]


@contextmanager
def exit_on_error() -> Iterator[None]:
    """
    Logs package errors and converts them into exit codes: configuration, corpus, checkpoint and
    fatal errors exit with 2, every other package error with 1.
    """
    try:
        yield
    except (ConfigError, CorpusError, CheckpointError, FatalError) as err:
        logger.error(f"{err.__class__.__name__}: {err}")
        raise typer.Exit(code=EXIT_USAGE) from None
    except SpecDraftError as err:
        logger.error(f"{err.__class__.__name__}: {err}")
        raise typer.Exit(code=EXIT_FAILURE) from None
