import json
import logging
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional

LOGGER_NAME = "specdraft"


def get_logger() -> logging.Logger:
    return logging.getLogger(LOGGER_NAME)


def configure_logging(verbose: bool = False, log_file: Optional[Path] = None) -> logging.Logger:
    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(logging.DEBUG)
    # Commands may be invoked several times in one process (tests, nested commands).
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()
    formatter = logging.Formatter(fmt="{asctime} {levelname:8} {message}", datefmt="%Y-%m-%d %H:%M:%S", style="{")
    handlers: list[logging.Handler] = [logging.StreamHandler()]
    if log_file is not None:
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    for handler in handlers:
        handler.setFormatter(formatter)
        handler.setLevel(logging.DEBUG if verbose else logging.INFO)
        logger.addHandler(handler)
    return logger


def write_jsonl(records: Iterable[Mapping[str, Any]], output_file: Path, append: bool = False) -> None:
    """
    Writes structured records as JSON lines, one object per line, keys in insertion order.
    """
    with open(output_file, mode="a" if append else "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(json.dumps(record, allow_nan=False) + "\n")


def read_jsonl(input_file: Path) -> list[dict[str, Any]]:
    with open(input_file, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
