import json
from pathlib import Path
from typing import List, NamedTuple

import numpy as np

from specdraft.errors import CorpusError
from specdraft.log import get_logger

logger = get_logger()

HELD_OUT_FRACTION = 0.1
PROMPT_COUNT = 20
PROMPT_BYTES = 64


class Corpus(NamedTuple):
    train: np.ndarray
    held_out: np.ndarray
    files: List[Path]

    @property
    def size(self) -> int:
        return int(self.train.size + self.held_out.size)


def corpus_files(corpus_dir: Path) -> List[Path]:
    if not corpus_dir.is_dir():
        raise CorpusError(f"Corpus directory '{corpus_dir}' does not exist")
    # Lexicographic filename order keeps the byte stream identical across platforms.
    return sorted((p for p in corpus_dir.rglob("*") if p.is_file() and not p.name.startswith(".")), key=lambda p: p.as_posix())


def read_corpus_bytes(corpus_dir: Path) -> np.ndarray:
    files = corpus_files(corpus_dir)
    if not files:
        raise CorpusError(f"Corpus directory '{corpus_dir}' contains no files")
    stream = b"".join(p.read_bytes() for p in files)
    if not stream:
        raise CorpusError(f"Corpus directory '{corpus_dir}' contains only empty files")
    logger.debug(f"Read {len(stream)} bytes from {len(files)} corpus file(s) in {corpus_dir}")
    return np.frombuffer(stream, dtype=np.uint8).copy()


def split_corpus(stream: np.ndarray, held_out_fraction: float = HELD_OUT_FRACTION) -> tuple[np.ndarray, np.ndarray]:
    """
    The last ``held_out_fraction`` of the byte stream is held out; training never sees it.
    """
    if stream.size < 2:
        raise CorpusError(f"Corpus of {stream.size} byte(s) is too small to split")
    cut = max(1, min(stream.size - 1, int(round(stream.size * (1 - held_out_fraction)))))
    return stream[:cut], stream[cut:]


def load_corpus(corpus_dir: Path, held_out_fraction: float = HELD_OUT_FRACTION) -> Corpus:
    files = corpus_files(corpus_dir)
    train, held_out = split_corpus(read_corpus_bytes(corpus_dir), held_out_fraction)
    logger.info(f"Corpus: {train.size} training bytes, {held_out.size} held-out bytes")
    return Corpus(train, held_out, files)


def select_prompts(held_out: np.ndarray, count: int = PROMPT_COUNT, length: int = PROMPT_BYTES) -> List[bytes]:
    """
    ``count`` evenly spaced excerpts of ``length`` bytes from the held-out stream.
    Excerpts may overlap when the held-out stream is short.
    """
    if count < 1 or length < 1:
        raise CorpusError("prompt count and length must be positive")
    if held_out.size < length:
        raise CorpusError(f"Held-out corpus has {held_out.size} bytes, fewer than one {length}-byte prompt")
    starts = np.linspace(0, held_out.size - length, num=count).astype(np.int64)
    return [held_out[s : s + length].tobytes() for s in starts]


def encode(text: str | bytes) -> List[int]:
    data = text.encode("utf-8") if isinstance(text, str) else text
    return list(data)


def decode(tokens: List[int]) -> str:
    return bytes(tokens).decode("utf-8", errors="replace")


def load_prompt_file(path: Path) -> List[bytes]:
    """A committed prompt set: a JSON array of UTF-8 strings."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CorpusError(f"Cannot read prompt file '{path}': {err}") from None
    if not isinstance(raw, list) or not raw or not all(isinstance(p, str) and p for p in raw):
        raise CorpusError(f"Prompt file '{path}' must hold a non-empty JSON array of non-empty strings")
    logger.debug(f"Read {len(raw)} prompts from {path}")
    return [p.encode("utf-8") for p in raw]
