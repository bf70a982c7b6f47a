import json

import numpy as np
import pytest

from specdraft.corpus import (
    corpus_files,
    decode,
    encode,
    load_corpus,
    load_prompt_file,
    read_corpus_bytes,
    select_prompts,
    split_corpus,
)
from specdraft.errors import CorpusError

from .conftest import REPO_ROOT


def test_files_are_read_in_lexicographic_order(tmp_path):
    (tmp_path / "b.txt").write_bytes(b"second")
    (tmp_path / "a.txt").write_bytes(b"first ")
    (tmp_path / ".hidden").write_bytes(b"skipped")
    assert [p.name for p in corpus_files(tmp_path)] == ["a.txt", "b.txt"]
    assert read_corpus_bytes(tmp_path).tobytes() == b"first second"


def test_missing_and_empty_directories(tmp_path):
    with pytest.raises(CorpusError, match="does not exist"):
        corpus_files(tmp_path / "nowhere")
    with pytest.raises(CorpusError, match="no files"):
        read_corpus_bytes(tmp_path)
    (tmp_path / "empty.txt").write_bytes(b"")
    with pytest.raises(CorpusError, match="empty"):
        read_corpus_bytes(tmp_path)


def test_held_out_is_the_tail_of_the_stream():
    stream = np.arange(100, dtype=np.uint8)
    train, held_out = split_corpus(stream)
    assert train.size == 90
    assert held_out.tolist() == list(range(90, 100))


def test_load_corpus(corpus_dir):
    corpus = load_corpus(corpus_dir)
    assert corpus.size == sum(p.stat().st_size for p in corpus.files)
    assert corpus.held_out.size > 0


def test_prompts_are_evenly_spaced_excerpts():
    held_out = np.frombuffer(bytes(range(200)), dtype=np.uint8)
    prompts = select_prompts(held_out, count=5, length=8)
    assert len(prompts) == 5
    assert prompts[0] == bytes(range(8))
    assert prompts[-1] == bytes(range(192, 200))
    with pytest.raises(CorpusError):
        select_prompts(held_out, count=1, length=500)


def test_byte_tokenizer_handles_multibyte_text():
    tokens = encode("naïve café")
    assert all(0 <= t < 256 for t in tokens)
    assert len(tokens) == len("naïve café".encode("utf-8"))
    assert decode(tokens) == "naïve café"


def test_committed_corpus_is_about_a_megabyte():
    corpus = load_corpus(REPO_ROOT / "data" / "corpus")
    assert 900_000 <= corpus.size <= 1_100_000
    assert corpus.train.tobytes().isascii()


def test_committed_prompts_are_the_held_out_excerpts():
    corpus = load_corpus(REPO_ROOT / "data" / "corpus")
    assert load_prompt_file(REPO_ROOT / "data" / "prompts.json") == select_prompts(corpus.held_out, 20, 64)


def test_prompt_file_round_trip(tmp_path):
    path = tmp_path / "prompts.json"
    path.write_text(json.dumps(["first line\n", 'a "quoted" word']), encoding="utf-8")
    assert load_prompt_file(path) == [b"first line\n", b'a "quoted" word']


@pytest.mark.parametrize(
    "content",
    ["not json", "{}", "[]", '["fine", ""]', '["fine", 3]'],
)
def test_bad_prompt_file_is_a_corpus_error(tmp_path, content):
    path = tmp_path / "prompts.json"
    path.write_text(content, encoding="utf-8")
    with pytest.raises(CorpusError):
        load_prompt_file(path)


def test_missing_prompt_file_is_a_corpus_error(tmp_path):
    with pytest.raises(CorpusError, match="Cannot read"):
        load_prompt_file(tmp_path / "absent.json")
