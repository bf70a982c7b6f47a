import json
import struct

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from specdraft.checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    Checkpoint,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    load_discriminator,
    load_head,
    load_target,
    save_discriminator,
    save_head,
    save_target,
)
from specdraft.errors import CheckpointError, ChecksumError, VersionMismatchError
from specdraft.models.heads import HeadKind
from specdraft.oracles import tiny_head
from specdraft.training.discriminator import Discriminator

from .conftest import FIXTURES

GOLDEN = FIXTURES / "golden_v1.ckpt"


def golden_checkpoint() -> Checkpoint:
    tensors = {"a": np.array([1.0, -2.0]), "b": np.array([[0.5, 0.25]])}
    return Checkpoint("fixture", {"note": "golden v1"}, tensors, {})


def test_golden_fixture_still_loads():
    checkpoint = load_checkpoint(GOLDEN)
    assert checkpoint.kind == "fixture"
    assert checkpoint.config == {"note": "golden v1"}
    assert_array_equal(checkpoint.tensors["a"], [1.0, -2.0])
    assert checkpoint.tensors["b"].shape == (1, 2)
    assert checkpoint.tensors["b"].dtype == np.float32


def test_encoding_is_stable_against_the_golden_bytes():
    assert encode_checkpoint(golden_checkpoint()) == GOLDEN.read_bytes()


def test_target_roundtrip_is_bit_identical(target, tmp_path):
    path = tmp_path / "target.ckpt"
    save_target(path, target, extra={"steps": 0})
    loaded = load_target(path)
    assert loaded.frozen
    assert loaded.config == target.config
    assert loaded.weights_digest() == target.weights_digest()
    assert load_checkpoint(path).extra == {"steps": 0}


@pytest.mark.parametrize("kind", list(HeadKind))
def test_head_roundtrip(target, tmp_path, kind):
    head = tiny_head(target, kind, 2)
    path = tmp_path / "head.ckpt"
    save_head(path, head)
    loaded = load_head(path, target)
    assert loaded.config == head.config
    assert loaded.weights_digest() == head.weights_digest()


def test_discriminator_roundtrip(rng, tmp_path):
    disc = Discriminator(16, 256, 2, rng)
    path = tmp_path / "disc.ckpt"
    save_discriminator(path, disc)
    assert load_discriminator(path).weights_digest() == disc.weights_digest()


def test_saving_twice_gives_identical_bytes(target, tmp_path):
    save_target(tmp_path / "a.ckpt", target)
    save_target(tmp_path / "b.ckpt", target)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


@pytest.mark.parametrize("keep", [4, 30, 200])
def test_truncated_file_is_a_checksum_error(keep):
    blob = GOLDEN.read_bytes()
    with pytest.raises(ChecksumError):
        decode_checkpoint(blob[:keep])


def test_flipped_payload_byte_is_a_checksum_error():
    blob = bytearray(GOLDEN.read_bytes())
    blob[-6] ^= 0xFF
    with pytest.raises(ChecksumError):
        decode_checkpoint(bytes(blob))


def test_version_bump_names_both_versions():
    blob = bytearray(GOLDEN.read_bytes())
    blob[8:12] = struct.pack("<I", FORMAT_VERSION + 1)
    with pytest.raises(VersionMismatchError) as err:
        decode_checkpoint(bytes(blob))
    assert err.value.found == FORMAT_VERSION + 1
    assert err.value.supported == FORMAT_VERSION
    assert str(FORMAT_VERSION + 1) in str(err.value) and str(FORMAT_VERSION) in str(err.value)


def test_wrong_magic_and_wrong_kind(tmp_path):
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"NOTADRFT" + GOLDEN.read_bytes()[len(MAGIC) :])
    with pytest.raises(CheckpointError):
        load_checkpoint(GOLDEN, kind="target")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")


def with_header(blob: bytes, edit) -> bytes:
    """Re-packs ``blob`` with its JSON header passed through ``edit``; payload and checksum stay valid."""
    _, version, header_len = struct.unpack_from("<8sII", blob, 0)
    header = json.loads(blob[16 : 16 + header_len])
    new_header = json.dumps(edit(header)).encode("utf-8")
    return struct.pack("<8sII", MAGIC, version, len(new_header)) + new_header + blob[16 + header_len :]


def drop_key(key: str):
    def edit(header):
        del header["tensors"][0][key]
        return header

    return edit


@pytest.mark.parametrize("key", ["offset", "shape", "name", "dtype"])
def test_tensor_entry_missing_a_key_is_a_checkpoint_error(key):
    with pytest.raises(CheckpointError):
        decode_checkpoint(with_header(GOLDEN.read_bytes(), drop_key(key)))


def test_header_without_kind_is_a_checkpoint_error():
    def edit(header):
        del header["kind"]
        return header

    with pytest.raises(CheckpointError, match="kind"):
        decode_checkpoint(with_header(GOLDEN.read_bytes(), edit))
    with pytest.raises(CheckpointError):
        decode_checkpoint(with_header(GOLDEN.read_bytes(), lambda header: [header]))


def test_unchanged_header_still_decodes():
    blob = with_header(GOLDEN.read_bytes(), lambda header: header)
    assert decode_checkpoint(blob).kind == "fixture"
