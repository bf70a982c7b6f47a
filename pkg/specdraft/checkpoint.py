"""
Versioned binary checkpoints.

Layout (little-endian): 8-byte magic ``SPDRAFT\\0``, uint32 format version, uint32 header length N,
N bytes of UTF-8 JSON header ``{"kind", "config", "tensors": [{"name", "shape", "dtype", "offset"}],
"extra"}``, the float32 payload in manifest order, then a uint32 CRC32 of the payload.
"""
import json
import struct
import zlib
from pathlib import Path
from typing import Any, Dict, NamedTuple, Optional

import numpy as np

from specdraft.errors import CheckpointError, ChecksumError, VersionMismatchError
from specdraft.log import get_logger
from specdraft.models.heads import DraftHead, EagleHead, HeadConfig, HeadKind, MedusaHead
from specdraft.models.target import TargetConfig, TargetModel
from specdraft.training.discriminator import Discriminator

logger = get_logger()

MAGIC = b"SPDRAFT\x00"
FORMAT_VERSION = 1
PAYLOAD_DTYPE = np.dtype("<f4")
_PREFIX = struct.Struct("<8sII")
_CRC = struct.Struct("<I")


class Checkpoint(NamedTuple):
    kind: str
    config: Dict[str, Any]
    tensors: Dict[str, np.ndarray]
    extra: Dict[str, Any]


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for name, array in checkpoint.tensors.items():
        data = np.ascontiguousarray(array, dtype=PAYLOAD_DTYPE).tobytes()
        manifest.append({"name": name, "shape": list(np.shape(array)), "dtype": "float32", "offset": offset})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    header = json.dumps(
        {"kind": checkpoint.kind, "config": checkpoint.config, "tensors": manifest, "extra": checkpoint.extra},
        separators=(",", ":"),
        allow_nan=False,
    ).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + payload + _CRC.pack(zlib.crc32(payload))


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(blob) < _PREFIX.size:
        raise ChecksumError(f"{source}: file is truncated ({len(blob)} bytes)")
    magic, version, header_len = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: not a specdraft checkpoint (bad magic {magic!r})")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(version, FORMAT_VERSION)
    payload_start = _PREFIX.size + header_len
    if payload_start + _CRC.size > len(blob):
        raise ChecksumError(f"{source}: file is truncated inside the header")
    payload = blob[payload_start : len(blob) - _CRC.size]
    (stored_crc,) = _CRC.unpack_from(blob, len(blob) - _CRC.size)
    if zlib.crc32(payload) != stored_crc:
        raise ChecksumError(f"{source}: payload checksum mismatch (file corrupted or truncated)")
    try:
        header = json.loads(blob[_PREFIX.size : payload_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{source}: unreadable header: {err}") from None
    if not isinstance(header, dict) or not isinstance(header.get("kind"), str):
        raise CheckpointError(f"{source}: header has no 'kind'")
    manifest = header.get("tensors", [])
    if not isinstance(manifest, list):
        raise CheckpointError(f"{source}: header 'tensors' must be a list")
    tensors: Dict[str, np.ndarray] = {}
    expected_offset = 0
    for entry in manifest:
        try:
            name, dtype, offset = str(entry["name"]), entry["dtype"], int(entry["offset"])
            shape = tuple(int(s) for s in entry["shape"])
        except (KeyError, TypeError, ValueError) as err:
            raise CheckpointError(f"{source}: malformed tensor entry {entry!r} ({err.__class__.__name__}: {err})") from None
        if dtype != "float32":
            raise CheckpointError(f"{source}: tensor {name} has unsupported dtype {dtype}")
        size = int(np.prod(shape, dtype=np.int64)) * PAYLOAD_DTYPE.itemsize
        if offset != expected_offset or offset + size > len(payload):
            raise CheckpointError(f"{source}: tensor {name} has an invalid offset {offset}")
        data = np.frombuffer(payload, dtype=PAYLOAD_DTYPE, count=size // PAYLOAD_DTYPE.itemsize, offset=offset)
        tensors[name] = data.astype(np.float32).reshape(shape)
        expected_offset += size
    if expected_offset != len(payload):
        raise CheckpointError(f"{source}: {len(payload) - expected_offset} trailing payload bytes")
    return Checkpoint(header["kind"], header.get("config", {}), tensors, header.get("extra", {}))


def save_checkpoint(path: Path, checkpoint: Checkpoint) -> None:
    path.write_bytes(encode_checkpoint(checkpoint))
    logger.debug(f"Wrote {checkpoint.kind} checkpoint with {len(checkpoint.tensors)} tensors to {path}")


def load_checkpoint(path: Path, kind: Optional[str] = None) -> Checkpoint:
    if not path.is_file():
        raise CheckpointError(f"Checkpoint '{path}' does not exist")
    checkpoint = decode_checkpoint(path.read_bytes(), str(path))
    if kind is not None and checkpoint.kind != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {checkpoint.kind}")
    return checkpoint


def save_target(path: Path, model: TargetModel, extra: Optional[Dict[str, Any]] = None) -> None:
    save_checkpoint(path, Checkpoint("target", model.config.model_dump(mode="json"), model.state_dict(), extra or {}))


def load_target(path: Path) -> TargetModel:
    """Loaded targets are always frozen."""
    checkpoint = load_checkpoint(path, "target")
    model = TargetModel(TargetConfig(**checkpoint.config))
    model.load_state_dict(checkpoint.tensors)
    return model.freeze()


def save_head(path: Path, head: DraftHead, extra: Optional[Dict[str, Any]] = None) -> None:
    kind = f"head/{head.config.kind.value}"
    save_checkpoint(path, Checkpoint(kind, head.config.model_dump(mode="json"), head.state_dict(), extra or {}))


def load_head(path: Path, target: TargetModel) -> DraftHead:
    checkpoint = load_checkpoint(path)
    if not checkpoint.kind.startswith("head/"):
        raise CheckpointError(f"{path}: expected a draft-head checkpoint, found {checkpoint.kind}")
    config = HeadConfig(**checkpoint.config)
    head: DraftHead = MedusaHead(config) if config.kind == HeadKind.medusa else EagleHead(config, target)
    head.load_state_dict(checkpoint.tensors)
    return head


def save_discriminator(path: Path, disc: Discriminator, extra: Optional[Dict[str, Any]] = None) -> None:
    config = {
        "d_model": disc.d_model,
        "vocab_size": disc.vocab_size,
        "fc_layers": len(disc.fc),
        "fc_width": disc.fc[0].weight.shape[1] if len(disc.fc) > 1 else None,
    }
    save_checkpoint(path, Checkpoint("discriminator", config, disc.state_dict(), extra or {}))


def load_discriminator(path: Path) -> Discriminator:
    checkpoint = load_checkpoint(path, "discriminator")
    disc = Discriminator(**checkpoint.config)
    disc.load_state_dict(checkpoint.tensors)
    return disc
