"""
Named-tensor checkpoint container with a version header and checksum
"""

import struct
from pathlib import Path
from typing import Any, Dict, NamedTuple, Tuple, Union

import numpy as np
import orjson
import structlog

from lib.tracker import MaterialTracker, TrackerConfig

logger = structlog.get_logger()

CKPT_MAGIC = b"MPTCKPT1"
CKPT_VERSION = 1
U32 = struct.Struct("<I")
U64 = struct.Struct("<Q")


class CheckpointError(ValueError):
    """Malformed checkpoint; offset is the byte position of the problem"""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class Checkpoint(NamedTuple):
    tensors: Dict[str, np.ndarray]
    metadata: Dict[str, Any]


def encode_checkpoint(tensors: Dict[str, np.ndarray], metadata: Dict[str, Any]) -> bytes:
    parts = [CKPT_MAGIC, U32.pack(CKPT_VERSION), U32.pack(len(tensors))]
    for name in sorted(tensors):
        array = np.ascontiguousarray(tensors[name], dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(U32.pack(len(encoded)) + encoded)
        parts.append(U32.pack(array.ndim) + b"".join(U32.pack(d) for d in array.shape))
        parts.append(array.tobytes())
    meta = orjson.dumps(metadata, option=orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY)
    parts.append(U32.pack(len(meta)) + meta)
    body = b"".join(parts)
    return body + U64.pack(int(np.frombuffer(body, dtype=np.uint8).sum(dtype=np.uint64)))


class _Cursor:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, count: int, what: str) -> bytes:
        if self.pos + count > len(self.raw):
            raise CheckpointError(f"Truncated {what}", self.pos)
        chunk = self.raw[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def u32(self, what: str) -> int:
        return U32.unpack(self.take(U32.size, what))[0]


def decode_checkpoint(raw: bytes) -> Checkpoint:
    cursor = _Cursor(raw)
    if cursor.take(len(CKPT_MAGIC), "magic") != CKPT_MAGIC:
        raise CheckpointError("Not a checkpoint: bad magic", 0)
    version = cursor.u32("version")
    if version != CKPT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}", len(CKPT_MAGIC))

    tensors: Dict[str, np.ndarray] = {}
    for _ in range(cursor.u32("tensor count")):
        start = cursor.pos
        try:
            name = cursor.take(cursor.u32("name length"), "name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError("Tensor name is not UTF-8", start) from e
        shape = tuple(cursor.u32("dimension") for _ in range(cursor.u32("rank")))
        count = int(np.prod(shape)) if shape else 1
        data = cursor.take(8 * count, f"data of {name}")
        tensors[name] = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(shape)

    meta_start = cursor.pos
    try:
        metadata = orjson.loads(cursor.take(cursor.u32("metadata length"), "metadata"))
    except orjson.JSONDecodeError as e:
        raise CheckpointError(f"Metadata is not JSON: {e}", meta_start) from e

    body_end = cursor.pos
    (stored,) = U64.unpack(cursor.take(U64.size, "checksum"))
    computed = int(np.frombuffer(raw[:body_end], dtype=np.uint8).sum(dtype=np.uint64))
    if stored != computed:
        raise CheckpointError(f"Checksum mismatch: stored {stored}, computed {computed}", body_end)
    if cursor.pos != len(raw):
        raise CheckpointError("Trailing bytes after checksum", cursor.pos)
    return Checkpoint(tensors=tensors, metadata=metadata)


def save_checkpoint(path: Union[str, Path], model: MaterialTracker, **metadata: Any) -> None:
    """Write model parameters, buffers and its config (plus any extra metadata)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"model": model.config.model_dump(mode="json"), **metadata}
    payload = encode_checkpoint(model.state_dict(), meta)
    path.write_bytes(payload)
    logger.info("checkpoint_written", path=str(path), tensors=len(model.state_dict()), size=len(payload))


def load_checkpoint(path: Union[str, Path]) -> Tuple[MaterialTracker, Dict[str, Any]]:
    path = Path(path)
    checkpoint = decode_checkpoint(path.read_bytes())
    if "model" not in checkpoint.metadata:
        raise CheckpointError("Checkpoint metadata has no model config", 0)
    model = MaterialTracker(TrackerConfig(**checkpoint.metadata["model"]))
    try:
        model.load_state_dict(checkpoint.tensors)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"Checkpoint does not fit its model config: {e}", 0) from e
    logger.info("checkpoint_loaded", path=str(path), tensors=len(checkpoint.tensors))
    return model, checkpoint.metadata
