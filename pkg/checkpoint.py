# checkpoint.py
"""
Binary named-tensor store.

    magic    b"TAPMCKPT"
    version  uint32 LE
    config   uint32 LE length + UTF-8 canonical config text
    step     uint64 LE
    epoch    uint32 LE
    count    uint32 LE
    records  uint16 LE name length, UTF-8 name, uint8 ndim, ndim x uint32 LE dims,
             float32 LE values

Every value is stored as float32 regardless of the in-memory dtype.
"""
import io
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from errors import CheckpointError, CheckpointTruncatedError, CheckpointVersionError
from utils import ensure_parent, get_logger

MAGIC = b"TAPMCKPT"
FORMAT_VERSION = 1
log = get_logger("checkpoint")


def to_bytes(arr: np.ndarray) -> bytes:
    return np.asarray(arr).astype("<f4").tobytes()


def from_bytes(b: bytes, shape) -> np.ndarray:
    return np.frombuffer(b, dtype="<f4").reshape(shape).astype(np.float32)


@dataclass
class CheckpointData:
    config_text: str
    step: int = 0
    epoch: int = 0
    records: Dict[str, np.ndarray] = field(default_factory=OrderedDict)


def encode(data: CheckpointData) -> bytes:
    buf = io.BytesIO()
    config = data.config_text.encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(config)))
    buf.write(config)
    buf.write(struct.pack("<QII", data.step, data.epoch, len(data.records)))
    for name, arr in data.records.items():
        key = name.encode("utf-8")
        arr = np.asarray(arr)
        buf.write(struct.pack("<H", len(key)))
        buf.write(key)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(to_bytes(arr))
    return buf.getvalue()


class _Reader:
    def __init__(self, blob: bytes, source: str):
        self.blob, self.pos, self.source = blob, 0, source

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.blob):
            raise CheckpointTruncatedError(f"{self.source}: truncated at byte {self.pos} (needed {size} more)")
        chunk = self.blob[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(blob: bytes, source: str = "<bytes>") -> CheckpointData:
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointVersionError(f"{source}: not a tapm-net checkpoint (bad magic)")
    r = _Reader(blob, source)
    r.take(len(MAGIC))
    version, config_len = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{source}: format version {version}, expected {FORMAT_VERSION}")
    try:
        config_text = r.take(config_len).decode("utf-8")
    except UnicodeDecodeError as e:
        raise CheckpointError(f"{source}: config block is not UTF-8 ({e})")
    step, epoch, count = r.unpack("<QII")
    records = OrderedDict()
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        if name in records:
            raise CheckpointError(f"{source}: duplicate record {name!r}")
        records[name] = from_bytes(r.take(4 * size), shape)
    if r.pos != len(blob):
        raise CheckpointError(f"{source}: {len(blob) - r.pos} trailing bytes after the last record")
    return CheckpointData(config_text, step, epoch, records)


def write(path: str, data: CheckpointData) -> str:
    ensure_parent(path)
    blob = encode(data)
    with open(path, "wb") as f:
        f.write(blob)
    log.info("saved %d tensors to %s", len(data.records), path)
    return path


def read(path: str) -> CheckpointData:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}")
    return decode(blob, path)
