"""
Self-describing binary container for named arrays plus a JSON header
Used for model checkpoints (magic AVTC) and feature files (magic AVTF);
byte layout documented in file_formats.md
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

from errors import FormatError
from utils import atomic_write_bytes

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"AVTC"
CONTAINER_VERSION = 1
_PREFIX = struct.Struct("<4sHHQ")  # magic, version, reserved, header length
PREFIX_SIZE = _PREFIX.size

_ALLOWED_DTYPES = {"<f4", "<f8", "<i8", "<i4", "|u1", "|b1"}


def _little_endian(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    if array.dtype.byteorder == ">" or (array.dtype.byteorder == "=" and not np.little_endian):
        array = array.astype(array.dtype.newbyteorder("<"))
    return array


def encode_container(magic: bytes, header: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> bytes:
    """
    Serialize named arrays and a JSON-able header

    Args:
        magic: 4-byte file identifier
        header: Extra JSON-serializable metadata
        arrays: Name -> array, written in insertion order

    Returns:
        Encoded bytes
    """
    if len(magic) != 4:
        raise ValueError("magic must be exactly 4 bytes")

    index = []
    payloads = []
    offset = 0
    for name, array in arrays.items():
        array = _little_endian(np.asarray(array))
        dtype = array.dtype.str
        if dtype not in _ALLOWED_DTYPES:
            raise FormatError(f"unsupported dtype {dtype} for array {name}")
        raw = array.tobytes(order="C")
        index.append({"name": name, "dtype": dtype, "shape": list(array.shape),
                      "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)

    header_bytes = json.dumps({**header, "arrays": index}, sort_keys=True).encode("utf-8")
    prefix = _PREFIX.pack(magic, CONTAINER_VERSION, 0, len(header_bytes))
    return prefix + header_bytes + b"".join(payloads)


def decode_container(blob: bytes, magic: bytes) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """
    Parse bytes produced by encode_container

    Returns:
        (header without the array index, name -> array)

    Raises:
        FormatError: Wrong magic, unsupported version, bad header or truncated payload
    """
    if len(blob) < _PREFIX.size:
        raise FormatError("file shorter than container prefix", offset=len(blob))
    found_magic, version, _, header_len = _PREFIX.unpack_from(blob, 0)
    if found_magic != magic:
        raise FormatError(f"bad magic {found_magic!r}, expected {magic!r}", offset=0)
    if version != CONTAINER_VERSION:
        raise FormatError(f"unsupported container version {version}", offset=4)

    header_start = _PREFIX.size
    payload_start = header_start + header_len
    if payload_start > len(blob):
        raise FormatError("truncated header", offset=len(blob))
    try:
        header = json.loads(blob[header_start:payload_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt header: {e}", offset=header_start) from e

    arrays: Dict[str, np.ndarray] = {}
    for entry in header.pop("arrays", []):
        start = payload_start + int(entry["offset"])
        end = start + int(entry["nbytes"])
        if end > len(blob):
            raise FormatError(f"truncated payload for array {entry['name']}", offset=len(blob))
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if expected != int(entry["nbytes"]):
            raise FormatError(f"array {entry['name']} size does not match its shape {shape}", offset=start)
        arrays[entry["name"]] = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)),
                                              offset=start).reshape(shape).copy()
    return header, arrays


@dataclass
class Checkpoint:
    """Parameters, optimizer buffers and the run header of a saved model"""
    tensors: Dict[str, np.ndarray]
    config: Dict[str, Any] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)

    def subset(self, prefix: str) -> Dict[str, np.ndarray]:
        """Arrays whose name starts with prefix, prefix stripped"""
        return {name[len(prefix):]: value for name, value in self.tensors.items() if name.startswith(prefix)}


def save_checkpoint(path: Union[str, Path], tensors: Dict[str, np.ndarray],
                    config: Dict[str, Any], meta: Dict[str, Any]) -> Path:
    """Atomically write a checkpoint file"""
    path = Path(path)
    blob = encode_container(CHECKPOINT_MAGIC, {"config": config, "meta": meta}, tensors)
    atomic_write_bytes(path, blob)
    logger.info(f"Checkpoint written to {path} ({len(tensors)} arrays, {len(blob)} bytes)")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Read a checkpoint written by save_checkpoint"""
    path = Path(path)
    header, arrays = decode_container(path.read_bytes(), CHECKPOINT_MAGIC)
    logger.info(f"Loaded checkpoint {path} ({len(arrays)} arrays)")
    return Checkpoint(tensors=arrays, config=header.get("config", {}), meta=header.get("meta", {}))
