"""
Utility helpers shared across the toolkit
Atomic file writes, checksums and small list/string helpers
"""

import hashlib
import logging
import os
import re
from pathlib import Path
from typing import List, Sequence, TypeVar, Union

logger = logging.getLogger(__name__)

T = TypeVar("T")


def atomic_write_bytes(path: Union[str, Path], data: bytes) -> None:
    """
    Write bytes through a temporary sibling file and an atomic replace

    Args:
        path: Destination file
        data: Full file contents
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_file = path.with_name(path.name + ".tmp")
    try:
        with open(temp_file, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        temp_file.replace(path)
    except Exception as e:
        logger.error(f"Error writing {path}: {e}")
        if temp_file.exists():
            try:
                temp_file.unlink()
            except OSError:
                pass
        raise


def atomic_write_text(path: Union[str, Path], text: str) -> None:
    """Text variant of atomic_write_bytes (UTF-8, newline untranslated)"""
    atomic_write_bytes(path, text.encode("utf-8"))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Union[str, Path]) -> str:
    """Hex digest of a file's contents"""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def chunk_list(items: Sequence[T], chunk_size: int) -> List[Sequence[T]]:
    """
    Split a sequence into consecutive chunks

    Args:
        items: Sequence to chunk
        chunk_size: Size of each chunk (the last may be shorter)

    Returns:
        List of chunks
    """
    if chunk_size <= 0:
        raise ValueError("Chunk size must be positive")
    return [items[i:i + chunk_size] for i in range(0, len(items), chunk_size)]


def sanitize_filename(filename: str) -> str:
    """
    Make a sample id or label safe to use as a file name

    Args:
        filename: Original name

    Returns:
        Sanitized name
    """
    sanitized = re.sub(r'[<>:"/\\|?*\s]+', "_", filename).strip("_")
    return sanitized or "unnamed"

