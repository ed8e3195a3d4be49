"""Tagged little-endian binary container shared by checkpoints, caches and datasets.

Layout::

    magic (4 bytes) | version u32 | n_sections u32
    repeated: tag (4 bytes) | length u64 | payload
    crc32 u32 over everything before it
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from pathlib import Path

from .errors import ChecksumMismatch, FormatVersionMismatch

_HEAD = struct.Struct("<4sII")
_SECTION = struct.Struct("<4sQ")
_CRC = struct.Struct("<I")


def pack(magic: bytes, version: int, sections: list[tuple[bytes, bytes]]) -> bytes:
    parts = [_HEAD.pack(magic, version, len(sections))]
    for tag, payload in sections:
        if len(tag) != 4:
            raise ValueError(f"section tag must be 4 bytes: {tag!r}")
        parts.append(_SECTION.pack(tag, len(payload)))
        parts.append(payload)
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def unpack(data: bytes, magic: bytes, max_version: int) -> tuple[int, list[tuple[bytes, bytes]]]:
    if len(data) < _HEAD.size + _CRC.size:
        raise ChecksumMismatch("file too short to hold a container")
    got_magic, version, n_sections = _HEAD.unpack_from(data, 0)
    if got_magic != magic:
        raise ValueError(f"bad magic {got_magic!r}, expected {magic!r}")
    if version > max_version:
        raise FormatVersionMismatch(
            f"{magic.decode()} container version {version} is newer than supported version {max_version}"
        )
    body, (crc,) = data[: -_CRC.size], _CRC.unpack(data[-_CRC.size :])
    if zlib.crc32(body) != crc:
        raise ChecksumMismatch(f"{magic.decode()} container CRC32 mismatch (truncated or corrupted)")
    sections = []
    off = _HEAD.size
    for _ in range(n_sections):
        tag, length = _SECTION.unpack_from(body, off)
        off += _SECTION.size
        sections.append((tag, body[off : off + length]))
        off += length
    if off != len(body):
        raise ChecksumMismatch("trailing bytes after last section")
    return version, sections


def write_file(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
