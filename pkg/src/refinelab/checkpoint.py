"""Binary checkpoint format ("RFCK").

Layout, all little-endian::

    "RFCK" | u16 version=1 | entry table | u8 has_snapshot | [entry table] | u32 crc32

    entry table := u32 count, then per entry:
        u16 path length | UTF-8 path | u8 role tag | u8 rank | u32 dims[rank] | f32 payload

The CRC covers every byte before it.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from refinelab.backbone import ROLE_TAG, ROLES, Entry, ParamRegistry

MAGIC = b"RFCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class DuplicatePathError(CheckpointError):
    pass


def _write_table(out: list[bytes], table: dict[str, Entry]) -> None:
    out.append(struct.pack("<I", len(table)))
    for path, e in table.items():
        raw = path.encode("utf-8")
        arr = np.ascontiguousarray(e.array, dtype="<f4")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BB", ROLE_TAG[e.role], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())


def to_bytes(reg: ParamRegistry) -> bytes:
    parts: list[bytes] = [MAGIC, struct.pack("<H", VERSION)]
    _write_table(parts, dict(reg.entries()))
    if reg.init_snapshot is None:
        parts.append(b"\x00")
    else:
        parts.append(b"\x01")
        _write_table(parts, reg.init_snapshot)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_table(r: _Reader) -> dict[str, Entry]:
    (count,) = r.unpack("<I")
    table: dict[str, Entry] = {}
    for _ in range(count):
        (plen,) = r.unpack("<H")
        try:
            path = r.take(plen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("entry path is not valid UTF-8") from exc
        tag, rank = r.unpack("<BB")
        if tag >= len(ROLES):
            raise CheckpointError(f"unknown role tag {tag} for {path!r}")
        dims = r.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
        if path in table:
            raise DuplicatePathError(f"duplicate path {path!r} in checkpoint")
        table[path] = Entry(arr, ROLES[tag])
    return table


def from_bytes(buf: bytes) -> ParamRegistry:
    if len(buf) < 6:
        raise TruncatedFileError("checkpoint shorter than its header")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<H", buf[4:6])
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this reader handles {VERSION}")
    r = _Reader(buf)
    r.pos = 6
    entries = _read_table(r)
    (flag,) = r.unpack("<B")
    snapshot = _read_table(r) if flag else None
    rest = len(buf) - r.pos
    if rest < 4:
        raise TruncatedFileError("checkpoint truncated before its checksum")
    if rest > 4:
        raise CheckpointError(f"{rest - 4} unexpected trailing bytes")
    (crc,) = struct.unpack("<I", buf[r.pos:])
    if zlib.crc32(buf[:r.pos]) != crc:
        raise ChecksumError("checkpoint CRC32 mismatch")
    reg = ParamRegistry()
    reg._entries = entries
    reg.init_snapshot = snapshot
    return reg


def save_checkpoint(reg: ParamRegistry, path) -> None:
    Path(path).write_bytes(to_bytes(reg))


def load_checkpoint(path) -> ParamRegistry:
    return from_bytes(Path(path).read_bytes())
