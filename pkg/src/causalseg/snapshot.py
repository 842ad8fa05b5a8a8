"""Length-prefixed, checksummed, named-section binary container.

Shared by model snapshots ("CSLM1") and reasoner sidecars ("CSLR1").
Sections are written sorted by name with per-section SHA-256, so
save -> load -> save reproduces files byte-for-byte.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MODEL_MAGIC = b"CSLM1"
REASONER_MAGIC = b"CSLR1"


class SnapshotFormatError(ValueError):
    pass


class CorruptSectionError(ValueError):
    pass


def write_container(path, magic: bytes, sections: dict) -> None:
    chunks = [magic, struct.pack("<I", len(sections))]
    for name in sorted(sections):
        payload = sections[name]
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack("<Q", len(payload)))
        chunks.append(hashlib.sha256(payload).digest())
        chunks.append(payload)
    Path(path).write_bytes(b"".join(chunks))


def read_container(path, magic: bytes) -> dict:
    buf = Path(path).read_bytes()
    if buf[: len(magic)] != magic:
        raise SnapshotFormatError(
            f"{path}: expected {magic.decode()} container, got {buf[:len(magic)]!r}"
        )
    off = len(magic)
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    sections = {}
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            (plen,) = struct.unpack_from("<Q", buf, off)
            off += 8
            digest = buf[off : off + 32]
            off += 32
            payload = buf[off : off + plen]
            off += plen
        except (struct.error, UnicodeDecodeError) as exc:
            raise CorruptSectionError(f"{path}: truncated section table") from exc
        if len(payload) != plen or hashlib.sha256(payload).digest() != digest:
            raise CorruptSectionError(f"{path}: section {name!r} failed its checksum")
        sections[name] = payload
    return sections


def weights_to_bytes(params: dict) -> bytes:
    chunks = [struct.pack("<I", len(params))]
    for name in sorted(params):
        t = params[name]
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)) + nb)
        flags = 1 if t.requires_grad else 0
        chunks.append(struct.pack("<BB", flags, t.data.ndim))
        chunks.append(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        chunks.append(t.data.astype("<f8").tobytes())
    return b"".join(chunks)


def weights_from_bytes(buf: bytes) -> dict:
    (count,) = struct.unpack_from("<I", buf, 0)
    off = 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        flags, ndim = struct.unpack_from("<BB", buf, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
        params[name] = Tensor(data, requires_grad=bool(flags & 1))
    return params
