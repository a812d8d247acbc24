"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"DSMM" | u32 format version | u32 header length | header JSON
    | u32 tensor count
    | per tensor: u32 name length, name, u32 ndim, u64 dims..., f64 data
    | u32 CRC-32 of every preceding byte
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ChecksumError, TruncatedError, VersionMismatchError
from .trainer import Checkpoint

MAGIC = b"DSMM"
FORMAT_VERSION = 1


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header = json.dumps(
        {"config": ckpt.config, "epoch": ckpt.epoch, "rng_state": ckpt.rng_state,
         "meta": ckpt.meta},
        sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header,
             struct.pack("<I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.array(ckpt.tensors[name], dtype="<f8", order="C")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < 8:
        raise TruncatedError(f"checkpoint is only {len(blob)} bytes")
    if blob[:4] != MAGIC:
        raise BadMagicError("not a checkpoint file (bad magic bytes)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format {version}, this build reads {FORMAT_VERSION}")
    if len(blob) < 12:
        raise TruncatedError("checkpoint ends inside the header")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint checksum mismatch (file truncated or corrupted)")
    try:
        off = 8
        (hlen,) = struct.unpack_from("<I", body, off)
        off += 4
        header = json.loads(body[off:off + hlen])
        off += hlen
        (count,) = struct.unpack_from("<I", body, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, off)
            off += 4
            name = body[off:off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<I", body, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}Q", body, off)
            off += 8 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if off + 8 * n > len(body):
                raise TruncatedError(f"tensor {name!r} runs past the end of the file")
            tensors[name] = np.frombuffer(body, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
            off += 8 * n
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise TruncatedError(f"malformed checkpoint body: {exc}") from exc
    if off != len(body):
        raise TruncatedError("trailing bytes after the last tensor")
    return Checkpoint(config=header["config"], tensors=tensors, epoch=header["epoch"],
                      rng_state=header["rng_state"], meta=header["meta"])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
