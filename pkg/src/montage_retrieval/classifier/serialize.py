"""Binary model container.

Layout (all integers little-endian)::

    magic      8 bytes   b"CTMONTNN"
    version    u32
    meta_len   u32, then meta_len bytes of UTF-8 JSON
               {"arch": descriptor, "provenance": {...}, "extra": {...}}
    n_arrays   u32
    per array: u16 name_len, name, u8 ndim, ndim x u32 shape,
               float32 little-endian values (C order)
    crc32      u32 over every byte from n_arrays up to here
"""
from __future__ import annotations

import json
import struct
import zlib
from collections import OrderedDict
from pathlib import Path

import numpy as np

from ..errors import BadMagic, ChecksumMismatch, DescriptorMismatch, IoFailure, TruncatedFile, VersionMismatch
from .model import ArchitectureDescriptor, Model, layer_specs

MAGIC = b"CTMONTNN"
VERSION = 1


def encode_model(model: Model, extra=None) -> bytes:
    meta = {"arch": model.arch.to_dict(), "provenance": model.provenance, "extra": extra or {}}
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    blobs = [struct.pack("<I", len(model.params))]
    for name, arr in model.params.items():
        nb = name.encode()
        blobs.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        blobs.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        blobs.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(blobs)
    return (MAGIC + struct.pack("<II", VERSION, len(meta_bytes)) + meta_bytes
            + body + struct.pack("<I", zlib.crc32(body)))


def save_model(model: Model, path, extra=None) -> None:
    try:
        Path(path).write_bytes(encode_model(model, extra))
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


class _Reader:
    def __init__(self, raw):
        self.raw, self.pos = raw, 0

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise TruncatedFile(f"model file ends at byte {len(self.raw)}, needed {self.pos + n}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_model(raw: bytes, expected: ArchitectureDescriptor | str | None = None):
    """Parse a model container; returns ``(model, extra)``."""
    r = _Reader(raw)
    if r.take(len(MAGIC)) != MAGIC:
        raise BadMagic("not a model file")
    version, meta_len = r.unpack("<II")
    if version != VERSION:
        raise VersionMismatch(f"file version {version}, reader supports {VERSION}")
    meta = json.loads(r.take(meta_len).decode())
    arch = ArchitectureDescriptor.from_dict(meta["arch"])
    if isinstance(expected, str) and arch.preset != expected:
        raise DescriptorMismatch(f"file holds preset {arch.preset!r}, expected {expected!r}")
    if isinstance(expected, ArchitectureDescriptor) and arch != expected:
        raise DescriptorMismatch(f"file descriptor {arch.to_dict()} != expected {expected.to_dict()}")

    body_start = r.pos
    (n,) = r.unpack("<I")
    params = OrderedDict()
    for _ in range(n):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float64)
    body_end = r.pos
    tail = raw[body_end:body_end + 4]
    if len(tail) < 4 or struct.unpack("<I", tail)[0] != zlib.crc32(raw[body_start:body_end]):
        raise ChecksumMismatch("parameter checksum does not match")

    want = {}
    for lname, out, inp, k in layer_specs(arch):
        want[lname + ".w"] = (out, inp) if k is None else (out, inp, k, k)
        want[lname + ".b"] = (out,)
    got = {k: v.shape for k, v in params.items()}
    if got != want:
        raise DescriptorMismatch("parameter arrays do not match the stored descriptor")
    return Model(arch, params, meta.get("provenance", {})), meta.get("extra", {})


def load_model(path, expected=None) -> Model:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise IoFailure(str(e)) from e
    return decode_model(raw, expected)[0]


def load_model_with_meta(path, expected=None):
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise IoFailure(str(e)) from e
    return decode_model(raw, expected)
