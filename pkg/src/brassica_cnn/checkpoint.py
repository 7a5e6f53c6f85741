"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic        8 bytes  b"BRSNET01"
    version      u32      currently 1
    n_layers     u32
    n_layers records, each:
        length   u32      byte length of the record body
        body     u8 kind length, kind (ascii), u32 n_values, n_values x f64
    payload_len  u64      byte length of the payload
    payload      f32 LE   per layer in spec order: weight then bias
    crc          u32      CRC-32 (IEEE) of the payload bytes
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .net import Network, describe, param_shapes, spec_digest, spec_from_values, spec_values
from .tensor import ShapeError

MAGIC = b"BRSNET01"
VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class CrcError(CheckpointError):
    pass


class SpecMismatchError(CheckpointError):
    def __init__(self, expected_digest: str, found_digest: str):
        super().__init__(f"checkpoint architecture {found_digest} does not match expected {expected_digest}")
        self.expected_digest = expected_digest
        self.found_digest = found_digest


def _encode_header(specs) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(specs))]
    for spec in specs:
        kind = spec.kind.encode("ascii")
        values = spec_values(spec)
        body = struct.pack("<B", len(kind)) + kind + struct.pack(f"<I{len(values)}d", len(values), *values)
        parts.append(struct.pack("<I", len(body)) + body)
    return b"".join(parts)


def to_bytes(net: Network) -> bytes:
    chunks = []
    for spec, group in zip(net.specs, net.params):
        for key in param_shapes(spec):
            chunks.append(np.ascontiguousarray(group[key], dtype="<f4").tobytes())
    payload = b"".join(chunks)
    return (
        _encode_header(net.specs)
        + struct.pack("<Q", len(payload))
        + payload
        + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    )


def save_checkpoint(net: Network, path) -> None:
    Path(path).write_bytes(to_bytes(net))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"file ends at byte {len(self.data)} while reading {what} at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(data: bytes, expected_specs=None) -> Network:
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise BadMagicError("not a network checkpoint (bad magic)")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (n_layers,) = r.unpack("<I", "layer count")
    specs = []
    for idx in range(n_layers):
        (length,) = r.unpack("<I", f"record {idx} length")
        body = _Reader(r.take(length, f"record {idx}"))
        try:
            (klen,) = body.unpack("<B", "kind length")
            kind = body.take(klen, "kind").decode("ascii")
            (nvals,) = body.unpack("<I", "value count")
            values = body.unpack(f"<{nvals}d", "values")
            specs.append(spec_from_values(kind, values))
        except (TruncatedError, UnicodeDecodeError, ValueError) as exc:
            raise CheckpointError(f"malformed layer record {idx}: {exc}") from None
    if expected_specs is not None and list(expected_specs) != specs:
        raise SpecMismatchError(spec_digest(expected_specs), spec_digest(specs))
    (payload_len,) = r.unpack("<Q", "payload length")
    payload = r.take(payload_len, "payload")
    (crc,) = r.unpack("<I", "crc")
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CrcError(f"payload CRC mismatch (stored {crc:08x})")
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after checkpoint")

    if payload_len % 4:
        raise CheckpointError(f"payload length {payload_len} is not a whole number of float32 values")
    flat = np.frombuffer(payload, dtype="<f4")
    params, offset = [], 0
    for spec in specs:
        group = {}
        for key, shape in param_shapes(spec).items():
            size = int(np.prod(shape))
            if offset + size > flat.size:
                raise CheckpointError(f"payload too short for {describe(spec)}")
            group[key] = flat[offset:offset + size].astype(np.float32).reshape(shape)
            offset += size
        params.append(group)
    if offset != flat.size:
        raise CheckpointError(f"payload holds {flat.size} floats but the layers need {offset}")
    try:
        return Network(specs, params, allow_any_kernel=True)
    except ShapeError as exc:
        raise CheckpointError(f"checkpoint describes an inconsistent network: {exc}") from None


def load_checkpoint(path, expected_specs=None) -> Network:
    return from_bytes(Path(path).read_bytes(), expected_specs)
