"""Low-level helpers for the package's binary file formats.

Every format is a short ASCII header followed by raw little-endian float32
payload in C order (last axis fastest).  Writers are byte-deterministic:
the same value always produces the same file.
"""

from __future__ import annotations

import numpy as np

# refuse payloads above 2 GiB; desk-scale files are kilobytes
MAX_PAYLOAD_BYTES = 2 ** 31
MAX_DIM = 100_000


class FileFormatError(ValueError):
    """Base class for malformed files."""


class BadMagicError(FileFormatError):
    """The file does not start with the expected magic string/version."""


class TruncatedPayloadError(FileFormatError):
    """The file ends before the declared payload (or header) is complete."""


class DimOverflowError(FileFormatError):
    """Declared dimensions are non-positive or implausibly large."""


def encode_f32(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def decode_f32(raw: bytes, shape, what: str) -> np.ndarray:
    n = int(np.prod(shape))
    if len(raw) < 4 * n:
        raise TruncatedPayloadError(f"{what}: payload has {len(raw)} bytes, expected {4 * n}")
    return np.frombuffer(raw[: 4 * n], dtype="<f4").reshape(shape)


def check_dims(dims, what: str) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if any(d < 1 for d in dims):
        raise DimOverflowError(f"{what}: non-positive dims {dims}")
    if any(d > MAX_DIM for d in dims) or 4 * int(np.prod(dims, dtype=np.int64)) > MAX_PAYLOAD_BYTES:
        raise DimOverflowError(f"{what}: dims {dims} exceed the payload cap")
    return dims


def read_header_line(f, what: str) -> str:
    """Read one newline-terminated ASCII line from a binary stream."""
    buf = bytearray()
    while True:
        ch = f.read(1)
        if not ch:
            raise TruncatedPayloadError(f"{what}: header ended early")
        if ch == b"\n":
            break
        buf += ch
        if len(buf) > 4096:
            raise FileFormatError(f"{what}: header line too long")
    try:
        return buf.decode("ascii")
    except UnicodeDecodeError as e:
        raise FileFormatError(f"{what}: header is not ASCII") from e
