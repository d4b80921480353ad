"""Header + blob container shared by the bank, text-bank and dataset files.

Layout::

    <magic> <version>\\n
    <one-line JSON header>\\n
    <raw little-endian float32 payload>

The header always carries ``blob_bytes`` so truncation is detectable.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from .errors import (
    ContainerError,
    InconsistentHeaderError,
    TruncatedBlobError,
    VersionMismatchError,
)

FLOAT_DTYPE = np.dtype("<f4")


def encode(magic: str, version: int, header: dict, payload: np.ndarray) -> bytes:
    blob = np.ascontiguousarray(payload, dtype=FLOAT_DTYPE).tobytes()
    header = dict(header, blob_bytes=len(blob))
    text = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return f"{magic} {version}\n".encode() + text.encode() + b"\n" + blob


def decode(data: bytes, magic: str, version: int) -> tuple[dict, np.ndarray]:
    """Split ``data`` into (header, float32 payload) after checking magic and version."""
    first, sep, rest = data.partition(b"\n")
    if not sep:
        raise ContainerError("missing container preamble")
    parts = first.decode("ascii", errors="replace").split(" ")
    if len(parts) != 2 or parts[0] != magic:
        raise ContainerError(f"not a {magic} container")
    try:
        found = int(parts[1])
    except ValueError as exc:
        raise ContainerError(f"bad version field {parts[1]!r}") from exc
    if found != version:
        raise VersionMismatchError(f"{magic} version {found} unsupported (expected {version})")

    text, sep, blob = rest.partition(b"\n")
    if not sep:
        raise TruncatedBlobError("header line is not terminated")
    try:
        header = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InconsistentHeaderError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict) or "blob_bytes" not in header:
        raise InconsistentHeaderError("header lacks blob_bytes")

    expected = header["blob_bytes"]
    if len(blob) < expected:
        raise TruncatedBlobError(f"payload has {len(blob)} bytes, header declares {expected}")
    if len(blob) > expected or expected % FLOAT_DTYPE.itemsize:
        raise InconsistentHeaderError(f"payload size {len(blob)} disagrees with header ({expected})")
    payload = np.frombuffer(blob, dtype=FLOAT_DTYPE)
    return header, payload


def write_bytes_atomic(path: str | os.PathLike, data: bytes) -> None:
    """Write via a sibling temp file so a failed write never leaves a partial file."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_bytes(path: str | os.PathLike) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def require(condition: bool, message: str) -> None:
    if not condition:
        raise InconsistentHeaderError(message)
