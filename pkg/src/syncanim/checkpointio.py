"""Versioned binary container for named tensors plus a JSON metadata block.

Layout: 6-byte magic (format id + version), u32 little-endian header
length, UTF-8 JSON header, then the raw little-endian tensor payload.
Tensors are stored sorted by name so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptHeader

POSE_MAGIC = b"SYA2P\x01"
EXPRESSION_MAGIC = b"SYA2E\x01"
FIELD_MAGIC = b"SYFLD\x01"

_DTYPES = {"f4": "<f4", "f8": "<f8", "i4": "<i4", "i8": "<i8", "u1": "|u1"}
_DTYPE_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


def write_container(
    path: Path | str, magic: bytes, tensors: dict[str, np.ndarray], meta: dict
) -> None:
    if len(magic) != 6:
        raise ValueError(f"magic must be 6 bytes, got {magic!r}")
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        code = _DTYPE_CODES.get(arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype)
        if code is None:
            raise ValueError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        arr = arr.astype(_DTYPES[code], copy=False)
        blob = arr.tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": code, "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_container(path: Path | str, magic: bytes) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 10:
        raise CorruptHeader(f"{path}: file too small for a container header")
    if raw[:6] != magic:
        raise CorruptHeader(f"{path}: magic {raw[:6]!r} does not match expected {magic!r}")
    (hlen,) = struct.unpack("<I", raw[6:10])
    if len(raw) < 10 + hlen:
        raise CorruptHeader(f"{path}: truncated header")
    try:
        header = json.loads(raw[10 : 10 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeader(f"{path}: bad header JSON: {exc}") from exc
    payload = raw[10 + hlen :]
    tensors: dict[str, np.ndarray] = {}
    for ent in header["tensors"]:
        start, nbytes = ent["offset"], ent["nbytes"]
        if start + nbytes > len(payload):
            raise CorruptHeader(f"{path}: tensor {ent['name']!r} runs past end of file")
        arr = np.frombuffer(payload[start : start + nbytes], dtype=_DTYPES[ent["dtype"]])
        tensors[ent["name"]] = arr.reshape(ent["shape"]).copy()
    return tensors, header["meta"]
