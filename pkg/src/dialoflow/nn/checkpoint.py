"""DLSP1 tensor container.

Layout: 8-byte magic ``DLSP0001``, u64 little-endian header length, UTF-8 JSON
header ``{name: {"dtype": "f32", "shape": [...], "offset": o, "nbytes": n}}``,
then the raw little-endian payload. Offsets are relative to the payload start
and 64-byte aligned. An optional ``"__meta__"`` header entry carries free-form
JSON metadata (model config and the like).
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from .params import ParamStore

MAGIC = b"DLSP0001"
ALIGN = 64
META_KEY = "__meta__"


class CheckpointError(Exception):
    pass


class CorruptHeaderError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


def _pad(n: int) -> int:
    return (-n) % ALIGN


def encode_tensors(arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> bytes:
    header: dict = {}
    chunks: list[bytes] = []
    offset = 0
    for name, arr in arrays.items():
        if name == META_KEY:
            raise ValueError(f"{META_KEY!r} is reserved")
        raw = np.ascontiguousarray(np.asarray(arr, dtype="<f4")).tobytes()
        header[name] = {"dtype": "f32", "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)}
        chunks.append(raw + b"\0" * _pad(len(raw)))
        offset += len(raw) + _pad(len(raw))
    if meta is not None:
        header[META_KEY] = meta
    hbytes = json.dumps(header, sort_keys=False, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(chunks)


def decode_tensors(blob: bytes) -> tuple[dict[str, np.ndarray], dict | None]:
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CorruptHeaderError("bad magic: not a DLSP1 container")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if 16 + hlen > len(blob):
        raise CorruptHeaderError("header length exceeds file size")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeaderError(f"unreadable header: {exc}") from None
    if not isinstance(header, dict):
        raise CorruptHeaderError("header is not a JSON object")
    payload = memoryview(blob)[16 + hlen:]
    meta = header.pop(META_KEY, None)
    out: dict[str, np.ndarray] = {}
    for name, entry in header.items():
        try:
            dtype, shape, offset, nbytes = entry["dtype"], entry["shape"], int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError, ValueError):
            raise CorruptHeaderError(f"malformed entry for {name!r}") from None
        if dtype != "f32" or offset % ALIGN or offset < 0:
            raise CorruptHeaderError(f"bad dtype or offset for {name!r}")
        count = int(np.prod(shape)) if shape else 1
        if count * 4 != nbytes:
            raise ShapeMismatchError(f"{name!r}: shape {shape} needs {count * 4} bytes, header says {nbytes}")
        if offset + nbytes > len(payload):
            raise TruncatedPayloadError(f"truncated payload: {name!r} needs bytes up to {offset + nbytes}, have {len(payload)}")
        arr = np.frombuffer(payload[offset:offset + nbytes], dtype="<f4").reshape(shape)
        out[name] = arr.astype(np.float64)
    return out, meta


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensors(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    atomic_write_bytes(path, encode_tensors(arrays, meta))


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict | None]:
    return decode_tensors(Path(path).read_bytes())


def checkpoint_save(params: ParamStore, path, meta: dict | None = None) -> None:
    save_tensors(path, params.arrays(), meta)


def checkpoint_load(path) -> ParamStore:
    arrays, _ = load_tensors(path)
    return ParamStore.from_arrays(arrays)


def load_checkpoint_with_meta(path) -> tuple[ParamStore, dict | None]:
    arrays, meta = load_tensors(path)
    return ParamStore.from_arrays(arrays), meta


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
