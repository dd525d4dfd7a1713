"""Checkpoint archive: magic, length-prefixed JSON manifest, raw float32 payloads.

Layout
    b"WMCKPT1\\0"
    uint64 little-endian manifest length
    manifest (UTF-8 JSON, sorted keys)
    concatenated little-endian tensor payloads

The manifest records name, dtype, shape and byte offset (relative to the
payload start) of every tensor, plus arbitrary metadata such as the config
hash, step counter and RNG states. Float tensors are stored as float32;
integer tensors keep their integer dtype.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np
import torch

MAGIC = b"WMCKPT1\0"
_DTYPES = {"float32": np.dtype("<f4"), "int64": np.dtype("<i8"), "uint8": np.dtype("u1"), "bool": np.dtype("?")}


class CheckpointError(Exception):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


def _as_array(t) -> tuple[str, np.ndarray]:
    a = t.detach().cpu().numpy() if torch.is_tensor(t) else np.asarray(t)
    if a.dtype == np.bool_:
        return "bool", a.astype("?")
    if np.issubdtype(a.dtype, np.floating):
        return "float32", a.astype("<f4")
    if a.dtype == np.uint8:
        return "uint8", a
    if np.issubdtype(a.dtype, np.integer):
        return "int64", a.astype("<i8")
    raise CheckpointError(f"unsupported dtype {a.dtype}")


def encode_archive(tensors: dict, meta: Optional[dict] = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        kind, arr = _as_array(tensors[name])
        raw = np.ascontiguousarray(arr).tobytes()
        entries.append({"name": name, "dtype": kind, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {"tensors": entries, "meta": meta or {}, "payload_bytes": offset,
                "payload_sha256": hashlib.sha256(payload).hexdigest()}
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(mbytes)) + mbytes + payload


def decode_archive(data: bytes) -> tuple[dict, dict]:
    if len(data) < len(MAGIC) + 8 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointCorruptError("not a checkpoint archive (bad magic or truncated header)")
    (mlen,) = struct.unpack("<Q", data[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if start + mlen > len(data):
        raise CheckpointCorruptError("truncated manifest")
    try:
        manifest = json.loads(data[start:start + mlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointCorruptError(f"unreadable manifest: {e}") from None
    payload = data[start + mlen:]
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointCorruptError(f"payload has {len(payload)} bytes, manifest says {manifest['payload_bytes']}")
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise CheckpointCorruptError("payload checksum mismatch")
    tensors = {}
    for e in manifest["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.copy())
    return tensors, manifest["meta"]


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_archive(path, tensors: dict, meta: Optional[dict] = None) -> str:
    """Write atomically; returns the sha256 of the file contents."""
    data = encode_archive(tensors, meta)
    atomic_write(path, data)
    return hashlib.sha256(data).hexdigest()


def load_archive(path, expected_config_hash: Optional[str] = None) -> tuple[dict, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    tensors, meta = decode_archive(path.read_bytes())
    if expected_config_hash is not None and meta.get("config_hash") != expected_config_hash:
        raise ConfigMismatchError(f"checkpoint config hash {meta.get('config_hash')} "
                                  f"does not match {expected_config_hash}")
    return tensors, meta


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
