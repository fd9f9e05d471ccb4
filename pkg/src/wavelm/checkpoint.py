"""Versioned binary containers for model parameters and token files.

Container layout (all little-endian):

    magic      8 bytes (per artifact kind)
    version    u32
    digest_len u32, digest utf-8 (sha256 hex of the canonical config)
    blob_count u32
    per blob:  name_len u32, name utf-8, rank u32, dims u32 each, f32 data

Architecture/config values needed to rebuild a model live in a JSON sidecar
(<file>.meta.json) whose "config" section must hash to the header digest.

Token file layout: K u32, r_samples u32, source_t u64, count u32, ids u32.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, is_dataclass
from pathlib import Path

import numpy as np

VERSION = 1
CODEC_MAGIC = b"VQCODEC\x00"
LM_MAGIC = b"TOKENLM\x00"
KMEANS_MAGIC = b"KMEANS\x00\x00"


class CheckpointError(ValueError):
    pass


def canonical_json(obj) -> str:
    if is_dataclass(obj) and not isinstance(obj, type):
        obj = asdict(obj)
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def _meta_path(path) -> Path:
    return Path(str(path) + ".meta.json")


def save_checkpoint(path, magic: bytes, config: dict, blobs: dict,
                    extra_meta: dict | None = None):
    """Write params atomically (temp file + rename) with a JSON sidecar."""
    if len(magic) != 8:
        raise CheckpointError("magic must be 8 bytes")
    digest = config_digest(config)
    parts = [magic, struct.pack("<I", VERSION)]
    dig = digest.encode("utf-8")
    parts.append(struct.pack("<I", len(dig)))
    parts.append(dig)
    parts.append(struct.pack("<I", len(blobs)))
    for name, arr in blobs.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)
    meta = {"config": config, "digest": digest}
    if extra_meta:
        meta.update(extra_meta)
    _meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path, expected_magic: bytes):
    """Return (digest, blobs, meta); verifies magic, version, and digest."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise CheckpointError(f"{path}: file too short")
    if raw[:8] != expected_magic:
        raise CheckpointError(
            f"{path}: bad magic {raw[:8]!r}, expected {expected_magic!r}")
    pos = 8
    (version,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (dlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    digest = raw[pos:pos + dlen].decode("utf-8")
    pos += dlen
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    blobs = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(dims)
        pos += 4 * n
        blobs[name] = arr.copy()
    meta_file = _meta_path(path)
    if not meta_file.exists():
        raise CheckpointError(f"{path}: missing sidecar {meta_file}")
    meta = json.loads(meta_file.read_text())
    if config_digest(meta["config"]) != digest:
        raise CheckpointError(f"{path}: sidecar config does not match header digest")
    return digest, blobs, meta


def save_tokens(path, k: int, r_samples: int, source_t: int, tokens):
    ids = np.ascontiguousarray(tokens, dtype="<u4")
    if ids.size and int(ids.max()) >= k:
        raise CheckpointError(f"token id {int(ids.max())} >= K={k}")
    hdr = struct.pack("<IIQI", k, r_samples, source_t, ids.size)
    Path(path).write_bytes(hdr + ids.tobytes())


def load_tokens(path):
    """Return (k, r_samples, source_t, ids)."""
    raw = Path(path).read_bytes()
    if len(raw) < 20:
        raise CheckpointError(f"{path}: token file too short")
    k, r_samples, source_t, count = struct.unpack_from("<IIQI", raw, 0)
    ids = np.frombuffer(raw, dtype="<u4", count=count, offset=20)
    if len(raw) < 20 + 4 * count:
        raise CheckpointError(f"{path}: truncated token data")
    if ids.size and int(ids.max()) >= k:
        raise CheckpointError(f"{path}: token id out of range")
    return k, r_samples, source_t, ids.astype(np.int64)
