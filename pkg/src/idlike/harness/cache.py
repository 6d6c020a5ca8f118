"""Embedding cache: a fixed binary matrix plus a JSONL sidecar index.

Binary layout (little-endian)::

    magic    8 bytes  b"IDLKEMBD"
    version  uint32
    dim      uint32
    count    uint64
    body     count * dim float32, row-major

The sidecar (``<file>.idx.jsonl``) has one ``{"sample_id", "row", "label"?}``
object per line.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from ..errors import CacheFormatError

MAGIC = b"IDLKEMBD"
VERSION = 1
_HEADER = struct.Struct("<8sIIQ")
_F32 = np.dtype("<f4")
ENV_VAR = "IDLIKE_CACHE_DIR"


def cache_dir(default) -> Path:
    return Path(os.environ.get(ENV_VAR) or default)


def index_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".idx.jsonl")


def matrix_bytes(embs) -> bytes:
    a = np.ascontiguousarray(embs, dtype=_F32)
    if a.ndim != 2:
        raise CacheFormatError(f"expected a 2-D matrix, got shape {a.shape}")
    return _HEADER.pack(MAGIC, VERSION, a.shape[1], a.shape[0]) + a.tobytes()


def read_matrix(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise CacheFormatError("truncated header")
    magic, version, dim, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CacheFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CacheFormatError(f"unsupported cache version {version}")
    body = data[_HEADER.size:]
    if len(body) != count * dim * 4:
        raise CacheFormatError(f"body has {len(body)} bytes, header implies {count * dim * 4}")
    return np.frombuffer(body, dtype=_F32).reshape(count, dim).copy()


def write_cache(path, sample_ids, embs, labels=None) -> Path:
    path = Path(path)
    embs = np.asarray(embs)
    if len(sample_ids) != embs.shape[0]:
        raise CacheFormatError(f"{len(sample_ids)} ids for {embs.shape[0]} rows")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(matrix_bytes(embs))
    lines = []
    for row, sid in enumerate(sample_ids):
        rec = {"sample_id": sid, "row": row}
        if labels is not None and labels[row] is not None:
            rec["label"] = int(labels[row])
        lines.append(json.dumps(rec, sort_keys=True))
    index_path(path).write_text("".join(line + "\n" for line in lines))
    return path


def read_cache(path):
    """``(sample_ids, float32 matrix, labels)`` with labels ``None`` where absent."""
    path = Path(path)
    embs = read_matrix(path.read_bytes())
    ids, labels = [], []
    for n, line in enumerate(index_path(path).read_text().splitlines()):
        rec = json.loads(line)
        if rec["row"] != n or rec["row"] >= embs.shape[0]:
            raise CacheFormatError(f"index row {rec['row']} out of place (line {n}, count {embs.shape[0]})")
        ids.append(rec["sample_id"])
        labels.append(rec.get("label"))
    if len(ids) != embs.shape[0]:
        raise CacheFormatError(f"index lists {len(ids)} rows, matrix has {embs.shape[0]}")
    return ids, embs, labels
