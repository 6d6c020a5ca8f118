"""Prompt checkpoint file.

Layout (all little-endian)::

    magic        8 bytes   b"IDLKPRMT"
    version      uint32
    K, C, L, e   uint32 x 4
    step         uint64
    meta_len     uint32
    meta         meta_len bytes of UTF-8 JSON {"class_names": [...], "config": {...}}
    id_ctx       K*L*e float32, row-major
    ood_ctx      C*L*e float32, row-major
    class_tokens K*e   float32, row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointError
from .prompts import PromptSet

MAGIC = b"IDLKPRMT"
VERSION = 1
_HEADER = struct.Struct("<8sIIIIIQI")
_F32 = np.dtype("<f4")


def checkpoint_bytes(ps: PromptSet, step: int = 0, config: dict | None = None) -> bytes:
    meta = json.dumps({"class_names": list(ps.class_names), "config": config or {}},
                      sort_keys=True, separators=(",", ":")).encode("utf-8")
    header = _HEADER.pack(MAGIC, VERSION, ps.K, ps.C, ps.L, ps.text_context_dim, int(step), len(meta))
    body = b"".join(np.ascontiguousarray(a, dtype=_F32).tobytes()
                    for a in (ps.id_ctx, ps.ood_ctx, ps.class_tokens))
    return header + meta + body


def save_checkpoint(path, ps: PromptSet, step: int = 0, config: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(ps, step, config))
    return path


def load_checkpoint(path) -> tuple[PromptSet, dict]:
    """Returns the prompt set (float32 values widened to float64) and
    ``{"step", "config", "version"}``."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, K, C, L, e, step, meta_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = _HEADER.size
    meta = json.loads(data[off : off + meta_len].decode("utf-8"))
    off += meta_len
    sizes = [K * L * e, C * L * e, K * e]
    if len(data) - off != 4 * sum(sizes):
        raise CheckpointError(f"{path}: body is {len(data) - off} bytes, expected {4 * sum(sizes)}")
    arrays = []
    for n in sizes:
        arrays.append(np.frombuffer(data, dtype=_F32, count=n, offset=off).astype(np.float64))
        off += 4 * n
    ps = PromptSet(arrays[0].reshape(K, L, e), arrays[1].reshape(C, L, e),
                   arrays[2].reshape(K, e), meta.get("class_names") or [])
    return ps, {"step": step, "config": meta.get("config", {}), "version": version}
