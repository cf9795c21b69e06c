"""Binary attention-trace files and line-delimited detection reports.

Layout: 8-byte magic, then little-endian uint32 fields (version, T, steps, L, N,
meta_len), then ``meta_len`` bytes of UTF-8 JSON, then steps*L*N float32 values
in (step, layer, token) order.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .analytics import AttentionTrace, DetectionResult
from .errors import ContractError

MAGIC = b"ATTNTRC\x00"
VERSION = 1
_HEAD = struct.Struct("<6I")


def _encode(trace: AttentionTrace) -> bytes:
    meta = {
        "prompt_id": trace.prompt_id,
        "policy": trace.policy,
        "model_id": trace.model_id,
        "categories": [int(c) for c in trace.categories],
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    body = np.ascontiguousarray(trace.attention, dtype="<f4").tobytes()
    return MAGIC + _HEAD.pack(VERSION, trace.T, trace.steps, trace.L, trace.N, len(blob)) + blob + body


def write_trace(trace: AttentionTrace, path) -> str:
    """Write ``trace``; returns the sha256 of the bytes written."""
    data = _encode(trace)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_trace(path) -> AttentionTrace:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ContractError(f"{path}: not a trace file")
    if len(data) < 8 + _HEAD.size:
        raise ContractError(f"{path}: truncated header")
    version, T, steps, L, N, meta_len = _HEAD.unpack_from(data, 8)
    if version != VERSION:
        raise ContractError(f"{path}: unsupported trace version {version}")
    start = 8 + _HEAD.size
    try:
        meta = json.loads(data[start:start + meta_len])
    except json.JSONDecodeError as exc:
        raise ContractError(f"{path}: bad metadata block") from exc
    body = data[start + meta_len:]
    if len(body) != steps * L * N * 4:
        raise ContractError(f"{path}: expected {steps * L * N} floats, found {len(body) // 4}")
    att = np.frombuffer(body, dtype="<f4").reshape(steps, L, N).astype(np.float32)
    return AttentionTrace(att, np.asarray(meta["categories"], dtype=np.int8), T,
                          meta.get("prompt_id", ""), meta.get("policy", {}), meta.get("model_id", ""))


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_detection_records(results, path):
    with open(path, "w") as fh:
        for r in results:
            rec = {"prompt_id": r.prompt_id, "metric_kind": r.metric_kind, "layer": r.layer,
                   "score": float(r.score), "label": bool(r.label)}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_detection_records(path) -> list[DetectionResult]:
    out = []
    for line in open(path):
        if line.strip():
            d = json.loads(line)
            out.append(DetectionResult(d["prompt_id"], d["score"], d["label"], d["metric_kind"], d["layer"]))
    return out
