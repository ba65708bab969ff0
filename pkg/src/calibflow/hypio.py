"""Binary container for hypothesis and ground-truth arrays.

Layout (little endian)::

    b"CFH1" | N u32 | M u32 | K u32 | D u32 | unit u8 | N*M*K*D float64 | [trailer]

Ground-truth files use ``N = 0`` and store an ``M x K x D`` block.  The
optional trailer is ``b"META" | length u32 | utf-8 JSON`` carrying the seed
and model id of a hypothesis set; readers that stop after the data block
see a plain file.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .metrics import GroundTruthSet, HypothesisSet

MAGIC = b"CFH1"
_HEADER = struct.Struct("<4sIIIIB")
_UNIT_CODES = {"m": 0, "mm": 1}
_UNIT_NAMES = {v: k for k, v in _UNIT_CODES.items()}


class ContainerError(ValueError):
    pass


def _write(path, arr: np.ndarray, n: int, unit: str, meta: dict | None) -> None:
    m, k, d = arr.shape[-3:]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, n, m, k, d, _UNIT_CODES[unit]))
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        if meta:
            blob = json.dumps(meta, sort_keys=True).encode()
            fh.write(b"META" + struct.pack("<I", len(blob)) + blob)


def write_hypotheses(path, hs: HypothesisSet) -> None:
    meta = {"seed": hs.seed, "model_id": hs.model_id, **hs.meta}
    _write(path, hs.hyps, hs.hyps.shape[0], hs.unit, meta)


def write_ground_truth(path, gt: GroundTruthSet) -> None:
    _write(path, gt.poses, 0, gt.unit, None)


def read_container(path) -> HypothesisSet | GroundTruthSet:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ContainerError(f"{path}: truncated header")
    magic, n, m, k, d, unit = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ContainerError(f"{path}: bad magic {magic!r}")
    if unit not in _UNIT_NAMES:
        raise ContainerError(f"{path}: unknown unit code {unit}")
    count = max(n, 1) * m * k * d
    end = _HEADER.size + 8 * count
    if len(raw) < end:
        raise ContainerError(f"{path}: expected {count} values, file is truncated")
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=_HEADER.size).astype(np.float64)
    meta = {}
    if raw[end:end + 4] == b"META":
        (length,) = struct.unpack_from("<I", raw, end + 4)
        meta = json.loads(raw[end + 8:end + 8 + length].decode())
    if n == 0:
        return GroundTruthSet(data.reshape(m, k, d), unit=_UNIT_NAMES[unit])
    seed = meta.pop("seed", None)
    model_id = meta.pop("model_id", "")
    return HypothesisSet(data.reshape(n, m, k, d), unit=_UNIT_NAMES[unit], seed=seed,
                         model_id=model_id or "", meta=meta)


def read_hypotheses(path) -> HypothesisSet:
    obj = read_container(path)
    if not isinstance(obj, HypothesisSet):
        raise ContainerError(f"{path}: holds ground truth, expected hypotheses")
    return obj


def read_ground_truth(path) -> GroundTruthSet:
    obj = read_container(path)
    if not isinstance(obj, GroundTruthSet):
        raise ContainerError(f"{path}: holds hypotheses, expected ground truth")
    return obj
