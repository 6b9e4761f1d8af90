"""Binary parameter checkpoints and round-history persistence.

A checkpoint file is a sequence of length-prefixed records::

    <Q payload_len> <q round> <q slot> <Q dim> <dim little-endian float64>

``payload_len`` counts the bytes after itself. ``slot`` is a client id for a
client update, ``GLOBAL_SLOT`` for the global model a round started from and
``AGGREGATE_SLOT`` for the applied aggregate. A JSON sidecar stores the run
metadata (config hash, seed, round count).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Iterator, List, Tuple

import numpy as np

from .errors import FormatError
from .fl_engine import RoundRecord, _frozen

GLOBAL_SLOT = -1
AGGREGATE_SLOT = -2

_LEN = struct.Struct("<Q")
_HEAD = struct.Struct("<qqQ")
_F8 = np.dtype("<f8")

HISTORY_BIN = "rounds.bin"
HISTORY_META = "history.json"


def encode_record(round_idx: int, slot: int, vec) -> bytes:
    vec = np.ascontiguousarray(vec, dtype=_F8)
    if vec.ndim != 1:
        raise FormatError(f"checkpoint vectors must be 1-D, got shape {vec.shape}")
    body = _HEAD.pack(round_idx, slot, len(vec)) + vec.tobytes()
    return _LEN.pack(len(body)) + body


def iter_records(raw: bytes) -> Iterator[Tuple[int, int, np.ndarray]]:
    pos = 0
    while pos < len(raw):
        if pos + _LEN.size > len(raw):
            raise FormatError("truncated record length", pos)
        (size,) = _LEN.unpack_from(raw, pos)
        start = pos + _LEN.size
        if size < _HEAD.size or start + size > len(raw):
            raise FormatError(f"record of {size} bytes overruns file of {len(raw)} bytes", pos)
        round_idx, slot, dim = _HEAD.unpack_from(raw, start)
        if _HEAD.size + 8 * dim != size:
            raise FormatError(f"record declares dim {dim} but holds {size - _HEAD.size} payload bytes", pos)
        vec = np.frombuffer(raw, dtype=_F8, count=dim, offset=start + _HEAD.size).astype(np.float64)
        yield round_idx, slot, vec
        pos = start + size


def save_vector(path, vec, round_idx: int = 0, slot: int = GLOBAL_SLOT) -> None:
    Path(path).write_bytes(encode_record(round_idx, slot, vec))


def load_vector(path) -> np.ndarray:
    records = list(iter_records(Path(path).read_bytes()))
    if len(records) != 1:
        raise FormatError(f"{path}: expected one record, found {len(records)}")
    return records[0][2]


def save_history(directory, history: List[RoundRecord], meta: Dict) -> List[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    chunks = []
    for rec in history:
        chunks.append(encode_record(rec.round, GLOBAL_SLOT, rec.global_model_before))
        chunks.append(encode_record(rec.round, AGGREGATE_SLOT, rec.aggregate_update))
        for cid in sorted(rec.client_updates):
            chunks.append(encode_record(rec.round, cid, rec.client_updates[cid]))
    bin_path, meta_path = directory / HISTORY_BIN, directory / HISTORY_META
    bin_path.write_bytes(b"".join(chunks))
    meta = dict(meta, rounds=len(history))
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return [bin_path, meta_path]


def load_history(directory) -> Tuple[List[RoundRecord], Dict]:
    directory = Path(directory)
    meta_path = directory / HISTORY_META
    if not meta_path.exists():
        raise FormatError(f"{directory} holds no {HISTORY_META}")
    meta = json.loads(meta_path.read_text())
    grouped: Dict[int, Dict[int, np.ndarray]] = {}
    for round_idx, slot, vec in iter_records((directory / HISTORY_BIN).read_bytes()):
        grouped.setdefault(round_idx, {})[slot] = vec
    history = []
    for round_idx in sorted(grouped):
        slots = grouped[round_idx]
        if GLOBAL_SLOT not in slots or AGGREGATE_SLOT not in slots:
            raise FormatError(f"round {round_idx} lacks its global model or aggregate record")
        clients = {c: _frozen(v) for c, v in sorted(slots.items()) if c >= 0}
        history.append(RoundRecord(round_idx, _frozen(slots[GLOBAL_SLOT]), clients, _frozen(slots[AGGREGATE_SLOT])))
    if meta.get("rounds") is not None and meta["rounds"] != len(history):
        raise FormatError(f"metadata promises {meta['rounds']} rounds, file holds {len(history)}")
    return history, meta
