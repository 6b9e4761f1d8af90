"""Flat parameter-vector arithmetic and keyed random streams.

Parameter vectors are plain 1-D ``float64`` numpy arrays. Every helper here
checks finiteness and shape so that NaNs or silent broadcasting never leak into
the training and unlearning loops.
"""

from __future__ import annotations

import math
import zlib
from typing import Sequence

import numpy as np

from .errors import AggregationError, NumericDomainError, ShapeError


def as_param_vector(values, *, copy: bool = False) -> np.ndarray:
    """Validate ``values`` as a finite 1-D float64 vector."""
    v = np.array(values, dtype=np.float64) if copy else np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ShapeError(f"parameter vector must be 1-D and non-empty, got shape {v.shape}")
    check_finite(v)
    return v


def check_finite(v: np.ndarray, what: str = "vector") -> None:
    if not np.all(np.isfinite(v)):
        bad = int(np.flatnonzero(~np.isfinite(v))[0])
        raise NumericDomainError(f"{what} has non-finite entry at index {bad}")


def _check_same_dim(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.shape} vs {b.shape}")


def l2_norm(v) -> float:
    """Euclidean norm, accumulated with exactly rounded summation."""
    v = np.asarray(v, dtype=np.float64)
    check_finite(v)
    scale = float(np.max(np.abs(v))) if v.size else 0.0
    if scale == 0.0:
        return 0.0
    # scaling by the largest entry avoids under/overflow of the squares;
    # math.fsum is correctly rounded, so the result does not depend on
    # BLAS blocking or SIMD width.
    u = (v / scale).ravel()
    return scale * math.sqrt(math.fsum((u * u).tolist()))


def add_scaled(v, a: float, u) -> np.ndarray:
    """Return ``v + a * u``."""
    v = np.asarray(v, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    _check_same_dim(v, u)
    out = v + a * u
    check_finite(out, "add_scaled result")
    return out


def mean_weighted(vs: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Weighted mean ``sum(w_i v_i) / sum(w_i)``.

    Terms are accumulated strictly in list order (callers pass clients in
    ascending id order) so the floating-point result is reproducible no matter
    how the vectors were produced.
    """
    if len(vs) == 0:
        raise AggregationError("cannot aggregate an empty list of vectors")
    if len(vs) != len(weights):
        raise AggregationError(f"{len(vs)} vectors but {len(weights)} weights")
    w = [float(x) for x in weights]
    if any(x < 0 or not math.isfinite(x) for x in w):
        raise AggregationError("weights must be finite and non-negative")
    total = math.fsum(w)
    if total <= 0:
        raise AggregationError("weights sum to zero")
    first = np.asarray(vs[0], dtype=np.float64)
    acc = np.zeros_like(first)
    for v, wi in zip(vs, w):
        v = np.asarray(v, dtype=np.float64)
        _check_same_dim(first, v)
        acc += wi * v
    out = acc / total
    check_finite(out, "aggregate")
    return out


def _purpose_key(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def rng_stream(seed: int, purpose: str, client: int = -1, round_idx: int = -1) -> np.random.Generator:
    """Independent generator keyed by ``(seed, purpose, client, round)``.

    Uses numpy's ``SeedSequence`` spawn keys, so two calls with the same key
    produce identical draws regardless of call order or thread scheduling.
    ``-1`` means "not applicable" for client or round.
    """
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    key = (_purpose_key(purpose), client + 1, round_idx + 1)
    if min(key) < 0:
        raise ValueError(f"client and round indices must be >= -1, got {client}, {round_idx}")
    ss = np.random.SeedSequence(entropy=seed, spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))
