"""Federated training rounds: local SGD, FedAvg aggregation, round history."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import models
from .errors import AggregationError, ClientError, ConfigError, FedUHBError
from .models import ModelSpec
from .numerics import check_finite, mean_weighted, rng_stream

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FLConfig:
    num_clients: int = 20
    local_epochs: int = 5
    global_rounds: int = 40
    learning_rate: float = 0.005
    batch_size: int = 64
    seed: int = 0
    target_clients: Tuple[int, ...] = (0, 1)
    history_interval: int = 1
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "target_clients", tuple(sorted(set(self.target_clients))))
        if self.num_clients < 1:
            raise ConfigError("num_clients must be positive")
        if len(self.target_clients) >= self.num_clients:
            raise ConfigError("at least one client must remain after unlearning")
        if any(c < 0 or c >= self.num_clients for c in self.target_clients):
            raise ConfigError(f"target clients {self.target_clients} outside 0..{self.num_clients - 1}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.local_epochs < 1 or self.batch_size < 1 or self.history_interval < 1 or self.workers < 1:
            raise ConfigError("local_epochs, batch_size, history_interval and workers must be >= 1")
        if self.global_rounds < 0:
            raise ConfigError("global_rounds must be >= 0")

    @property
    def remaining_clients(self) -> Tuple[int, ...]:
        return tuple(c for c in range(self.num_clients) if c not in self.target_clients)


@dataclass
class RoundRecord:
    round: int
    global_model_before: np.ndarray
    client_updates: Dict[int, np.ndarray]
    aggregate_update: np.ndarray


@dataclass
class TrainLog:
    rounds: List[int] = field(default_factory=list)
    test_loss: List[float] = field(default_factory=list)
    test_acc: List[float] = field(default_factory=list)
    wall_clock: List[float] = field(default_factory=list)
    final_model: Optional[np.ndarray] = None

    def append(self, t: int, loss: float, acc: float, seconds: float) -> None:
        self.rounds.append(t)
        self.test_loss.append(loss)
        self.test_acc.append(acc)
        self.wall_clock.append(seconds)


def local_update(spec: ModelSpec, client_id: int, shard, global_params: np.ndarray, *,
                 epochs: int, batch_size: int, lr: float, seed: int, round_idx: int,
                 purpose: str = "train-batches") -> np.ndarray:
    """Run ``epochs`` of mini-batch SGD from ``global_params``; return the model delta.

    Batch order is drawn from the stream keyed by ``(seed, purpose, client_id,
    round_idx)``, so the result does not depend on which thread runs it.
    """
    n = len(shard)
    if n == 0:
        raise ClientError(f"client {client_id} has an empty shard")
    rng = rng_stream(seed, purpose, client_id, round_idx)
    w = np.array(global_params, dtype=np.float64)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            g = models.grad(spec, w, shard.batch(order[start:start + batch_size])).gradient
            w = w - lr * g
    delta = w - global_params
    try:
        check_finite(delta, f"client {client_id} update")
    except FedUHBError as exc:
        raise ClientError(f"round {round_idx}: {exc}") from exc
    return delta


def aggregate(deltas: Sequence[np.ndarray], shard_sizes: Sequence[int]) -> np.ndarray:
    """FedAvg: shard-size weighted mean, reduced in the given (client id) order."""
    if len(deltas) == 0:
        raise AggregationError("no client updates to aggregate")
    return mean_weighted(deltas, shard_sizes)


def compute_client_updates(spec: ModelSpec, shards: Dict[int, object], params: np.ndarray, *,
                           epochs: int, batch_size: int, lr: float, seed: int, round_idx: int,
                           purpose: str, workers: int = 1) -> Dict[int, np.ndarray]:
    """Local updates for every client in ``shards``, keyed and ordered by client id."""
    ids = sorted(shards)
    params = _frozen(params)

    def work(cid):
        return local_update(spec, cid, shards[cid], params, epochs=epochs, batch_size=batch_size,
                            lr=lr, seed=seed, round_idx=round_idx, purpose=purpose)

    if workers > 1 and len(ids) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, ids))
    else:
        results = [work(cid) for cid in ids]
    return dict(zip(ids, results))


def _frozen(v: np.ndarray) -> np.ndarray:
    v = np.array(v, dtype=np.float64)
    v.flags.writeable = False
    return v


def run_training(cfg: FLConfig, shards: Sequence, spec: ModelSpec, test=None,
                 init: Optional[np.ndarray] = None,
                 on_round: Optional[Callable[[int, np.ndarray], None]] = None) -> Tuple[TrainLog, List[RoundRecord]]:
    """Standard FedAvg over all ``cfg.num_clients`` shards.

    Returns the per-round test log and the stored round history (every
    ``cfg.history_interval``-th round).
    """
    if len(shards) != cfg.num_clients:
        raise ConfigError(f"config declares {cfg.num_clients} clients but {len(shards)} shards given")
    w = init_params_for(spec, cfg.seed, "init") if init is None else np.array(init, dtype=np.float64)
    sizes = [len(s) for s in shards]
    log, history = TrainLog(), []
    shard_map = dict(enumerate(shards))
    for t in range(cfg.global_rounds):
        start = time.perf_counter()
        try:
            updates = compute_client_updates(
                spec, shard_map, w, epochs=cfg.local_epochs, batch_size=cfg.batch_size,
                lr=cfg.learning_rate, seed=cfg.seed, round_idx=t, purpose="train-batches",
                workers=cfg.workers)
            agg = aggregate([updates[c] for c in range(cfg.num_clients)], sizes)
        except FedUHBError as exc:
            raise type(exc)(f"training round {t}: {exc}") from exc
        if t % cfg.history_interval == 0:
            history.append(RoundRecord(t, _frozen(w), {c: _frozen(u) for c, u in updates.items()}, _frozen(agg)))
        w = w + agg
        if on_round is not None:
            on_round(t, w)
        loss, acc = models.evaluate(spec, w, test) if test is not None else (float("nan"), float("nan"))
        log.append(t, loss, acc, time.perf_counter() - start)
        logger.debug("train round %d: loss=%.6g acc=%.4f", t, loss, acc)
    log.final_model = w
    return log, history


def init_params_for(spec: ModelSpec, seed: int, purpose: str) -> np.ndarray:
    return models.init_params(spec, rng_stream(seed, purpose))
