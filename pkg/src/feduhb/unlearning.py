"""Client-level federated unlearning.

``run_feduhb`` retrains from a fresh initialisation on the remaining clients
only, with a heavy-ball server update and a dynamic stopping rule on the
momentum-scaled weight change. ``run_retrain``, ``run_federaser`` and
``run_fedrecover_lbfgs`` are the comparison baselines.

Each round the remaining clients run ordinary local SGD (same epochs, batch
size and learning rate as training). Their FedAvg-aggregated model delta ``d``
is turned into a pseudo-gradient ``-d / lr`` so that, with full-batch single
epoch local work, it is exactly the gradient of the federated objective.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import lbfgs, models
from .errors import ConfigError, NumericDomainError, ProtocolError, ShapeError, StateError
from .fl_engine import FLConfig, RoundRecord, aggregate, compute_client_updates, init_params_for
from .models import ModelSpec
from .numerics import l2_norm, mean_weighted

logger = logging.getLogger(__name__)

METHODS = ("feduhb", "retrain", "federaser", "fedrecover")
CSV_COLUMNS = ("round", "delta", "sigma", "stopped", "test_loss", "test_acc")


@dataclass(frozen=True)
class UnlearnConfig:
    step_size: float = 0.005
    momentum: float = 0.9
    stop_multiplier: float = 0.6
    min_threshold: float = 1e-4
    window: int = 5
    max_rounds: int = 40
    stopping: bool = True
    # local work; None means "same as training"
    local_epochs: Optional[int] = None
    batch_size: Optional[int] = None
    local_lr: Optional[float] = None
    calibration_epochs: int = 1
    lbfgs_memory: int = 8
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if not self.step_size > 0:
            raise ConfigError("step size must be positive")
        # 0 is allowed as the momentum-off oracle mode
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if not self.stop_multiplier > 0:
            raise ConfigError("stop multiplier must be positive")
        if not self.min_threshold > 0:
            raise ConfigError("minimum threshold must be positive")
        if self.window < 2:
            raise ConfigError("stopping window must hold at least 2 rounds")
        if self.max_rounds < 1:
            raise ConfigError("max_rounds must be >= 1")
        if self.calibration_epochs < 1 or self.lbfgs_memory < 0 or self.workers < 1:
            raise ConfigError("calibration_epochs >= 1, lbfgs_memory >= 0, workers >= 1 required")


@dataclass
class UnlearnResult:
    method: str
    final_model: np.ndarray
    rounds_used: int
    log: List[dict]
    stop_reason: str
    trajectory: Optional[List[np.ndarray]] = None
    notes: List[str] = field(default_factory=list)


class StopState:
    """Window of the last ``k`` weight-change norms."""

    def __init__(self, window: int):
        if window < 2:
            raise ConfigError("window must be >= 2")
        self.window = window
        self.buffer: deque = deque(maxlen=window)
        self.delta = float("nan")
        self.rounds_elapsed = 0

    def push(self, delta: float) -> None:
        if not math.isfinite(delta) or delta < 0:
            raise NumericDomainError(f"weight change must be finite and non-negative, got {delta}")
        self.buffer.append(float(delta))
        self.delta = float(delta)
        self.rounds_elapsed += 1

    @property
    def full(self) -> bool:
        return len(self.buffer) == self.window

    @property
    def mean(self) -> float:
        if not self.buffer:
            raise StateError("no weight changes recorded yet")
        return math.fsum(self.buffer) / len(self.buffer)

    @property
    def std(self) -> float:
        """Population standard deviation (divisor = number of values held)."""
        m = self.mean
        return math.sqrt(math.fsum((d - m) ** 2 for d in self.buffer) / len(self.buffer))


def heavy_ball_step(w_t, w_prev, grad, alpha: float, beta: float) -> np.ndarray:
    """``w_t - alpha * grad + beta * (w_t - w_prev)``."""
    w_t, w_prev, grad = (np.asarray(x, dtype=np.float64) for x in (w_t, w_prev, grad))
    if not (w_t.shape == w_prev.shape == grad.shape):
        raise ShapeError(f"dimension mismatch: {w_t.shape}, {w_prev.shape}, {grad.shape}")
    return w_t - alpha * grad + beta * (w_t - w_prev)


def weight_change(w_t, w_prev, beta: float) -> float:
    """Norm of the momentum term, ``||beta (w_t - w_prev)||_2``."""
    w_t, w_prev = np.asarray(w_t, dtype=np.float64), np.asarray(w_prev, dtype=np.float64)
    if w_t.shape != w_prev.shape:
        raise ShapeError(f"dimension mismatch: {w_t.shape} vs {w_prev.shape}")
    return abs(beta) * l2_norm(w_t - w_prev)


def rolling_stats(state: StopState, delta: float) -> Tuple[float, float]:
    """Push ``delta`` and return the window mean and population std."""
    state.push(delta)
    return state.mean, state.std


def should_stop(delta: float, sigma: float, lam: float, eps: float) -> bool:
    return delta < max(eps, lam * sigma)


def calibrate_update(stored, new) -> Optional[np.ndarray]:
    """Rescale ``new`` to the norm of ``stored``; ``None`` if ``new`` is zero."""
    new_norm = l2_norm(new)
    if new_norm == 0.0:
        return None
    return (l2_norm(stored) / new_norm) * np.asarray(new, dtype=np.float64)


# ---------------------------------------------------------------------------


def _local(ucfg: UnlearnConfig, fl_cfg: FLConfig):
    return (
        ucfg.local_epochs or fl_cfg.local_epochs,
        ucfg.batch_size or fl_cfg.batch_size,
        ucfg.local_lr or fl_cfg.learning_rate,
    )


def _check_remaining(shards: Mapping[int, object], fl_cfg: FLConfig) -> None:
    if not shards:
        raise ProtocolError("no remaining clients to unlearn with")
    leaked = set(shards) & set(fl_cfg.target_clients)
    if leaked:
        raise ProtocolError(f"target clients {sorted(leaked)} must not take part in unlearning")


def _eval(spec, w, test):
    if test is None:
        return float("nan"), float("nan")
    return models.evaluate(spec, w, test)


def _heavy_ball_loop(method: str, spec: ModelSpec, shards: Mapping[int, object], ucfg: UnlearnConfig,
                     fl_cfg: FLConfig, test, init, beta: float, stopping: bool, rounds: int,
                     keep_trajectory: bool) -> UnlearnResult:
    _check_remaining(shards, fl_cfg)
    ids = sorted(shards)
    sizes = [len(shards[c]) for c in ids]
    epochs, batch, lr = _local(ucfg, fl_cfg)
    w = init_params_for(spec, ucfg.seed, "reinit") if init is None else np.array(init, dtype=np.float64)
    w_prev = w.copy()  # first momentum term is zero
    state = StopState(ucfg.window)
    log, trajectory = [], [w.copy()] if keep_trajectory else None
    reason = "max_rounds"
    t = -1
    for t in range(rounds):
        updates = compute_client_updates(
            spec, shards, w, epochs=epochs, batch_size=batch, lr=lr, seed=ucfg.seed,
            round_idx=t, purpose="unlearn-batches", workers=ucfg.workers)
        pseudo_grad = -aggregate([updates[c] for c in ids], sizes) / lr
        w_next = heavy_ball_step(w, w_prev, pseudo_grad, ucfg.step_size, beta)
        delta = weight_change(w_next, w, beta)
        if not math.isfinite(delta) or not np.all(np.isfinite(w_next)):
            raise NumericDomainError(f"{method} round {t}: non-finite model or weight change")
        _, sigma = rolling_stats(state, delta)
        stop = stopping and state.full and should_stop(delta, sigma, ucfg.stop_multiplier, ucfg.min_threshold)
        w_prev, w = w, w_next
        if keep_trajectory:
            trajectory.append(w.copy())
        loss, acc = _eval(spec, w, test)
        log.append({"round": t, "delta": delta, "sigma": sigma, "stopped": int(stop),
                    "test_loss": loss, "test_acc": acc})
        if stop:
            reason = "criterion"
            break
    return UnlearnResult(method, w, t + 1, log, reason, trajectory)


def run_feduhb(spec: ModelSpec, remaining_shards: Mapping[int, object], ucfg: UnlearnConfig,
               fl_cfg: FLConfig, test=None, init=None, keep_trajectory: bool = False) -> UnlearnResult:
    """Heavy-ball retraining from scratch on the remaining clients with dynamic stopping.

    The weight change of round ``t`` is the momentum term that the update just
    produced, ``beta * ||w_{t+1} - w_t||``; the stop rule is only consulted once
    the window holds ``ucfg.window`` values. ``init=None`` draws a fresh model
    from a stream that original training never uses.
    """
    return _heavy_ball_loop("feduhb", spec, remaining_shards, ucfg, fl_cfg, test, init,
                            ucfg.momentum, ucfg.stopping, ucfg.max_rounds, keep_trajectory)


def run_retrain(spec: ModelSpec, remaining_shards: Mapping[int, object], ucfg: UnlearnConfig,
                fl_cfg: FLConfig, test=None, init=None, rounds: Optional[int] = None,
                keep_trajectory: bool = False) -> UnlearnResult:
    """Same protocol with zero momentum and no stopping: plain retraining."""
    res = _heavy_ball_loop("retrain", spec, remaining_shards, ucfg, fl_cfg, test, init, 0.0, False,
                           rounds or ucfg.max_rounds, keep_trajectory)
    for row in res.log:
        row["delta"] = row["sigma"] = float("nan")
    return res


def run_federaser(spec: ModelSpec, history: Sequence[RoundRecord], remaining_shards: Mapping[int, object],
                  ucfg: UnlearnConfig, fl_cfg: FLConfig, test=None) -> UnlearnResult:
    """Calibrated replay of stored rounds.

    Starting from the stored initial model, each stored round the remaining
    clients run ``ucfg.calibration_epochs`` of local training; each new update
    is rescaled to the norm of that client's stored update and the rescaled
    updates are FedAvg-aggregated and applied.
    """
    if not history:
        raise ProtocolError("FedEraser needs a non-empty training history")
    _check_remaining(remaining_shards, fl_cfg)
    ids = sorted(remaining_shards)
    sizes = [len(remaining_shards[c]) for c in ids]
    _, batch, lr = _local(ucfg, fl_cfg)
    w = np.array(history[0].global_model_before, dtype=np.float64)
    log, notes = [], []
    for rec in history:
        new = compute_client_updates(
            spec, remaining_shards, w, epochs=ucfg.calibration_epochs, batch_size=batch, lr=lr,
            seed=ucfg.seed, round_idx=rec.round, purpose="federaser-calibration", workers=ucfg.workers)
        calibrated = []
        for c in ids:
            cal = calibrate_update(rec.client_updates[c], new[c])
            if cal is None:
                notes.append(f"round {rec.round}: client {c} calibration update has zero norm")
                cal = np.zeros_like(w)
            calibrated.append(cal)
        if all(l2_norm(v) == 0.0 for v in calibrated):
            notes.append(f"round {rec.round}: skipped, every calibrated update is zero")
        else:
            w = w + aggregate(calibrated, sizes)
        loss, acc = _eval(spec, w, test)
        log.append({"round": rec.round, "delta": float("nan"), "sigma": float("nan"), "stopped": 0,
                    "test_loss": loss, "test_acc": acc})
    for n in notes:
        logger.info("federaser: %s", n)
    return UnlearnResult("federaser", w, len(history), log, "max_rounds", notes=notes)


def remaining_pseudo_gradient(rec: RoundRecord, ids: Sequence[int], sizes: Sequence[int], lr: float) -> np.ndarray:
    return -mean_weighted([rec.client_updates[c] for c in ids], sizes) / lr


def curvature_window(num_pairs: int, t: int, memory: int) -> Tuple[int, int]:
    """Indices ``[lo, hi)`` of the ``memory`` pairs used at recovery round ``t``.

    Pair ``j`` spans stored rounds ``j`` and ``j + 1``; the window ends at the
    pair reaching round ``t``, padded forward while ``t < memory``.
    """
    lo = max(0, t - memory)
    return lo, min(num_pairs, lo + memory)


def run_fedrecover_lbfgs(spec: ModelSpec, history: Sequence[RoundRecord], remaining_shards: Mapping[int, object],
                         ucfg: UnlearnConfig, fl_cfg: FLConfig, test=None) -> UnlearnResult:
    """History replay with L-BFGS-corrected updates and no periodic correction.

    From the stored models ``w_t`` and the remaining clients' stored aggregate
    pseudo-gradients ``g_t`` it builds curvature pairs
    ``(w_{j+1} - w_j, g_{j+1} - g_j)`` and estimates the update at the
    recovered model as ``g_t + B (wbar_t - w_t)``. No client computes anything.
    """
    m = ucfg.lbfgs_memory
    if len(history) < m + 1:
        raise ProtocolError(f"FedRecover needs at least {m + 1} stored rounds, got {len(history)}")
    _check_remaining(remaining_shards, fl_cfg)
    ids = sorted(remaining_shards)
    sizes = [len(remaining_shards[c]) for c in ids]
    _, _, lr = _local(ucfg, fl_cfg)
    models_hist = [np.asarray(r.global_model_before, dtype=np.float64) for r in history]
    grads = [remaining_pseudo_gradient(r, ids, sizes, lr) for r in history]
    pairs = [(models_hist[j + 1] - models_hist[j], grads[j + 1] - grads[j]) for j in range(len(history) - 1)]

    w = models_hist[0].copy()
    log, notes = [], []
    for t, rec in enumerate(history):
        lo, hi = curvature_window(len(pairs), t, m)
        kept, skipped = lbfgs.filter_pairs(pairs[lo:hi])
        if skipped:
            notes.append(f"round {rec.round}: skipped {skipped} pair(s) with non-positive curvature")
        g_est = grads[t] + lbfgs.hessian_vector(kept, w - models_hist[t])
        w = w - lr * g_est
        if not np.all(np.isfinite(w)):
            raise NumericDomainError(f"fedrecover round {rec.round}: non-finite model")
        loss, acc = _eval(spec, w, test)
        log.append({"round": rec.round, "delta": float("nan"), "sigma": float("nan"), "stopped": 0,
                    "test_loss": loss, "test_acc": acc})
    for n in notes:
        logger.debug("fedrecover: %s", n)
    return UnlearnResult("fedrecover", w, len(history), log, "max_rounds", notes=notes)
