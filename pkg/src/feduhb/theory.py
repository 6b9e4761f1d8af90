"""Numerical check of the FedUHB-vs-retrain divergence bound.

For an objective that is ``mu``-strongly convex with ``L``-Lipschitz gradient
and gradients bounded by ``G``, the heavy-ball iterate ``wbar_t`` and the
gradient-descent iterate ``what_t`` (same step ``alpha`` with
``0 < alpha L <= 1``) satisfy

    ||wbar_t - what_t|| <= rho^t d0 + alpha G (1 - rho^t) / ((1 - beta)(1 - rho)),

with ``rho = sqrt(1 - alpha mu)``. :func:`divergence_trace` runs both
iterations in lockstep on a quadratic federation and records the measured gap
next to the bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import scipy.linalg

from .datasets import QuadraticProblem
from .errors import ConfigError, EstimationError, NumericDomainError
from .models import ModelSpec, grad, grad_norm_bound_estimate
from .numerics import l2_norm, mean_weighted, rng_stream
from .unlearning import heavy_ball_step


@dataclass(frozen=True)
class ConvexityConstants:
    mu: float
    L: float
    G: float

    def __post_init__(self):
        if not self.mu > 0 or self.L < self.mu or self.G < 0:
            raise ConfigError(f"need 0 < mu <= L and G >= 0, got {self}")


@dataclass
class BoundTrajectory:
    gap: List[float]
    bound: List[float]
    rho: float
    limit: float
    constants: ConvexityConstants
    d0: float
    losses_heavy_ball: List[float] = field(default_factory=list)
    losses_gd: List[float] = field(default_factory=list)

    def violations(self, slack: float = 1e-9) -> List[int]:
        return [t for t, (g, b) in enumerate(zip(self.gap, self.bound)) if g > b + slack]

    def rows(self):
        for t, (g, b) in enumerate(zip(self.gap, self.bound)):
            yield {"t": t, "gap": g, "bound": b, "rho": self.rho, "limit": self.limit}


def _rho_and_gap(alpha: float, mu: float) -> Tuple[float, float]:
    x = alpha * mu
    if not 0 < x < 1:
        raise NumericDomainError(f"need 0 < alpha*mu < 1, got {x}")
    rho = math.sqrt(1.0 - x)
    # 1 - sqrt(1 - x) without cancellation for small x
    return rho, x / (1.0 + rho)


def _check_beta(beta: float) -> None:
    if not 0 < beta < 1:
        raise NumericDomainError(f"momentum must lie in (0, 1), got {beta}")


def theorem_bound(t: int, d0: float, alpha: float, beta: float, mu: float, G: float) -> float:
    if t < 0 or d0 < 0 or G < 0:
        raise NumericDomainError("t, d0 and G must be non-negative")
    _check_beta(beta)
    rho, one_minus_rho = _rho_and_gap(alpha, mu)
    # rho^t = exp(t/2 log(1 - alpha mu)); expm1 keeps 1 - rho^t accurate near 1
    log_rt = 0.5 * t * math.log1p(-alpha * mu)
    return math.exp(log_rt) * d0 + alpha * G * -math.expm1(log_rt) / ((1.0 - beta) * one_minus_rho)


def asymptotic_gap(alpha: float, beta: float, mu: float, G: float) -> float:
    _check_beta(beta)
    _, one_minus_rho = _rho_and_gap(alpha, mu)
    return alpha * G / ((1.0 - beta) * one_minus_rho)


def bound_step(prev: float, alpha: float, beta: float, mu: float, G: float) -> float:
    """One-step recursion ``rho * prev + alpha G / (1 - beta)``."""
    _check_beta(beta)
    rho, _ = _rho_and_gap(alpha, mu)
    return rho * prev + alpha * G / (1.0 - beta)


# ---------------------------------------------------------------------------
# spectrum estimation


def power_iteration(matvec, dim: int, rng: np.random.Generator, tol: float = 1e-8,
                    max_iter: int = 10_000) -> Tuple[float, np.ndarray]:
    """Dominant eigenpair of a symmetric operator.

    Converges when the residual ``||A v - theta v||`` drops below ``tol * |theta|``.
    """
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    theta = 0.0
    for _ in range(max_iter):
        Av = matvec(v)
        theta = float(v @ Av)
        resid = np.linalg.norm(Av - theta * v)
        if resid <= tol * abs(theta) or resid == 0.0:
            return theta, v
        norm = np.linalg.norm(Av)
        if norm == 0.0:
            return 0.0, v
        v = Av / norm
    raise EstimationError(f"power iteration did not converge in {max_iter} steps (residual {resid:.3g})")


def extreme_eigenvalues(H: np.ndarray, rng: np.random.Generator, tol: float = 1e-8,
                        max_iter: int = 10_000) -> Tuple[float, float]:
    """``(lambda_min, lambda_max)`` of an SPD matrix by inverse and plain power iteration."""
    H = np.asarray(H, dtype=np.float64)
    L, _ = power_iteration(lambda v: H @ v, len(H), rng, tol, max_iter)
    try:
        factor = scipy.linalg.cho_factor(H)
    except np.linalg.LinAlgError as exc:
        raise EstimationError("matrix is not positive definite") from exc
    inv_max, _ = power_iteration(lambda v: scipy.linalg.cho_solve(factor, v), len(H), rng, tol, max_iter)
    return 1.0 / inv_max, L


def estimate_constants(problem: QuadraticProblem, trace=None, seed: int = 0) -> ConvexityConstants:
    """mu and L of the mean Hessian; G from the gradients along ``trace`` (0 without one)."""
    mu, L = extreme_eigenvalues(problem.hessian, rng_stream(seed, "spectrum"))
    # the two estimates can cross by rounding on a flat spectrum
    mu = min(mu, L)
    G = 0.0
    if trace is not None:
        spec = ModelSpec("quadratic", problem.dim)
        G = grad_norm_bound_estimate(spec, trace, problem.shards)
    return ConvexityConstants(mu, L, G)


# ---------------------------------------------------------------------------


def federated_gradient(problem: QuadraticProblem, w: np.ndarray) -> np.ndarray:
    """Equal-weight aggregate of client gradients, in client order."""
    spec = ModelSpec("quadratic", problem.dim)
    return mean_weighted([grad(spec, w, s).gradient for s in problem.shards], [1.0] * len(problem.shards))


def divergence_trace(problem: QuadraticProblem, alpha: float, beta: float, rounds: int,
                     init_heavy_ball: Optional[np.ndarray] = None, init_gd: Optional[np.ndarray] = None,
                     seed: int = 0) -> BoundTrajectory:
    """Run heavy-ball and gradient descent side by side; compare gap and bound.

    Missing initialisations are drawn from the ``"reinit"`` stream; passing only
    one makes both start there. ``G`` is instantiated as the largest client
    gradient norm seen on either trajectory, times the 1.1 safety factor.
    """
    if rounds < 0:
        raise ConfigError("rounds must be non-negative")
    consts = estimate_constants(problem, seed=seed)
    if alpha * consts.L > 1.0 + 1e-12 or alpha <= 0:
        raise ConfigError(f"bound requires 0 < alpha*L <= 1; alpha*L = {alpha * consts.L:.6g}")
    _check_beta(beta)
    if init_heavy_ball is None and init_gd is None:
        init_heavy_ball = rng_stream(seed, "reinit").uniform(-1, 1, problem.dim)
    w_bar = np.array(init_heavy_ball if init_heavy_ball is not None else init_gd, dtype=np.float64)
    w_hat = np.array(init_gd if init_gd is not None else w_bar, dtype=np.float64)
    w_prev = w_bar.copy()

    gaps = [l2_norm(w_bar - w_hat)]
    trace = [w_bar.copy(), w_hat.copy()]
    lhb, lgd = [problem.excess_loss(w_bar)], [problem.excess_loss(w_hat)]
    for _ in range(rounds):
        w_next = heavy_ball_step(w_bar, w_prev, federated_gradient(problem, w_bar), alpha, beta)
        w_prev, w_bar = w_bar, w_next
        w_hat = w_hat - alpha * federated_gradient(problem, w_hat)
        gaps.append(l2_norm(w_bar - w_hat))
        trace += [w_bar.copy(), w_hat.copy()]
        lhb.append(problem.excess_loss(w_bar))
        lgd.append(problem.excess_loss(w_hat))

    spec = ModelSpec("quadratic", problem.dim)
    G = grad_norm_bound_estimate(spec, trace, problem.shards)
    if G == 0.0:
        raise EstimationError("gradient bound G is zero: both runs sit at every client optimum")
    consts = ConvexityConstants(consts.mu, consts.L, G)
    d0 = gaps[0]
    bound = [theorem_bound(t, d0, alpha, beta, consts.mu, G) for t in range(rounds + 1)]
    rho, _ = _rho_and_gap(alpha, consts.mu)
    return BoundTrajectory(gaps, bound, rho, asymptotic_gap(alpha, beta, consts.mu, G), consts, d0, lhb, lgd)
