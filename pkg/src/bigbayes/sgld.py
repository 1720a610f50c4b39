"""Stochastic gradient MAP ascent and stochastic gradient Langevin dynamics.

Minibatches are consecutive slices of a fresh per-epoch permutation, so a
full epoch visits every datum exactly once; the decaying step schedule
eps_t = alpha (beta + t)^-gamma satisfies the usual divergent-sum /
convergent-square-sum conditions whenever gamma lies in (0.5, 1]. SGLD never
applies an accept/reject correction.
"""

import math
from dataclasses import dataclass

import numpy as np

from .models import FactoredTarget
from .rng import KeyedRng

__all__ = [
    "StepSchedule",
    "MinibatchPlan",
    "stochastic_grad",
    "sgd_step",
    "sgld_step",
    "run_sgld",
    "run_sgd",
]


@dataclass(frozen=True)
class StepSchedule:
    """eps_t = max(alpha (beta + t)^-gamma, floor)."""

    alpha: float = 1.0
    beta: float = 10.0
    gamma: float = 0.55
    floor: float = 0.0

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if not 0.5 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0.5, 1] for a valid schedule")
        if self.floor < 0:
            raise ValueError("floor must be nonnegative")

    def __call__(self, t: int) -> float:
        return max(self.alpha * (self.beta + t) ** (-self.gamma), self.floor)


@dataclass(frozen=True)
class MinibatchPlan:
    """Epoch-permuted minibatches of size m over N data.

    When m does not divide N the final batch of each epoch is short; the
    gradient estimator rescales by N/|batch| either way so it stays
    unbiased.
    """

    n_data: int
    batch_size: int
    rng: KeyedRng

    def __post_init__(self):
        if not 1 <= self.batch_size <= self.n_data:
            raise ValueError("batch size must lie in 1..N")

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(self.n_data / self.batch_size)

    def indices(self, t: int) -> np.ndarray:
        """Batch for global step t."""
        J = self.batches_per_epoch
        epoch, slot = divmod(t, J)
        perm = self.rng.derive("epoch", epoch).permutation(self.n_data)
        return perm[slot * self.batch_size:(slot + 1) * self.batch_size]


def stochastic_grad(target: FactoredTarget, theta, batch_indices) -> np.ndarray:
    """grad log prior + (N/m) * sum of batch gradient terms."""
    idx = np.asarray(batch_indices, dtype=int)
    if len(idx) == 0:
        raise ValueError("batch must be nonempty")
    theta = np.asarray(theta, dtype=float)
    g = np.asarray(target.grad_log_prior(theta), dtype=float).copy()
    g += (target.n_data / len(idx)) * np.sum(
        target.grad_log_lik_terms(idx, theta), axis=0
    )
    return g


def sgd_step(theta, grad, eps_t: float) -> np.ndarray:
    if eps_t <= 0:
        raise ValueError("step size must be positive")
    return np.asarray(theta, float) + 0.5 * eps_t * np.asarray(grad, float)


def sgld_step(theta, target, plan: MinibatchPlan, schedule: StepSchedule, t: int,
              rng: np.random.Generator) -> np.ndarray:
    """theta + (eps_t/2) * stochastic gradient + N(0, eps_t I); no MH test."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    eps = schedule(t)
    g = stochastic_grad(target, theta, plan.indices(t))
    noise = math.sqrt(eps) * rng.standard_normal(np.shape(theta))
    return sgd_step(theta, g, eps) + noise


def run_sgld(target, theta0, T: int, plan: MinibatchPlan, schedule: StepSchedule,
             rng: KeyedRng) -> np.ndarray:
    theta = np.asarray(theta0, dtype=float).copy()
    gen = rng.generator()
    out = np.empty((T, theta.size))
    for t in range(T):
        theta = sgld_step(theta, target, plan, schedule, t, gen)
        out[t] = theta
    return out


def run_sgd(target, theta0, T: int, plan: MinibatchPlan, schedule: StepSchedule) -> np.ndarray:
    theta = np.asarray(theta0, dtype=float).copy()
    out = np.empty((T, theta.size))
    for t in range(T):
        theta = sgd_step(theta, stochastic_grad(target, theta, plan.indices(t)),
                         schedule(t))
        out[t] = theta
    return out
