"""Approximate Metropolis-Hastings with adaptive data-subsampling stopping rules.

Each step reads likelihood terms batch by batch, from a fresh per-step
permutation of the data, until either a t-statistic test or a concentration
inequality (Hoeffding without replacement, or empirical Bernstein) says the
subsampled accept/reject decision matches the full-data decision with high
probability. Exhausting the data always recovers the exact MH test.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

import numpy as np

from .mcmc import ChainState, ProposalDist, SampleBuffer
from .models import FactoredTarget
from .rng import KeyedRng
from .special import student_t_sf

__all__ = [
    "LLRAccumulator",
    "StopRuleConfig",
    "mh_log_threshold",
    "llr_update",
    "ttest_should_stop",
    "concentration_should_stop",
    "adaptive_mh_step",
    "run_adaptive_mh",
    "pilot_c_bound",
]


@dataclass
class LLRAccumulator:
    """Running first and second raw moments of seen log-likelihood ratios."""

    m: int = 0
    mean: float = 0.0
    mean_sq: float = 0.0
    _consumed: set = field(default_factory=set, repr=False)

    def std(self) -> float:
        if self.m < 2:
            raise ValueError("need m >= 2 for a standard deviation")
        return math.sqrt(max(self.m / (self.m - 1) * (self.mean_sq - self.mean**2), 0.0))


@dataclass(frozen=True)
class StopRuleConfig:
    """Stopping rule parameters; defaults follow the reported robust choice
    p=2, gamma=2, epsilon=0.01."""

    batch: int = 10
    epsilon: float = 0.01
    rule: str = "ttest"  # ttest | hoeffding | bernstein
    p: float = 2.0
    geometric: float = 2.0
    c_bound: Union[None, float, Callable] = None
    per_batch_delta: bool = False

    def __post_init__(self):
        if self.batch < 1:
            raise ValueError("batch must be positive")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0,1)")
        if self.rule not in ("ttest", "hoeffding", "bernstein"):
            raise ValueError(f"unknown rule {self.rule!r}")
        if self.p <= 1.0:
            raise ValueError("p must exceed 1")
        if self.geometric < 1.0:
            raise ValueError("geometric growth factor must be >= 1")


def mh_log_threshold(u: float, theta, theta_new, proposal: ProposalDist,
                     log_prior: Callable, N: int) -> float:
    """psi(u, theta, theta') = (1/N) log[u q(theta'|theta) pi0(theta) /
    (q(theta|theta') pi0(theta'))]."""
    if not 0.0 < u < 1.0:
        raise ValueError("u must lie in (0,1)")
    val = math.log(u)
    if not proposal.is_symmetric:
        val += proposal.log_density(theta_new, theta) - proposal.log_density(theta, theta_new)
    val += float(log_prior(theta)) - float(log_prior(theta_new))
    return val / N


def llr_update(acc: LLRAccumulator, target: FactoredTarget, theta, theta_new,
               indices) -> LLRAccumulator:
    """Fold a fresh batch of term indices into the running moments.

    Indices must come from one per-test permutation and never repeat within
    a test.
    """
    idx = np.asarray(indices, dtype=int)
    dup = set(idx.tolist()) & acc._consumed
    if dup or len(set(idx.tolist())) != len(idx):
        raise RuntimeError(f"subsample indices reused within one test: {sorted(dup)[:5]}")
    ell = target.log_lik_terms(idx, np.asarray(theta_new, float)) - target.log_lik_terms(
        idx, np.asarray(theta, float)
    )
    c = len(idx)
    m_new = acc.m + c
    mean = (acc.m * acc.mean + float(np.sum(ell))) / m_new
    mean_sq = (acc.m * acc.mean_sq + float(np.sum(ell**2))) / m_new
    return LLRAccumulator(m=m_new, mean=mean, mean_sq=mean_sq,
                          _consumed=acc._consumed | set(idx.tolist()))


def ttest_should_stop(acc: LLRAccumulator, psi: float, N: int, epsilon: float):
    """t-statistic stopping rule; returns (stop, rho).

    rho is the probability the subsampled decision disagrees with the
    full-data decision under the normal model. Zero spread means the
    estimate is exact: stop immediately unless it sits exactly on the
    threshold.
    """
    if acc.m < 2:
        raise ValueError("t-test needs at least two terms")
    s = acc.std()
    sigma = s / math.sqrt(acc.m) * math.sqrt((N - acc.m) / (N - 1))
    if sigma == 0.0:
        rho = 0.5 if acc.mean == psi else 0.0
    else:
        t = (acc.mean - psi) / sigma
        rho = student_t_sf(abs(t), acc.m - 1)
    return rho <= epsilon or acc.m >= N, rho


def _delta(cfg: StopRuleConfig, m: int, k: int) -> float:
    unit = k if cfg.per_batch_delta else m
    return (cfg.p - 1.0) / (cfg.p * unit**cfg.p) * cfg.epsilon


def concentration_should_stop(acc: LLRAccumulator, psi: float, N: int,
                              cfg: StopRuleConfig, batches_seen: int,
                              c_value: float):
    """Concentration-inequality stopping rule; returns (stop, c_m)."""
    if c_value <= 0.0:
        raise ValueError("C bound must be positive")
    if acc.m < 1 or (cfg.rule == "bernstein" and acc.m < 2):
        raise ValueError("not enough terms seen for the rule")
    delta = _delta(cfg, acc.m, batches_seen)
    if cfg.rule == "hoeffding":
        c_m = c_value * math.sqrt(
            2.0 / acc.m * (1.0 - (acc.m - 1.0) / N) * math.log(2.0 / delta)
        )
    elif cfg.rule == "bernstein":
        s = acc.std()
        c_m = s * math.sqrt(2.0 * math.log(3.0 / delta) / acc.m) + 6.0 * c_value * math.log(
            3.0 / delta
        ) / acc.m
    else:
        raise ValueError(f"{cfg.rule!r} is not a concentration rule")
    stop = abs(acc.mean - psi) > c_m or acc.m >= N
    return stop, c_m


def pilot_c_bound(target: FactoredTarget, theta, theta_new,
                  rng: np.random.Generator, pilot: int = 1000,
                  safety: float = 1.5) -> float:
    """Estimate C = max |l_n| from a pilot subsample, times a safety factor."""
    n = min(pilot, target.n_data)
    idx = rng.choice(target.n_data, size=n, replace=False)
    ell = target.log_lik_terms(idx, np.asarray(theta_new, float)) - target.log_lik_terms(
        idx, np.asarray(theta, float)
    )
    return safety * float(np.max(np.abs(ell))) + 1e-12


def _resolve_c(cfg: StopRuleConfig, target, theta, theta_new, rng) -> float:
    if callable(cfg.c_bound):
        return float(cfg.c_bound(theta, theta_new))
    if cfg.c_bound is not None:
        return float(cfg.c_bound)
    return pilot_c_bound(target, theta, theta_new, rng)


def _run_stopping_rule(target, theta, theta_new, psi, cfg, rng):
    """Consume batches from a fresh permutation until the rule stops.

    Returns (accept, m_used, accumulator).
    """
    N = target.n_data
    perm = rng.permutation(N)
    acc = LLRAccumulator()
    c_value = None
    if cfg.rule in ("hoeffding", "bernstein"):
        c_value = _resolve_c(cfg, target, theta, theta_new, rng)
    batch = cfg.batch
    pos = 0
    k = 0
    while True:
        take = min(batch, N - pos)
        acc = llr_update(acc, target, theta, theta_new, perm[pos:pos + take])
        pos += take
        k += 1
        if acc.m >= N:
            return acc.mean > psi, acc.m, acc
        if cfg.rule == "ttest":
            if acc.m >= 2:
                stop, _ = ttest_should_stop(acc, psi, N, cfg.epsilon)
                if stop:
                    return acc.mean > psi, acc.m, acc
        else:
            if acc.m >= (2 if cfg.rule == "bernstein" else 1):
                stop, _ = concentration_should_stop(acc, psi, N, cfg, k, c_value)
                if stop:
                    return acc.mean > psi, acc.m, acc
        batch = int(math.ceil(batch * cfg.geometric))


def adaptive_mh_step(target: FactoredTarget, proposal: ProposalDist,
                     state: ChainState, cfg: StopRuleConfig,
                     rng: np.random.Generator):
    """One approximate MH step; returns (state', data_used).

    Draw order is fixed (proposal, uniform, permutation, pilot) so a step is
    reproducible from its generator alone.
    """
    theta = state.theta
    theta_new = proposal.sample(theta, rng)
    u = rng.uniform()
    while not 0.0 < u < 1.0:  # u = 0 has measure zero but log(u) must exist
        u = rng.uniform()
    psi = mh_log_threshold(u, theta, theta_new, proposal, _prior_of(target), target.n_data)
    accept, m_used, _ = _run_stopping_rule(target, theta, theta_new, psi, cfg, rng)
    new_theta = theta_new if accept else theta
    return ChainState(np.asarray(new_theta, float), state.it + 1, state.rng_cursor + 1), m_used


def _prior_of(target: FactoredTarget):
    return target.log_prior


def run_adaptive_mh(target, proposal, theta0, T: int, cfg: StopRuleConfig,
                    rng: KeyedRng, compare_exact: bool = False):
    """Run the adaptive chain; returns (SampleBuffer, m_used array[, disagreements]).

    With ``compare_exact`` the exact full-data MH decision is evaluated for
    the same (theta', u) at every step and the count of decision mismatches
    is returned; the chain still follows the approximate decisions.
    """
    theta = np.asarray(theta0, dtype=float).copy()
    draws = np.empty((T, theta.size))
    flags = np.empty(T, dtype=bool)
    m_used = np.empty(T, dtype=int)
    disagreements = 0
    all_idx = np.arange(target.n_data)
    for t in range(T):
        gen = rng.derive("step", t)
        theta_new = proposal.sample(theta, gen)
        u = gen.uniform()
        while not 0.0 < u < 1.0:
            u = gen.uniform()
        psi = mh_log_threshold(u, theta, theta_new, proposal, target.log_prior,
                               target.n_data)
        accept, m, _ = _run_stopping_rule(target, theta, theta_new, psi, cfg, gen)
        if compare_exact:
            lam = float(np.mean(
                target.log_lik_terms(all_idx, theta_new)
                - target.log_lik_terms(all_idx, theta)
            ))
            if (lam > psi) != accept:
                disagreements += 1
        if accept:
            theta = theta_new
        draws[t] = theta
        flags[t] = accept
        m_used[t] = m
    buf = SampleBuffer(draws=draws, accept_flags=flags)
    if compare_exact:
        return buf, m_used, disagreements
    return buf, m_used
