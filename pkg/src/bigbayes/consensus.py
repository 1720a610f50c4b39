"""Embarrassingly parallel subposterior sampling and consensus aggregation.

Shards carry a 1/J-downweighted prior so the subposterior product recovers
the posterior. Aggregation is weighted averaging (precision weights),
a product of Gaussian fits, or a product of Gaussian kernel density
estimates sampled by component-index Gibbs. Shard sampling is independent
until the single aggregation step.
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .models import FactoredTarget
from .rng import KeyedRng
from .simcluster import MASTER, SimCluster

__all__ = [
    "ShardPlan",
    "subposterior_target",
    "consensus_weighted",
    "consensus_gaussian_fit",
    "consensus_kde",
    "scott_bandwidth",
    "sample_subposteriors_on_cluster",
]


@dataclass(frozen=True)
class ShardPlan:
    """Disjoint cover of 0..N-1 by J index sets."""

    n_data: int
    shards: tuple

    def __post_init__(self):
        shards = tuple(np.asarray(s, dtype=int) for s in self.shards)
        seen = np.sort(np.concatenate(shards)) if shards else np.array([], int)
        if len(seen) != self.n_data or not np.array_equal(seen, np.arange(self.n_data)):
            raise ValueError("shards must partition 0..N-1")
        object.__setattr__(self, "shards", shards)

    @classmethod
    def contiguous(cls, n_data: int, J: int) -> "ShardPlan":
        return cls(n_data, tuple(np.array_split(np.arange(n_data), J)))

    @property
    def J(self) -> int:
        return len(self.shards)


def subposterior_target(target: FactoredTarget, plan: ShardPlan, j: int) -> FactoredTarget:
    """Shard j's target: prior downweighted to the 1/J power plus the
    shard's likelihood terms."""
    if not 0 <= j < plan.J:
        raise ValueError(f"shard index {j} out of range")
    shard = plan.shards[j]
    J = plan.J
    base_prior, base_grad = target.log_prior, target.grad_log_prior
    base_terms, base_grad_terms = target.log_lik_terms, target.grad_log_lik_terms

    return FactoredTarget(
        dim=target.dim,
        n_data=len(shard),
        log_prior=lambda th: base_prior(th) / J,
        grad_log_prior=lambda th: np.asarray(base_grad(th), float) / J,
        log_lik_terms=lambda idx, th: base_terms(shard[np.asarray(idx)], th),
        grad_log_lik_terms=lambda idx, th: base_grad_terms(shard[np.asarray(idx)], th),
    )


def _as_draws_array(draws) -> np.ndarray:
    arr = np.asarray(draws, dtype=float)
    if arr.ndim == 2:  # J x T of scalars
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError("draws must be a (J, T, d) array")
    T = arr.shape[1]
    if T < 2:
        raise ValueError("need at least two draws per shard")
    return arr


def _shard_inv_cov(arr, j):
    cov = np.cov(arr[j].T, ddof=1).reshape(arr.shape[2], arr.shape[2])
    try:
        return np.linalg.inv(cov)
    except np.linalg.LinAlgError as e:
        raise np.linalg.LinAlgError(f"singular sample covariance for shard {j}") from e


def consensus_weighted(draws, prior_cov=None, diagonal: bool = False) -> np.ndarray:
    """Weighted-average consensus: theta_t = sum_j W_j theta_{j,t}.

    Weights are normalized subposterior precisions, W_j = Sigma SigmaBar_j^-1
    with Sigma = (sum_k SigmaBar_k^-1)^-1 and SigmaBar_j the shard sample
    covariance (unbiased). Because each subposterior already carries a 1/J
    share of the prior, the subposterior precisions sum to the posterior
    precision; adding the prior precision again, as a literal reading of
    the averaging pseudocode suggests, would double-count it and bias the
    mean whenever the prior is informative. ``prior_cov`` is accepted for
    interface compatibility but does not enter the weights. ``diagonal``
    restricts the weights to per-dimension reciprocal-variance form.
    """
    arr = _as_draws_array(draws)
    J, T, d = arr.shape
    if diagonal:
        precs = 1.0 / arr.var(axis=1, ddof=1)        # (J, d)
        total = precs.sum(axis=0)
        out = np.zeros((T, d))
        for j in range(J):
            out += arr[j] * (precs[j] / total)[None, :]
        return out
    inv_covs = [_shard_inv_cov(arr, j) for j in range(J)]
    sigma = np.linalg.inv(sum(inv_covs))
    out = np.zeros((T, d))
    for j in range(J):
        out += arr[j] @ (sigma @ inv_covs[j]).T
    return out


def consensus_gaussian_fit(draws):
    """Product of per-shard Gaussian fits; returns (mean, cov, sampler)."""
    arr = _as_draws_array(draws)
    J, T, d = arr.shape
    prec = np.zeros((d, d))
    lin = np.zeros(d)
    for j in range(J):
        inv = _shard_inv_cov(arr, j)
        prec += inv
        lin += inv @ arr[j].mean(axis=0)
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ lin

    def sampler(n_out, rng: np.random.Generator):
        return rng.multivariate_normal(mean, cov, size=n_out, method="cholesky")

    return mean, cov, sampler


def scott_bandwidth(draws_j: np.ndarray) -> np.ndarray:
    """Per-dimension Scott factor T^(-1/(d+4)) times the sample deviation."""
    T, d = draws_j.shape
    return draws_j.std(axis=0, ddof=1) * T ** (-1.0 / (d + 4))


def consensus_kde(draws, bandwidth=None, n_out: int = 1000,
                  rng: Optional[np.random.Generator] = None,
                  sweeps_per_sample: int = 1, return_indices: bool = False):
    """Sample the product of J Gaussian KDEs by component-index Gibbs.

    The product mixture has T^J components indexed by (t_1..t_J); each
    Gibbs update resamples one index from its T unnormalized weights, and a
    draw from the selected component product is emitted per sweep.
    """
    arr = _as_draws_array(draws)
    J, T, d = arr.shape
    rng = np.random.default_rng() if rng is None else rng
    if bandwidth is None:
        h = np.mean([scott_bandwidth(arr[j]) for j in range(J)], axis=0)
    else:
        h = np.broadcast_to(np.asarray(bandwidth, dtype=float), (d,)).copy()
    if np.any(h <= 0):
        raise ValueError("bandwidth must be positive")
    inv_h2 = 1.0 / h**2

    idx = rng.integers(0, T, size=J)
    out = np.empty((n_out, d))
    visited = np.empty((n_out, J), dtype=int)
    for s in range(n_out):
        for _ in range(sweeps_per_sample):
            for j in range(J):
                others = np.delete(np.arange(J), j)
                sum_others = arr[others, idx[others], :].sum(axis=0)
                x = arr[j]  # (T, d) candidate atoms
                # weight of candidate t: exp{-[(1-1/J) x_t^2 - (2/J) x_t . S] / (2h^2)}
                quad = (1.0 - 1.0 / J) * x**2 - (2.0 / J) * x * sum_others[None, :]
                logw = -0.5 * (quad * inv_h2[None, :]).sum(axis=1)
                logw -= logw.max()
                w = np.exp(logw)
                tot = w.sum()
                if not np.isfinite(tot) or tot <= 0:
                    raise FloatingPointError(
                        "all KDE component weights underflowed; increase the bandwidth h"
                    )
                idx[j] = rng.choice(T, p=w / tot)
        visited[s] = idx
        centers = arr[np.arange(J), idx, :]
        # degenerate product: even the selected component's weight underflows
        state_logw = -0.5 * float(
            (((centers - centers.mean(axis=0)) ** 2) * inv_h2[None, :]).sum()
        )
        if state_logw < -745.0:
            raise FloatingPointError(
                "all KDE component weights underflowed; increase the bandwidth h"
            )
        out[s] = centers.mean(axis=0) + rng.standard_normal(d) * h / math.sqrt(J)
    return (out, visited) if return_indices else out


def sample_subposteriors_on_cluster(target: FactoredTarget, plan: ShardPlan,
                                    sampler, cluster: SimCluster):
    """Run per-shard samplers as independent workers; one gather at the end.

    ``sampler(subtarget, worker_rng) -> (T, d) draws``. Returns (J, T, d)
    draws; the trace shows no inter-worker traffic before the final gather.
    """
    J = plan.J
    if cluster.n_workers != J:
        raise ValueError("need one worker per shard")
    results = [None] * J

    def on_sample(cl, msg):
        j = msg.payload
        sub = subposterior_target(target, plan, j)
        draws = sampler(sub, cl.worker_rng(j))
        cl.charge(j, float(len(draws) * max(sub.n_data, 1)))
        cl.send(j, MASTER, "consensus-gather", (j, draws))

    def on_gather(cl, msg):
        j, draws = msg.payload
        results[j] = np.asarray(draws, dtype=float)

    for j in range(J):
        cluster.send(MASTER, j, "consensus-sample", j)
    cluster.run_until_quiescent({"consensus-sample": on_sample,
                                 "consensus-gather": on_gather})
    arr = np.stack(results)
    return arr if arr.ndim == 3 else arr[:, :, None]
