"""Weierstrass-transform augmented-model Gibbs sampling.

Each shard owns a noisy local copy xi_j of the global parameter, coupled
through Gaussian potentials of bandwidth h (per coordinate). Sampling
alternates exact draws of theta | xi with per-shard updates of
xi_j | theta, shrinking h trades sampling efficiency for fidelity to the
true posterior.
"""

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .mcmc import SampleBuffer
from .models import FactoredTarget
from .rng import KeyedRng
from .simcluster import MASTER, SimCluster

__all__ = [
    "WeierstrassState",
    "theta_update",
    "xi_update",
    "weierstrass_run",
    "augmented_gaussian_oracle",
]


@dataclass
class WeierstrassState:
    theta: np.ndarray      # (d,)
    xi: np.ndarray         # (J, d)
    h: np.ndarray          # (d,) positive bandwidths

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.xi = np.atleast_2d(np.asarray(self.xi, dtype=float))
        self.h = np.broadcast_to(np.asarray(self.h, dtype=float),
                                 self.theta.shape).copy()
        if np.any(self.h <= 0):
            raise ValueError("bandwidths must be positive")


def theta_update(state: WeierstrassState, rng: np.random.Generator) -> np.ndarray:
    """theta | xi ~ N(mean of local copies, h^2/J) per coordinate."""
    J = state.xi.shape[0]
    xi_bar = state.xi.mean(axis=0)
    return xi_bar + state.h / math.sqrt(J) * rng.standard_normal(state.theta.shape)


def xi_update(state: WeierstrassState, j: int, subposterior, inner_steps: int,
              rng: np.random.Generator, proposal_scale: Optional[float] = None):
    """Advance xi_j targeting N(xi; theta, h^2) f_j(xi).

    ``subposterior`` is either a tuple (mu, cov) of an analytic Gaussian
    f_j, in which case the conditional is drawn exactly, or a callable
    log f_j(xi) advanced by ``inner_steps`` random-walk MH steps.
    """
    if inner_steps < 1:
        raise ValueError("inner_steps must be >= 1")
    theta, h = state.theta, state.h
    d = theta.size
    if isinstance(subposterior, tuple):
        mu, cov = subposterior
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        prec = np.linalg.inv(cov) + np.diag(1.0 / h**2)
        cond_cov = np.linalg.inv(prec)
        cond_mu = cond_cov @ (np.linalg.inv(cov) @ mu + theta / h**2)
        return rng.multivariate_normal(cond_mu, cond_cov, method="cholesky")
    log_f = subposterior
    xi = state.xi[j].copy()
    scale = proposal_scale if proposal_scale is not None else float(np.min(h))

    def log_target(x):
        return float(log_f(x)) - 0.5 * float(np.sum((x - theta) ** 2 / h**2))

    current = log_target(xi)
    for _ in range(inner_steps):
        prop = xi + scale * rng.standard_normal(d)
        cand = log_target(prop)
        if math.log(rng.uniform()) < cand - current:
            xi, current = prop, cand
    return xi


def weierstrass_run(subposteriors: Sequence, theta0, h, T: int,
                    inner_steps: int = 5, sync_every: int = 1,
                    rng: Optional[KeyedRng] = None,
                    cluster: Optional[SimCluster] = None) -> SampleBuffer:
    """Alternate parallel xi updates with synchronized theta draws.

    ``subposteriors`` is a list whose entries are (mu, cov) tuples or
    callables as in ``xi_update``. Each round broadcasts theta to the J
    workers, updates every xi_j in parallel on the cluster, gathers the
    results, and redraws theta; ``sync_every`` > 1 redraws theta only every
    s-th round (the communication-avoiding variant).
    """
    rng = KeyedRng(0) if rng is None else rng
    J = len(subposteriors)
    if cluster is None:
        cluster = SimCluster(J, seed=rng.seed)
    if cluster.n_workers != J:
        raise ValueError("need one worker per shard")
    theta0 = np.atleast_1d(np.asarray(theta0, dtype=float))
    state = WeierstrassState(theta=theta0.copy(),
                             xi=np.tile(theta0, (J, 1)), h=h)
    draws = np.empty((T, theta0.size))
    flags = np.ones(T, dtype=bool)

    new_xi = {}

    def on_update(cl, msg):
        j, theta, t = msg.payload
        st = WeierstrassState(theta=theta, xi=state.xi, h=state.h)
        gen = cl.worker_rng(j).derive("xi", t)
        xi_j = xi_update(st, j, subposteriors[j], inner_steps, gen)
        cl.charge(j, float(inner_steps))
        cl.send(j, MASTER, "weier-gather", (j, xi_j))

    def on_gather(cl, msg):
        j, xi_j = msg.payload
        new_xi[j] = xi_j

    for t in range(T):
        new_xi.clear()
        for j in range(J):
            cluster.send(MASTER, j, "weier-update", (j, state.theta.copy(), t))
        cluster.run_until_quiescent({"weier-update": on_update,
                                     "weier-gather": on_gather})
        for j, xi_j in new_xi.items():
            state.xi[j] = xi_j
        if (t + 1) % sync_every == 0:
            state.theta = theta_update(state, rng.derive("theta", t))
        draws[t] = state.theta
    return SampleBuffer(draws=draws, accept_flags=flags)


def augmented_gaussian_oracle(subposteriors, h):
    """Exact (theta mean, theta variance) of the 1D augmented model by dense
    linear algebra, for Gaussian subposteriors (mu_j, var_j)."""
    J = len(subposteriors)
    h = float(np.atleast_1d(np.asarray(h, float))[0])
    n = J + 1
    prec = np.zeros((n, n))
    lin = np.zeros(n)
    prec[0, 0] = J / h**2
    for j, (mu, var) in enumerate(subposteriors, start=1):
        mu = float(np.ravel(mu)[0])
        var = float(np.ravel(var)[0])
        prec[j, j] = 1.0 / h**2 + 1.0 / var
        prec[0, j] = prec[j, 0] = -1.0 / h**2
        lin[j] = mu / var
    cov = np.linalg.inv(prec)
    mean = cov @ lin
    return float(mean[0]), float(cov[0, 0])
