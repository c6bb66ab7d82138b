"""Path-dependent problem instances: payoffs, discounting, targets, oracles.

Each :class:`ProblemSpec` bundles the driving dynamics, the pathwise payoff
g, the constant discount rate and the grids.  The running source term is zero
for every problem here, so the regression target at a coarse node t_j reduces
to e^{-r (T - t_j)} g(path).  Time integrals inside payoffs use left-point
Riemann sums on the fine grid; running maxima scan fine-grid nodes.
"""

import csv
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import sde

# --------------------------------------------------------------------------- #
# Payoffs                                                                     #
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class HeatIntegralSquared:
    """g = (integral over [0,T] of the coordinate sum)^2."""


@dataclass(frozen=True)
class Lookback:
    """g = max_t sum_i X^i(t) - sum_i X^i(T), running max over fine nodes."""


@dataclass(frozen=True)
class Autocallable:
    """First-touch coupon structure on the price coordinate S = X^0.

    Pays ``coupons[j]`` at the first observation date with S(t_j) >= barrier
    (the first date triggers on its own, with no prior-date condition), else
    ``redemption * S(T)``.  Observation dates are matched to the nearest fine
    grid node.  Coupon values are treated as terminal-time cashflow
    equivalents, so the uniform e^{-r (T - t)} discount of ``target_value``
    applies to them unchanged.
    """

    barrier: float = 1.02
    obs_times: tuple = (1.0 / 6.0, 1.0 / 3.0)
    coupons: tuple = (1.1, 1.2)
    redemption: float = 0.9

    def __post_init__(self):
        if len(self.obs_times) != len(self.coupons):
            raise ValueError("need one coupon per observation date")
        if not all(a < b for a, b in zip(self.obs_times, self.obs_times[1:])):
            raise ValueError("observation dates must be strictly increasing")


@dataclass(frozen=True)
class ProblemSpec:
    """A complete problem: dynamics, initial law, discount rate, payoff, grids."""

    dynamics: sde.Dynamics
    init: object
    rate: float
    payoff: object
    grid: sde.GridSpec

    def __post_init__(self):
        if isinstance(self.payoff, Autocallable):
            if any(t >= self.grid.horizon for t in self.payoff.obs_times):
                raise ValueError("observation dates must lie before the horizon")

    @property
    def dim(self):
        return self.dynamics.dim

    @property
    def has_analytic_solution(self):
        return isinstance(self.payoff, HeatIntegralSquared)

    def describe(self):
        """Stable dict of defining parameters (used for hashing/caching)."""
        dyn = self.dynamics
        d = {"rate": self.rate, "dim": self.dim, "payoff": type(self.payoff).__name__,
             "dynamics": type(dyn).__name__,
             "grid": [self.grid.horizon, self.grid.coarse_steps, self.grid.refine]}
        if isinstance(dyn, sde.BlackScholes):
            d["vols"] = list(dyn.vols)
            d["cov"] = dyn.cov.ravel().tolist()
        if isinstance(dyn, sde.Heston):
            d.update(mu=dyn.mu, kappa=dyn.kappa, m=dyn.m, eta=dyn.eta)
        if isinstance(self.payoff, Autocallable):
            p = self.payoff
            d.update(barrier=p.barrier, obs=list(p.obs_times), coupons=list(p.coupons),
                     redemption=p.redemption)
        return d

    def hash(self):
        return hashlib.sha256(json.dumps(self.describe(), sort_keys=True).encode()).hexdigest()[:16]


def heat_problem(dim, horizon=1.0, coarse_steps=10, refine=10, x0=0.0):
    return ProblemSpec(
        dynamics=sde.BrownianMotion(dim),
        init=sde.FixedInit(np.full(dim, float(x0))),
        rate=0.0,
        payoff=HeatIntegralSquared(),
        grid=sde.GridSpec(horizon, coarse_steps, refine),
    )


def lookback_problem(dim, rate=0.05, vols=1.0, cov=None, horizon=1.0, coarse_steps=10,
                     refine=10, init_mu=0.08, init_tau=0.1, init_sigma=0.1):
    return ProblemSpec(
        dynamics=sde.BlackScholes(dim, rate=rate, vols=vols, cov=cov),
        init=sde.LognormalInit(mu=init_mu, tau=init_tau, sigma=init_sigma),
        rate=rate,
        payoff=Lookback(),
        grid=sde.GridSpec(horizon, coarse_steps, refine),
    )


def autocallable_problem(mu=0.05, kappa=0.8, m=0.3, eta=0.05, s0=1.0, v0=0.3,
                         horizon=0.5, coarse_steps=10, refine=10, barrier=1.02,
                         obs_times=(1.0 / 6.0, 1.0 / 3.0), coupons=(1.1, 1.2),
                         redemption=0.9):
    return ProblemSpec(
        dynamics=sde.Heston(mu=mu, kappa=kappa, m=m, eta=eta),
        init=sde.FixedInit([s0, v0]),
        rate=mu,
        payoff=Autocallable(barrier, tuple(obs_times), tuple(coupons), redemption),
        grid=sde.GridSpec(horizon, coarse_steps, refine),
    )


# --------------------------------------------------------------------------- #
# Pathwise payoff evaluation                                                  #
# --------------------------------------------------------------------------- #


def _nearest_fine_index(grid, t):
    return int(round(t / grid.dt_fine))


def payoff_values(spec, values):
    """Payoffs of a batch of full fine-grid paths, shape (batch,)."""
    grid = spec.grid
    if values.shape[1] != grid.n_fine + 1:
        raise ValueError("payoff requires full paths over [0, T] on the fine grid")
    kind = spec.payoff
    if isinstance(kind, HeatIntegralSquared):
        integral = values[:, :-1, :].sum(axis=2).sum(axis=1) * grid.dt_fine
        return integral**2
    if isinstance(kind, Lookback):
        sums = values.sum(axis=2)
        return sums.max(axis=1) - sums[:, -1]
    if isinstance(kind, Autocallable):
        s = values[:, :, 0]
        out = kind.redemption * s[:, -1]
        taken = np.zeros(values.shape[0], dtype=bool)
        for t_obs, coupon in zip(kind.obs_times, kind.coupons):
            hit = ~taken & (s[:, _nearest_fine_index(grid, t_obs)] >= kind.barrier)
            out = np.where(hit, coupon, out)
            taken |= hit
        return out
    raise TypeError(f"unknown payoff kind {type(kind).__name__}")


def payoff(spec, path):
    """Pathwise payoff of one full fine-grid path."""
    if abs(path.times[-1] - spec.grid.horizon) > 1e-12:
        raise ValueError("path horizon does not match the problem horizon")
    return float(payoff_values(spec, path.values[None])[0])


def target_value(spec, path, t):
    """Feynman-Kac regression target at coarse node t: e^{-r (T-t)} g(path)."""
    times = spec.grid.coarse_times()
    if not np.any(np.isclose(times, t, atol=1e-12)):
        raise ValueError(f"t={t} is not a coarse node")
    return float(np.exp(-spec.rate * (spec.grid.horizon - t)) * payoff(spec, path))


def target_nodes(spec, values):
    """Targets at every coarse node for a batch of full paths, shape (batch, J+1)."""
    g = payoff_values(spec, values)
    disc = np.exp(-spec.rate * (spec.grid.horizon - spec.grid.coarse_times()))
    return g[:, None] * disc[None, :]


# --------------------------------------------------------------------------- #
# Oracles                                                                     #
# --------------------------------------------------------------------------- #


def prefix_arrays(prefix):
    """Normalize a path prefix to ``(times, values)`` arrays.

    Accepts a :class:`PiecewisePath` or a ``(times, values)`` pair.  Unlike a
    full path, a prefix may consist of a single node (the state at t = 0).
    """
    if hasattr(prefix, "times") and hasattr(prefix, "values"):
        times, values = prefix.times, prefix.values
    else:
        times, values = prefix
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if times.ndim != 1 or len(times) < 1 or len(times) != len(values):
        raise ValueError("prefix needs matching times (k,) and values (k, d), k >= 1")
    return times, values


def heat_analytic(prefix, horizon):
    """Closed-form solution of the integrated-sum-squared problem at the prefix end.

    Uses the left-point Riemann integral of the coordinate sum over the
    prefix, matching the payoff quadrature exactly at t = T.
    """
    times, values = prefix_arrays(prefix)
    t = float(times[-1])
    sums = values.sum(axis=1)
    integral = float(np.sum(sums[:-1] * np.diff(times)))
    d = values.shape[1]
    tail = horizon - t
    return integral**2 + 2 * tail * sums[-1] * integral + tail**2 * sums[-1] ** 2 + d / 3 * tail**3


def heat_analytic_nodes(values, grid):
    """Vectorized analytic solution at all coarse nodes, shape (batch, J+1)."""
    sums = values.sum(axis=2)
    cum = np.concatenate(
        [np.zeros((values.shape[0], 1)), np.cumsum(sums[:, :-1] * grid.dt_fine, axis=1)], axis=1
    )
    idx = grid.coarse_indices()
    integral = cum[:, idx]
    s_t = sums[:, idx]
    tail = grid.horizon - grid.fine_times()[idx]
    d = values.shape[2]
    return integral**2 + 2 * tail * s_t * integral + tail**2 * s_t**2 + d / 3 * tail**3


def mc_oracle(spec, prefix, n_sims, seed, cache=None):
    """Monte-Carlo estimate of the conditional target given a path prefix.

    Simulates ``n_sims`` continuations of the dynamics from the prefix
    endpoint (each on its own ``(seed, i)`` stream), splices them onto the
    prefix, and averages the discounted payoff.  Returns ``(mean, std_err)``.
    """
    if n_sims < 2:
        raise ValueError("n_sims must be >= 2 for a standard error")
    grid = spec.grid
    times, prefix_values = prefix_arrays(prefix)
    n_prefix = len(times) - 1
    if n_prefix % grid.refine != 0:
        raise ValueError("prefix must end on a coarse node")
    if not np.allclose(times, grid.fine_times()[: n_prefix + 1], atol=1e-12):
        raise ValueError("prefix times do not lie on the fine grid")
    t_j = float(times[-1])
    if cache is not None:
        hit = cache.get(spec, (times, prefix_values), t_j)
        if hit is not None:
            return hit
    n_rest = grid.n_fine - n_prefix
    d = spec.dynamics.dim
    full = np.empty((n_sims, grid.n_fine + 1, d))
    full[:, : n_prefix + 1] = prefix_values[None]
    if n_rest > 0:
        m = spec.dynamics.noise_dim
        dt = grid.dt_fine
        sq = np.sqrt(dt)
        dw = np.empty((n_sims, n_rest, m))
        for i in range(n_sims):
            dw[i] = sde.path_stream(seed, i).standard_normal((n_rest, m)) * sq
        state = np.repeat(prefix_values[-1][None], n_sims, axis=0)
        for k in range(n_rest):
            state = state + spec.dynamics.drift(state) * dt + spec.dynamics.noise(state, dw[:, k])
            if not np.all(np.isfinite(state)):
                raise FloatingPointError(f"continuation diverged at fine step {n_prefix + k + 1}")
            full[:, n_prefix + k + 1] = state
    disc = np.exp(-spec.rate * (grid.horizon - t_j))
    samples = disc * payoff_values(spec, full)
    mean = float(samples.mean())
    std_err = float(samples.std(ddof=1) / np.sqrt(n_sims))
    if cache is not None:
        cache.put(spec, (times, prefix_values), t_j, mean, std_err)
    return mean, std_err


class OracleCache:
    """CSV-backed memo of oracle values keyed by (problem, prefix, node time)."""

    def __init__(self):
        self._data = {}

    @staticmethod
    def _prefix_hash(prefix):
        times, values = prefix_arrays(prefix)
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(times).tobytes())
        h.update(np.ascontiguousarray(values).tobytes())
        return h.hexdigest()[:16]

    def get(self, spec, prefix, t_j):
        return self._data.get((spec.hash(), self._prefix_hash(prefix), repr(float(t_j))))

    def put(self, spec, prefix, t_j, mean, std_err):
        self._data[(spec.hash(), self._prefix_hash(prefix), repr(float(t_j)))] = (mean, std_err)

    def save(self, fileobj):
        writer = csv.writer(fileobj, lineterminator="\n")
        writer.writerow(["problem_hash", "prefix_hash", "t", "mean", "std_err"])
        for (ph, xh, t), (mean, se) in sorted(self._data.items()):
            writer.writerow([ph, xh, t, repr(mean), repr(se)])

    @classmethod
    def load(cls, fileobj):
        cache = cls()
        reader = csv.reader(fileobj)
        header = next(reader, None)
        if header != ["problem_hash", "prefix_hash", "t", "mean", "std_err"]:
            raise ValueError("not an oracle cache file")
        for ph, xh, t, mean, se in reader:
            cache._data[(ph, xh, t)] = (float(mean), float(se))
        return cache
