"""Euler-Maruyama simulation of driving paths on a fine grid.

Every path in a batch owns a counter-based RNG stream keyed by
``(seed, path_index)``, so results are bit-identical no matter how the batch
is partitioned or parallelized.  Increments are consumed one time step at a
time with coordinates in order.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .signatures import PiecewisePath

_KEY_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class GridSpec:
    """Time discretisation: a coarse solution grid and a finer simulation grid.

    The horizon ``[0, T]`` is split into ``coarse_steps`` intervals of length
    ``dt`` on which the solution is learned; each is subdivided ``refine``
    times for simulating the driving process.
    """

    horizon: float
    coarse_steps: int = 10
    refine: int = 10

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.coarse_steps < 1 or self.refine < 1:
            raise ValueError("coarse_steps and refine must be >= 1")

    @property
    def dt(self):
        return self.horizon / self.coarse_steps

    @property
    def dt_fine(self):
        return self.horizon / (self.coarse_steps * self.refine)

    @property
    def n_fine(self):
        return self.coarse_steps * self.refine

    def fine_times(self):
        return np.linspace(0.0, self.horizon, self.n_fine + 1)

    def coarse_times(self):
        return np.linspace(0.0, self.horizon, self.coarse_steps + 1)

    def coarse_indices(self):
        """Indices of the coarse nodes inside the fine grid."""
        return np.arange(0, self.n_fine + 1, self.refine)


# --------------------------------------------------------------------------- #
# Dynamics                                                                    #
# --------------------------------------------------------------------------- #


class Dynamics:
    """State dynamics dX = b(X) dt + sigma(X) dW with batched coefficients."""

    dim = None
    noise_dim = None

    def drift(self, x):
        raise NotImplementedError

    def noise(self, x, dw):
        """sigma(X) dW for a batch of states (n, dim) and increments (n, noise_dim)."""
        raise NotImplementedError


class BrownianMotion(Dynamics):
    """Standard d-dimensional Brownian motion."""

    def __init__(self, dim):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim
        self.noise_dim = dim

    def drift(self, x):
        return np.zeros_like(x)

    def noise(self, x, dw):
        return dw


class BlackScholes(Dynamics):
    """Correlated geometric Brownian motions: dX^i = r X^i dt + s^i X^i (L dW)^i."""

    def __init__(self, dim, rate=0.05, vols=1.0, cov=None):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim
        self.noise_dim = dim
        self.rate = rate
        self.vols = np.broadcast_to(np.asarray(vols, dtype=float), (dim,)).copy()
        if cov is None:
            cov = np.eye(dim)
        cov = np.asarray(cov, dtype=float)
        if cov.shape != (dim, dim) or not np.allclose(cov, cov.T):
            raise ValueError("cov must be a symmetric (dim, dim) matrix")
        self.cov = cov
        self.chol = np.linalg.cholesky(cov)  # fails unless positive definite

    def drift(self, x):
        return self.rate * x

    def noise(self, x, dw):
        return self.vols * x * (dw @ self.chol.T)


class Heston(Dynamics):
    """Stochastic-volatility pair (S, V) with full-truncation handling of V.

    dS = mu S dt + sqrt(V+) S dW_s,  dV = kappa (m - V+) dt + eta sqrt(V+) dW_v,
    where V+ = max(V, 0); independent drivers.
    """

    dim = 2
    noise_dim = 2

    def __init__(self, mu=0.05, kappa=0.8, m=0.3, eta=0.05):
        if 2 * kappa * m < 0 or eta < 0:
            raise ValueError("need kappa*m >= 0 and eta >= 0")
        self.mu = mu
        self.kappa = kappa
        self.m = m
        self.eta = eta

    def drift(self, x):
        v_plus = np.maximum(x[:, 1], 0.0)
        return np.stack([self.mu * x[:, 0], self.kappa * (self.m - v_plus)], axis=1)

    def noise(self, x, dw):
        root_v = np.sqrt(np.maximum(x[:, 1], 0.0))
        return np.stack([root_v * x[:, 0] * dw[:, 0], self.eta * root_v * dw[:, 1]], axis=1)


# --------------------------------------------------------------------------- #
# Initial-value samplers                                                      #
# --------------------------------------------------------------------------- #


class FixedInit:
    """Deterministic initial value (consumes no randomness)."""

    def __init__(self, x0):
        self.x0 = np.atleast_1d(np.asarray(x0, dtype=float))

    def sample(self, rng, dim):
        if self.x0.shape == (1,) and dim > 1:
            return np.full(dim, self.x0[0])
        if self.x0.shape != (dim,):
            raise ValueError(f"initial value has dim {self.x0.shape[0]}, expected {dim}")
        return self.x0.copy()


class LognormalInit:
    """Per-coordinate lognormal start: exp((mu - sigma^2/2) tau + sigma sqrt(tau) xi)."""

    def __init__(self, mu=0.08, tau=0.1, sigma=0.1):
        if tau <= 0 or sigma <= 0:
            raise ValueError("tau and sigma must be positive")
        self.mu = mu
        self.tau = tau
        self.sigma = sigma

    def sample(self, rng, dim):
        xi = rng.standard_normal(dim)
        return np.exp((self.mu - 0.5 * self.sigma**2) * self.tau + self.sigma * np.sqrt(self.tau) * xi)


# --------------------------------------------------------------------------- #
# Batch simulation                                                            #
# --------------------------------------------------------------------------- #


class PathBatch:
    """A batch of paths sharing one time grid; iterates as :class:`PiecewisePath`."""

    def __init__(self, times, values):
        self.times = np.asarray(times, dtype=float)
        self.values = np.asarray(values, dtype=float)
        if self.values.ndim != 3 or self.values.shape[1] != len(self.times):
            raise ValueError("values must have shape (batch, len(times), dim)")

    @property
    def batch_size(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[2]

    def __len__(self):
        return self.values.shape[0]

    def __getitem__(self, i):
        return PiecewisePath(self.times, self.values[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def path_stream(seed, index):
    """Counter-based generator for one path, independent across indices."""
    return np.random.Generator(np.random.Philox(key=[int(seed) & _KEY_MASK, int(index)]))


def simulate_batch(dynamics, init, grid, batch, seed):
    """Euler-Maruyama paths of ``dynamics`` on the fine grid of ``grid``.

    Each path draws its initial value and then its Wiener increments from its
    own ``(seed, path_index)`` stream, one step at a time, coordinates in
    order.  Deterministic given (seed, batch, grid).
    """
    if batch < 1:
        raise ValueError("batch must be >= 1")
    d = dynamics.dim
    m = dynamics.noise_dim
    n = grid.n_fine
    dt = grid.dt_fine
    sq = np.sqrt(dt)
    x0 = np.empty((batch, d))
    dw = np.empty((batch, n, m))
    for i in range(batch):
        rng = path_stream(seed, i)
        x0[i] = init.sample(rng, d)
        dw[i] = rng.standard_normal((n, m)) * sq
    values = np.empty((batch, n + 1, d))
    values[:, 0] = x0
    state = x0
    for k in range(n):
        state = state + dynamics.drift(state) * dt + dynamics.noise(state, dw[:, k])
        if not np.all(np.isfinite(state)):
            raise FloatingPointError(f"simulation diverged at fine step {k + 1}")
        values[:, k + 1] = state
    return PathBatch(grid.fine_times(), values)


def _check_fine_grid(times, grid):
    if len(times) != grid.n_fine + 1 or not np.allclose(times, grid.fine_times(), atol=1e-12):
        raise ValueError("path grid does not match the fine grid of the GridSpec")


def restrict_to_coarse(path, grid):
    """Coarse-node view of a fine path (or batch): every ``refine``-th sample."""
    _check_fine_grid(path.times, grid)
    idx = grid.coarse_indices()
    if isinstance(path, PathBatch):
        return PathBatch(path.times[idx], path.values[:, idx])
    return PiecewisePath(path.times[idx], path.values[idx])


def fine_interval(path, grid, i):
    """Fine sub-path over the i-th coarse interval (for feature extraction)."""
    _check_fine_grid(path.times, grid)
    if not 0 <= i < grid.coarse_steps:
        raise ValueError(f"interval index {i} out of range")
    lo = i * grid.refine
    hi = (i + 1) * grid.refine
    if isinstance(path, PathBatch):
        return PathBatch(path.times[lo : hi + 1], path.values[:, lo : hi + 1])
    return PiecewisePath(path.times[lo : hi + 1], path.values[lo : hi + 1])


def dump_paths_csv(batch, fileobj):
    """Write a batch as rows ``path_id,t,x_0..x_{d-1}``."""
    writer = csv.writer(fileobj, lineterminator="\n")
    writer.writerow(["path_id", "t"] + [f"x_{j}" for j in range(batch.dim)])
    for i in range(len(batch)):
        for k, t in enumerate(batch.times):
            writer.writerow([i, repr(float(t))] + [repr(float(v)) for v in batch.values[i, k]])
