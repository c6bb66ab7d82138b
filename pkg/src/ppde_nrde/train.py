"""Training objectives, the epoch loop, and test-set evaluation.

Method 1 regresses the model output at every coarse node onto the discounted
pathwise payoff.  Method 2 (constant rate, zero source) additionally trains a
derivative head so that discounted output increments match the derivative
contracted with discounted path increments, plus a terminal-fit term; the
per-step bracket is squared by default (a raw sum telescopes and leaves the
derivative head unconstrained), controlled by ``squared_increments``.

Every epoch simulates a fresh batch seeded by (seed, epoch), so a training
run is a pure function of its configuration.
"""

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import adjoint, net, nrde, problems, sde


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or hidden state."""

    def __init__(self, epoch, detail):
        self.epoch = epoch
        super().__init__(f"training diverged at epoch {epoch}: {detail}")


@dataclass
class TrainConfig:
    method: str = "m1"
    epochs: int = 2000
    batch_size: int = 64
    learning_rate: float = 0.1
    adagrad_eps: float = 1e-10
    seed: int = 0
    squared_increments: bool = True

    def __post_init__(self):
        if self.method not in ("m1", "m2"):
            raise ValueError("method must be 'm1' or 'm2'")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


def derived_seed(*parts):
    """Deterministic 64-bit stream key from structured integer parts."""
    return int(np.random.SeedSequence(tuple(int(p) for p in parts)).generate_state(1, np.uint64)[0])


# --------------------------------------------------------------------------- #
# Losses                                                                      #
# --------------------------------------------------------------------------- #


def loss_method1(u_hat, targets):
    """Mean over paths of the summed squared nodewise regression residuals."""
    u_hat = np.asarray(u_hat, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if u_hat.shape != targets.shape or u_hat.ndim != 2:
        raise ValueError("u_hat and targets must both be (batch, n_nodes)")
    return float(np.sum((targets - u_hat) ** 2) / u_hat.shape[0])


def loss_method1_cotangents(u_hat, targets):
    loss = loss_method1(u_hat, targets)
    cot_u = 2.0 * (u_hat - targets) / u_hat.shape[0]
    return loss, cot_u


def _m2_residuals(u_hat, dx_hat, discounted_values, rate, times):
    disc = np.exp(-rate * times)
    du = disc * u_hat  # (B, J+1)
    dxbar = np.diff(discounted_values, axis=1)  # (B, J, d)
    ito = np.einsum("bjd,bjd->bj", dx_hat[:, :-1, :], dxbar)  # left-point evaluation
    return du[:, 1:] - du[:, :-1] - ito, dxbar


def loss_method2_terms(u_hat, dx_hat, discounted_values, terminal_payoffs, rate, times,
                       squared=True):
    """Total loss plus its (increment, terminal) components."""
    if dx_hat is None:
        raise ValueError("the martingale objective needs the derivative head output")
    u_hat = np.asarray(u_hat, dtype=float)
    dx_hat = np.asarray(dx_hat, dtype=float)
    b = u_hat.shape[0]
    resid, _ = _m2_residuals(u_hat, dx_hat, discounted_values, rate, times)
    inc = float(np.sum(resid**2 if squared else resid) / b)
    term = float(np.sum((terminal_payoffs - u_hat[:, -1]) ** 2) / b)
    return inc + term, inc, term


def loss_method2(u_hat, dx_hat, discounted_values, terminal_payoffs, rate, times, squared=True):
    return loss_method2_terms(u_hat, dx_hat, discounted_values, terminal_payoffs, rate, times,
                              squared)[0]


def loss_method2_cotangents(u_hat, dx_hat, discounted_values, terminal_payoffs, rate, times,
                            squared=True):
    total, inc, term = loss_method2_terms(u_hat, dx_hat, discounted_values, terminal_payoffs,
                                          rate, times, squared)
    b, n_nodes = u_hat.shape
    resid, dxbar = _m2_residuals(u_hat, dx_hat, discounted_values, rate, times)
    disc = np.exp(-rate * times)
    cot_u = np.zeros_like(u_hat)
    cot_dx = np.zeros_like(dx_hat)
    if squared:
        cot_u[:, 1:] += 2.0 / b * disc[1:] * resid
        cot_u[:, :-1] -= 2.0 / b * disc[:-1] * resid
        cot_dx[:, :-1, :] -= 2.0 / b * resid[..., None] * dxbar
    else:
        cot_u[:, 1:] += disc[1:] / b
        cot_u[:, :-1] -= disc[:-1] / b
        cot_dx[:, :-1, :] -= dxbar / b
    cot_u[:, -1] += 2.0 / b * (u_hat[:, -1] - terminal_payoffs)
    return total, inc, term, cot_u, cot_dx


# --------------------------------------------------------------------------- #
# Epoch loop                                                                  #
# --------------------------------------------------------------------------- #


@dataclass
class TrainResult:
    model: nrde.NrdeModel
    losses: np.ndarray
    terminal_losses: object = None  # (epochs,) for the martingale objective


def train(model, problem, config):
    """Optimize the model on freshly simulated batches; deterministic per config."""
    if config.method == "m2" and model.readout_dx is None:
        raise ValueError("method 'm2' requires a model with the derivative head")
    grid = problem.grid
    params = nrde.flatten_params(model)
    state = net.AdagradState(len(params), lr=config.learning_rate, eps=config.adagrad_eps)
    losses = np.empty(config.epochs)
    terminal = np.empty(config.epochs) if config.method == "m2" else None
    coarse_idx = grid.coarse_indices()
    times = grid.coarse_times()
    disc_nodes = np.exp(-problem.rate * times)
    for epoch in range(config.epochs):
        batch = sde.simulate_batch(
            problem.dynamics, problem.init, grid, config.batch_size,
            derived_seed(config.seed, epoch),
        )
        try:
            feats = nrde.compute_features(model, batch.values, grid)
            z_nodes = nrde.hidden_nodes(model, feats)
        except FloatingPointError as exc:
            raise DivergenceError(epoch, str(exc)) from exc
        u_hat = net.forward(model.readout_u, z_nodes)[..., 0]
        if config.method == "m1":
            targets = problems.target_nodes(problem, batch.values)
            loss, cot_u = loss_method1_cotangents(u_hat, targets)
            cot_dx = None
        else:
            dx_hat = net.forward(model.readout_dx, z_nodes)
            xbar = batch.values[:, coarse_idx] * disc_nodes[None, :, None]
            payoffs = problems.payoff_values(problem, batch.values)
            loss, _, term, cot_u, cot_dx = loss_method2_cotangents(
                u_hat, dx_hat, xbar, payoffs, problem.rate, times,
                squared=config.squared_increments,
            )
            terminal[epoch] = term
        if not np.isfinite(loss):
            raise DivergenceError(epoch, f"loss={loss}")
        grad = adjoint.adjoint_grad(model, feats, cot_u, cot_dx, z_nodes=z_nodes)
        params = net.adagrad_step(state, params, grad)
        nrde.set_params(model, params)
        losses[epoch] = loss
    return TrainResult(model=model, losses=losses, terminal_losses=terminal)


# --------------------------------------------------------------------------- #
# Evaluation                                                                  #
# --------------------------------------------------------------------------- #


@dataclass
class EvalReport:
    """Time-integrated errors against the oracle, per test batch."""

    abs_err_mean: float
    abs_err_std: float
    rel_err_mean: float
    rel_err_std: float
    batch_abs: np.ndarray
    batch_rel: np.ndarray
    per_time_rel: np.ndarray
    trace_times: np.ndarray
    trace_u_true: np.ndarray
    trace_u_hat: np.ndarray


def oracle_nodes(problem, batch, oracle_sims, seed, cache=None, threads=1):
    """Reference solution at every coarse node for every path of a batch.

    Analytic for the heat problem; otherwise the conditional Monte-Carlo
    estimate with its own derived seed per (path, node).
    """
    grid = problem.grid
    if problem.has_analytic_solution:
        return problems.heat_analytic_nodes(batch.values, grid)
    idx = grid.coarse_indices()
    tasks = [(i, j) for i in range(len(batch)) for j in range(len(idx))]

    def work(task):
        i, j = task
        k = idx[j]
        prefix = (batch.times[: k + 1], batch.values[i, : k + 1])
        mean, _ = problems.mc_oracle(
            problem, prefix, oracle_sims, derived_seed(seed, i, j), cache=cache
        )
        return mean

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            flat = list(pool.map(work, tasks))
    else:
        flat = [work(t) for t in tasks]
    return np.array(flat).reshape(len(batch), len(idx))


def evaluate(model, problem, n_test=50, n_batches=10, seed=2024, oracle_sims=2000,
             cache=None, threads=1):
    """Abs/Rel errors over independent test batches.

    Abs.err is (dt / n_test) * sum_{paths, nodes} |u - u_hat|; Rel.err divides
    by the same functional of |u|.  Means and standard deviations are taken
    across the ``n_batches`` test sets.
    """
    grid = problem.grid
    dt = grid.dt
    batch_abs = np.empty(n_batches)
    batch_rel = np.empty(n_batches)
    num_time = np.zeros(grid.coarse_steps + 1)
    den_time = np.zeros(grid.coarse_steps + 1)
    trace = None
    for b in range(n_batches):
        batch = sde.simulate_batch(
            problem.dynamics, problem.init, grid, n_test, derived_seed(seed, 7001, b)
        )
        pred = nrde.predict_batch(model, batch.values, grid)
        u_true = oracle_nodes(problem, batch, oracle_sims, derived_seed(seed, 7002, b),
                              cache=cache, threads=threads)
        diff = np.abs(u_true - pred.u)
        denom = dt / n_test * float(np.sum(np.abs(u_true)))
        if denom == 0.0:
            raise ZeroDivisionError("oracle magnitude normalizer is zero")
        batch_abs[b] = dt / n_test * float(np.sum(diff))
        batch_rel[b] = batch_abs[b] / denom
        num_time += diff.sum(axis=0)
        den_time += np.abs(u_true).sum(axis=0)
        if b == 0:
            trace = (grid.coarse_times(), u_true, pred.u)
    ddof = 1 if n_batches > 1 else 0
    return EvalReport(
        abs_err_mean=float(batch_abs.mean()),
        abs_err_std=float(batch_abs.std(ddof=ddof)),
        rel_err_mean=float(batch_rel.mean()),
        rel_err_std=float(batch_rel.std(ddof=ddof)),
        batch_abs=batch_abs,
        batch_rel=batch_rel,
        per_time_rel=num_time / np.maximum(den_time, 1e-300),
        trace_times=trace[0],
        trace_u_true=trace[1],
        trace_u_hat=trace[2],
    )


# --------------------------------------------------------------------------- #
# CSV writers                                                                 #
# --------------------------------------------------------------------------- #


def write_learning_curve(result, fileobj):
    writer = csv.writer(fileobj, lineterminator="\n")
    writer.writerow(["epoch", "loss"])
    for epoch, loss in enumerate(result.losses):
        writer.writerow([epoch, repr(float(loss))])


def write_eval_csv(report, fileobj):
    writer = csv.writer(fileobj, lineterminator="\n")
    writer.writerow(["batch", "abs_err", "rel_err"])
    for b, (a, r) in enumerate(zip(report.batch_abs, report.batch_rel)):
        writer.writerow([b, repr(float(a)), repr(float(r))])


def write_trace_csv(report, fileobj):
    writer = csv.writer(fileobj, lineterminator="\n")
    writer.writerow(["path_id", "t", "u_true", "u_hat"])
    for i in range(report.trace_u_true.shape[0]):
        for j, t in enumerate(report.trace_times):
            writer.writerow(
                [i, repr(float(t)), repr(float(report.trace_u_true[i, j])),
                 repr(float(report.trace_u_hat[i, j]))]
            )
