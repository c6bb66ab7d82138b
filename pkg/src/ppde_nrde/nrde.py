"""The log-signature driven hidden-state ODE model.

A path is (optionally) embedded by a trainable linear map, log-signature
features are extracted over each coarse interval, and a hidden state evolves
through dZ/ds = G(Z) w_i / |interval| with G given by a feed-forward network.
Readout heads turn the hidden state at the coarse nodes into the solution
value (and optionally its path derivative).

Predictions at a node depend only on the path up to that node: intervals are
consumed left to right and nothing later feeds back.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import net
from .signatures import PiecewisePath, beta, logsig_from_increments, logsig_from_increments_vjp

SOLVERS = ("euler", "midpoint", "rk4")

_KEY_MASK = (1 << 64) - 1


def _subseed(seed, component):
    return int(np.random.SeedSequence((int(seed), component)).generate_state(1, np.uint64)[0])


@dataclass
class NrdeModel:
    """All trainable state plus the architectural constants.

    The flat parameter vector orders blocks as: embedding matrix (row-major,
    if present), initial layer, vector-field network, value readout, and the
    derivative readout (if present); inside each network, per layer the
    row-major weights then the bias.
    """

    dim: int
    depth: int
    embed: object  # (embed_dim, dim) array or None
    time_channel: bool
    xi: net.Mlp
    field: net.Mlp
    readout_u: net.Mlp
    readout_dx: object  # Mlp or None
    solver: str
    ode_steps: int
    init_seed: int = 0

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}")
        if self.ode_steps < 1:
            raise ValueError("ode_steps must be >= 1")
        if self.field.n_out != self.hidden_dim * self.n_features:
            raise ValueError(
                f"field output {self.field.n_out} != hidden_dim*n_features "
                f"{self.hidden_dim}*{self.n_features}"
            )
        if self.xi.n_in != self.feature_dim or self.xi.n_out != self.hidden_dim:
            raise ValueError("initial layer does not match feature/hidden widths")
        if self.readout_dx is not None and self.readout_dx.n_out != self.dim:
            raise ValueError("derivative readout must map to the path dimension")

    @property
    def embed_dim(self):
        return None if self.embed is None else self.embed.shape[0]

    @property
    def feature_dim(self):
        """Dimension of the path the log-signatures are taken of."""
        base = self.dim if self.embed is None else self.embed.shape[0]
        return base + (1 if self.time_channel else 0)

    @property
    def n_features(self):
        return beta(self.feature_dim, self.depth)

    @property
    def hidden_dim(self):
        return self.field.n_in

    @property
    def n_params(self):
        n = 0 if self.embed is None else self.embed.size
        n += self.xi.n_params + self.field.n_params + self.readout_u.n_params
        if self.readout_dx is not None:
            n += self.readout_dx.n_params
        return n


def build_model(dim, hidden_dim=15, field_width=30, field_layers=2, depth=2,
                solver="midpoint", ode_steps=1, embed_dim=None, time_channel=False,
                with_dx_head=False, seed=0):
    """Construct a model with deterministic seed-derived initialization."""
    if embed_dim is not None and not 1 <= embed_dim:
        raise ValueError("embed_dim must be >= 1 when given")
    d_sig = (embed_dim if embed_dim else dim) + (1 if time_channel else 0)
    n_feat = beta(d_sig, depth)
    embed = None
    if embed_dim:
        rng = np.random.Generator(np.random.Philox(key=[_subseed(seed, 0) & _KEY_MASK, 0]))
        bound = np.sqrt(1.0 / dim)
        embed = rng.uniform(-bound, bound, size=(embed_dim, dim))
    xi = net.init_mlp([d_sig, hidden_dim], seed=_subseed(seed, 1))
    field_sizes = [hidden_dim] + [field_width] * field_layers + [hidden_dim * n_feat]
    field = net.init_mlp(field_sizes, seed=_subseed(seed, 2))
    readout_u = net.init_mlp([hidden_dim, 1], seed=_subseed(seed, 3))
    readout_dx = net.init_mlp([hidden_dim, dim], seed=_subseed(seed, 4)) if with_dx_head else None
    return NrdeModel(dim, depth, embed, time_channel, xi, field, readout_u, readout_dx,
                     solver, ode_steps, init_seed=seed)


# --------------------------------------------------------------------------- #
# Embedding and features                                                      #
# --------------------------------------------------------------------------- #


def embed_values(model, values, times=None):
    """Apply the embedding map pointwise; optionally append the time channel."""
    values = np.asarray(values, dtype=float)
    if values.shape[-1] != model.dim:
        raise ValueError(f"path dim {values.shape[-1]} != model dim {model.dim}")
    out = values if model.embed is None else values @ model.embed.T
    if model.time_channel:
        if times is None:
            raise ValueError("time channel requires sample times")
        t = np.broadcast_to(np.asarray(times, dtype=float)[..., None], out.shape[:-1] + (1,))
        out = np.concatenate([out, t], axis=-1)
    return out


def embed_path(model, path):
    """Embedded view of a path (identity map when no embedding is configured)."""
    return PiecewisePath(path.times, embed_values(model, path.values, path.times))


@dataclass(frozen=True)
class DrivenInterval:
    """One coarse interval with its normalizing duration and log-signature."""

    start: float
    end: float
    logsig: np.ndarray

    def __post_init__(self):
        if not self.end > self.start:
            raise ValueError("interval duration must be positive")

    @property
    def duration(self):
        return self.end - self.start


def interval_features(model, embedded_path, grid):
    """Per-coarse-interval log-signatures of an (already embedded) fine path."""
    values = embedded_path.values
    if values.shape[-1] != model.feature_dim:
        raise ValueError("expected a path of the model's embedded dimension")
    if len(embedded_path.times) != grid.n_fine + 1:
        raise ValueError("path does not live on the fine grid")
    incs = np.diff(values, axis=0).reshape(grid.coarse_steps, grid.refine, model.feature_dim)
    sigs = logsig_from_increments(incs, model.depth)
    times = grid.coarse_times()
    return [DrivenInterval(times[i], times[i + 1], sigs[i]) for i in range(grid.coarse_steps)]


@dataclass
class PathFeatures:
    """Batched driving data for the hidden ODE (one shared coarse grid)."""

    logsigs: np.ndarray        # (batch, J, n_features)
    durations: np.ndarray      # (J,)
    x0: np.ndarray             # (batch, dim) raw initial values
    t0: float
    raw_increments: np.ndarray  # (batch, J, refine, dim), for embedding gradients

    @property
    def batch_size(self):
        return self.logsigs.shape[0]

    @property
    def n_intervals(self):
        return self.logsigs.shape[1]


def compute_features(model, values, grid):
    """Features of a batch of raw fine-grid paths, shape (batch, n_fine+1, dim)."""
    values = np.asarray(values, dtype=float)
    if values.ndim != 3:
        raise ValueError("expected a batch of paths (batch, n+1, dim)")
    b = values.shape[0]
    emb = embed_values(model, values, grid.fine_times())
    emb_incs = np.diff(emb, axis=1).reshape(b, grid.coarse_steps, grid.refine, model.feature_dim)
    sigs = logsig_from_increments(emb_incs, model.depth)
    raw_incs = np.diff(values, axis=1).reshape(b, grid.coarse_steps, grid.refine, model.dim)
    return PathFeatures(
        logsigs=sigs,
        durations=np.diff(grid.coarse_times()),
        x0=values[:, 0],
        t0=0.0,
        raw_increments=raw_incs,
    )


# --------------------------------------------------------------------------- #
# ODE stepping                                                                #
# --------------------------------------------------------------------------- #


def _velocity(model, z, v):
    # forward_trace skips the finite-input check: divergence is detected per
    # sub-step by the caller, which can name the interval
    b, h = z.shape
    g = net.forward_trace(model.field, z)[0].reshape(b, h, model.n_features)
    return np.einsum("bhk,bk->bh", g, v)


def _velocity_traced(model, z, v):
    b, h = z.shape
    out, acts = net.forward_trace(model.field, z)
    g = out.reshape(b, h, model.n_features)
    return np.einsum("bhk,bk->bh", g, v), (acts, g)


def _velocity_vjp(model, trace, v, cot):
    acts, g = trace
    b, h = cot.shape
    cot_g = np.einsum("bh,bk->bhk", cot, v).reshape(b, h * model.n_features)
    cot_z, field_grads = net.vjp_trace(model.field, acts, cot_g)
    cot_v = np.einsum("bhk,bh->bk", g, cot)
    return cot_z, field_grads, cot_v


def _step(model, z, v, dt):
    if model.solver == "euler":
        return z + dt * _velocity(model, z, v)
    if model.solver == "midpoint":
        k1 = _velocity(model, z, v)
        return z + dt * _velocity(model, z + 0.5 * dt * k1, v)
    k1 = _velocity(model, z, v)
    k2 = _velocity(model, z + 0.5 * dt * k1, v)
    k3 = _velocity(model, z + 0.5 * dt * k2, v)
    k4 = _velocity(model, z + dt * k3, v)
    return z + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def _step_traced(model, z, v, dt):
    """Step once, keeping the per-stage inputs and field traces for the pullback."""
    if model.solver == "euler":
        k1, tr1 = _velocity_traced(model, z, v)
        return z + dt * k1, (tr1,)
    if model.solver == "midpoint":
        k1, tr1 = _velocity_traced(model, z, v)
        zm = z + 0.5 * dt * k1
        k2, tr2 = _velocity_traced(model, zm, v)
        return z + dt * k2, (tr1, tr2)
    k1, tr1 = _velocity_traced(model, z, v)
    k2, tr2 = _velocity_traced(model, z + 0.5 * dt * k1, v)
    k3, tr3 = _velocity_traced(model, z + 0.5 * dt * k2, v)
    k4, tr4 = _velocity_traced(model, z + dt * k3, v)
    return z + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4), (tr1, tr2, tr3, tr4)


def _step_vjp(model, traces, v, dt, cot, field_grads, cot_v):
    """Exact pullback of one solver step.

    ``field_grads`` and ``cot_v`` are accumulated in place; returns the
    cotangent with respect to the step's input state.
    """
    if model.solver == "euler":
        (tr1,) = traces
        cz, fg, cv = _velocity_vjp(model, tr1, v, dt * cot)
        net.add_grads(field_grads, fg)
        cot_v += cv
        return cot + cz
    if model.solver == "midpoint":
        tr1, tr2 = traces
        czm, fg2, cv2 = _velocity_vjp(model, tr2, v, dt * cot)
        cz1, fg1, cv1 = _velocity_vjp(model, tr1, v, 0.5 * dt * czm)
        net.add_grads(field_grads, fg2)
        net.add_grads(field_grads, fg1)
        cot_v += cv1 + cv2
        return cot + czm + cz1
    tr1, tr2, tr3, tr4 = traces
    ck4 = dt / 6.0 * cot
    ck3 = dt / 3.0 * cot
    ck2 = dt / 3.0 * cot
    ck1 = dt / 6.0 * cot
    out = cot.copy()
    cz4, fg4, cv4 = _velocity_vjp(model, tr4, v, ck4)
    out += cz4
    ck3 = ck3 + dt * cz4
    cz3, fg3, cv3 = _velocity_vjp(model, tr3, v, ck3)
    out += cz3
    ck2 = ck2 + 0.5 * dt * cz3
    cz2, fg2, cv2 = _velocity_vjp(model, tr2, v, ck2)
    out += cz2
    ck1 = ck1 + 0.5 * dt * cz2
    cz1, fg1, cv1 = _velocity_vjp(model, tr1, v, ck1)
    out += cz1
    for fg in (fg4, fg3, fg2, fg1):
        net.add_grads(field_grads, fg)
    cot_v += cv1 + cv2 + cv3 + cv4
    return out


# --------------------------------------------------------------------------- #
# Forward pass                                                                #
# --------------------------------------------------------------------------- #


def initial_state(model, x0, t0=0.0):
    """Hidden state at the left endpoint: initial layer on the embedded start."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    e0 = embed_values(model, x0, np.full(x0.shape[0], t0))
    return net.forward(model.xi, e0)


def hidden_nodes(model, feats):
    """Hidden states at every coarse node for batched features, (B, J+1, h)."""
    b = feats.batch_size
    z = initial_state(model, feats.x0, feats.t0)
    nodes = np.empty((b, feats.n_intervals + 1, model.hidden_dim))
    nodes[:, 0] = z
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(feats.n_intervals):
            v = feats.logsigs[:, i] / feats.durations[i]
            dt = feats.durations[i] / model.ode_steps
            for _ in range(model.ode_steps):
                z = _step(model, z, v, dt)
                if not np.all(np.isfinite(z)):
                    raise FloatingPointError(f"hidden state diverged in interval {i}")
            nodes[:, i + 1] = z
    return nodes


def forward_hidden(model, intervals, x0):
    """Hidden states along one path given its driven intervals, (J+1, h)."""
    for a, b in zip(intervals[:-1], intervals[1:]):
        if not np.isclose(a.end, b.start, atol=1e-12):
            raise ValueError("intervals must be contiguous")
    feats = PathFeatures(
        logsigs=np.stack([iv.logsig for iv in intervals])[None],
        durations=np.array([iv.duration for iv in intervals]),
        x0=np.atleast_2d(np.asarray(x0, dtype=float)),
        t0=float(intervals[0].start),
        raw_increments=np.zeros((1, len(intervals), 0, model.dim)),
    )
    return hidden_nodes(model, feats)[0]


@dataclass
class Prediction:
    """Readout values at the coarse nodes."""

    u: np.ndarray          # (batch, J+1) or (J+1,)
    dx: object             # matching derivative head output, or None
    z_nodes: np.ndarray


def predict_batch(model, values, grid):
    feats = compute_features(model, values, grid)
    nodes = hidden_nodes(model, feats)
    u = net.forward(model.readout_u, nodes)[..., 0]
    dx = None if model.readout_dx is None else net.forward(model.readout_dx, nodes)
    return Prediction(u=u, dx=dx, z_nodes=nodes)


def predict(model, path, grid):
    """Solution values (and optional derivative head) at every coarse node."""
    pred = predict_batch(model, path.values[None], grid)
    return Prediction(
        u=pred.u[0], dx=None if pred.dx is None else pred.dx[0], z_nodes=pred.z_nodes[0]
    )


# --------------------------------------------------------------------------- #
# Flat parameter vector                                                       #
# --------------------------------------------------------------------------- #


def flatten_params(model):
    parts = []
    if model.embed is not None:
        parts.append(model.embed.ravel())
    parts.append(net.flatten_params(model.xi))
    parts.append(net.flatten_params(model.field))
    parts.append(net.flatten_params(model.readout_u))
    if model.readout_dx is not None:
        parts.append(net.flatten_params(model.readout_dx))
    return np.concatenate(parts)


def set_params(model, vec):
    vec = np.asarray(vec, dtype=float)
    if len(vec) != model.n_params:
        raise ValueError(f"expected {model.n_params} parameters, got {len(vec)}")
    offset = 0
    if model.embed is not None:
        model.embed[...] = vec[: model.embed.size].reshape(model.embed.shape)
        offset += model.embed.size
    for mlp in filter(None, (model.xi, model.field, model.readout_u, model.readout_dx)):
        net.set_params(mlp, vec[offset : offset + mlp.n_params])
        offset += mlp.n_params


# --------------------------------------------------------------------------- #
# Checkpoints                                                                 #
# --------------------------------------------------------------------------- #

CHECKPOINT_VERSION = 1


def checkpoint_dict(model):
    return {
        "format_version": CHECKPOINT_VERSION,
        "dim": model.dim,
        "depth": model.depth,
        "embed_dim": model.embed_dim,
        "time_channel": model.time_channel,
        "xi_sizes": list(model.xi.sizes),
        "field_sizes": list(model.field.sizes),
        "with_dx_head": model.readout_dx is not None,
        "solver": model.solver,
        "ode_steps": model.ode_steps,
        "init_seed": model.init_seed,
        "params": [float(p) for p in flatten_params(model)],
    }


def save_checkpoint(model, fileobj):
    json.dump(checkpoint_dict(model), fileobj, indent=0, sort_keys=True)


def load_checkpoint(fileobj):
    doc = json.load(fileobj)
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('format_version')}")
    field_sizes = doc["field_sizes"]
    hidden = field_sizes[0]
    model = build_model(
        dim=doc["dim"],
        hidden_dim=hidden,
        field_width=field_sizes[1] if len(field_sizes) > 2 else hidden,
        field_layers=max(len(field_sizes) - 2, 0),
        depth=doc["depth"],
        solver=doc["solver"],
        ode_steps=doc["ode_steps"],
        embed_dim=doc["embed_dim"],
        time_channel=doc["time_channel"],
        with_dx_head=doc["with_dx_head"],
        seed=doc["init_seed"],
    )
    set_params(model, np.asarray(doc["params"], dtype=float))
    return model
