"""Parameter gradients of losses over the hidden-ODE readouts.

Two routes compute the same exact gradient of the discretized system:

* :func:`adjoint_grad` sweeps the costate backward one coarse interval at a
  time, re-running that interval's forward sub-steps from the stored node
  state.  Memory stays bounded by (hidden state + parameters + one interval),
  independent of how many intervals the path has.
* :func:`backprop_grad` records the entire unrolled solver as a tape of
  primitive operations and replays it in reverse.  Memory grows with the
  total number of sub-steps; it exists as a cross-check for the first route.

Readout cotangents enter the costate as jumps at the coarse nodes.  Because
the backward sweep transposes the exact discrete forward steps, both routes
agree with finite differences of the implemented forward pass to rounding
error, for every solver.
"""

import numpy as np

from . import net
from .nrde import (
    _step_traced,
    _step_vjp,
    _velocity_vjp,
    _velocity_traced,
    compute_features,
    embed_values,
    hidden_nodes,
)
from .signatures import logsig_from_increments_vjp


def _readout_pullback(model, z_nodes, cot_u, cot_dx):
    """Node-state cotangents plus gradients of the readout heads."""
    cot_u = np.asarray(cot_u, dtype=float)
    if cot_u.shape != z_nodes.shape[:-1]:
        raise ValueError("cot_u must match (batch, n_nodes)")
    node_cot, u_grads = net.vjp(model.readout_u, z_nodes, cot_u[..., None])
    dx_grads = None
    if cot_dx is not None and model.readout_dx is None:
        raise ValueError("derivative cotangents given but the model has no derivative head")
    if model.readout_dx is not None:
        if cot_dx is None:
            cot_dx = np.zeros(z_nodes.shape[:-1] + (model.dim,))
        inc, dx_grads = net.vjp(model.readout_dx, z_nodes, np.asarray(cot_dx, dtype=float))
        node_cot = node_cot + inc
    return node_cot, u_grads, dx_grads


def _initial_and_embedding_grads(model, feats, lam, cot_w):
    """Close the sweep: through the initial layer and the embedding map."""
    b = feats.batch_size
    e0 = embed_values(model, feats.x0, np.full(b, feats.t0))
    cot_e0, xi_grads = net.vjp(model.xi, e0, lam)
    embed_grad = None
    if model.embed is not None:
        d1 = model.embed.shape[0]
        refine = feats.raw_increments.shape[2]
        emb_incs = feats.raw_increments @ model.embed.T
        if model.time_channel:
            dt_fine = (feats.durations / refine)[None, :, None, None]
            t_incs = np.broadcast_to(dt_fine, emb_incs.shape[:-1] + (1,))
            emb_incs = np.concatenate([emb_incs, t_incs], axis=-1)
        inc_grads = logsig_from_increments_vjp(emb_incs, model.depth, cot_w)
        embed_grad = np.einsum("bjks,bjkd->sd", inc_grads[..., :d1], feats.raw_increments)
        embed_grad += np.einsum("bs,bd->sd", cot_e0[..., :d1], feats.x0)
    return embed_grad, xi_grads


def _grads_to_vec(model, embed_grad, xi_grads, field_grads, u_grads, dx_grads):
    parts = []
    if model.embed is not None:
        parts.append(embed_grad.ravel())
    parts.append(net.flatten_grads(model.xi, xi_grads))
    parts.append(net.flatten_grads(model.field, field_grads))
    parts.append(net.flatten_grads(model.readout_u, u_grads))
    if model.readout_dx is not None:
        parts.append(net.flatten_grads(model.readout_dx, dx_grads))
    return np.concatenate(parts)


def adjoint_grad(model, feats, cot_u, cot_dx=None, z_nodes=None):
    """Full parameter gradient via the backward costate sweep.

    ``feats`` are the driving features of a batch of paths; ``cot_u`` (and
    optionally ``cot_dx``) are loss cotangents at every coarse node.  The
    forward node states are recomputed unless supplied.
    """
    if z_nodes is None:
        z_nodes = hidden_nodes(model, feats)
    n_int = feats.n_intervals
    if z_nodes.shape[1] != n_int + 1:
        raise ValueError("node states do not match the feature grid")
    node_cot, u_grads, dx_grads = _readout_pullback(model, z_nodes, cot_u, cot_dx)
    field_grads = net.zero_grads(model.field)
    cot_w = np.zeros_like(feats.logsigs)
    lam = node_cot[:, n_int].copy()
    for i in reversed(range(n_int)):
        v = feats.logsigs[:, i] / feats.durations[i]
        dt = feats.durations[i] / model.ode_steps
        z = z_nodes[:, i]
        traces = []
        for _ in range(model.ode_steps):
            z, tr = _step_traced(model, z, v, dt)
            traces.append(tr)
        cot_v = np.zeros_like(v)
        for tr in reversed(traces):
            lam = _step_vjp(model, tr, v, dt, lam, field_grads, cot_v)
        cot_w[:, i] = cot_v / feats.durations[i]
        lam = lam + node_cot[:, i]
    embed_grad, xi_grads = _initial_and_embedding_grads(model, feats, lam, cot_w)
    return _grads_to_vec(model, embed_grad, xi_grads, field_grads, u_grads, dx_grads)


# --------------------------------------------------------------------------- #
# Unrolled tape (verification route)                                          #
# --------------------------------------------------------------------------- #


class _Tape:
    """Linear record of the unrolled solver: velocity evaluations and axpys."""

    def __init__(self):
        self.ops = []
        self.values = []

    def source(self, value):
        self.values.append(value)
        self.ops.append(("src", len(self.values) - 1, None, None))
        return len(self.values) - 1

    def vel(self, model, src, v_idx, v):
        out, trace = _velocity_traced(model, self.values[src], v)
        self.values.append(out)
        self.ops.append(("vel", len(self.values) - 1, src, (v_idx, trace)))
        return len(self.values) - 1

    def lin(self, terms):
        acc = sum(c * self.values[idx] for idx, c in terms)
        self.values.append(acc)
        self.ops.append(("lin", len(self.values) - 1, None, tuple(terms)))
        return len(self.values) - 1


def _record_step(tape, model, z_reg, v_idx, v, dt):
    if model.solver == "euler":
        k1 = tape.vel(model, z_reg, v_idx, v)
        return tape.lin([(z_reg, 1.0), (k1, dt)])
    if model.solver == "midpoint":
        k1 = tape.vel(model, z_reg, v_idx, v)
        mid = tape.lin([(z_reg, 1.0), (k1, 0.5 * dt)])
        k2 = tape.vel(model, mid, v_idx, v)
        return tape.lin([(z_reg, 1.0), (k2, dt)])
    k1 = tape.vel(model, z_reg, v_idx, v)
    a2 = tape.lin([(z_reg, 1.0), (k1, 0.5 * dt)])
    k2 = tape.vel(model, a2, v_idx, v)
    a3 = tape.lin([(z_reg, 1.0), (k2, 0.5 * dt)])
    k3 = tape.vel(model, a3, v_idx, v)
    a4 = tape.lin([(z_reg, 1.0), (k3, dt)])
    k4 = tape.vel(model, a4, v_idx, v)
    return tape.lin(
        [(z_reg, 1.0), (k1, dt / 6), (k2, dt / 3), (k3, dt / 3), (k4, dt / 6)]
    )


def backprop_grad(model, feats, cot_u, cot_dx=None):
    """Same gradient as :func:`adjoint_grad`, via a stored unrolled tape."""
    b = feats.batch_size
    n_int = feats.n_intervals
    e0 = embed_values(model, feats.x0, np.full(b, feats.t0))
    z0, xi_acts = net.forward_trace(model.xi, e0)
    tape = _Tape()
    z_reg = tape.source(z0)
    node_regs = [z_reg]
    velocities = []
    for i in range(n_int):
        v = feats.logsigs[:, i] / feats.durations[i]
        velocities.append(v)
        dt = feats.durations[i] / model.ode_steps
        for _ in range(model.ode_steps):
            z_reg = _record_step(tape, model, z_reg, i, v, dt)
        node_regs.append(z_reg)
    z_nodes = np.stack([tape.values[r] for r in node_regs], axis=1)
    node_cot, u_grads, dx_grads = _readout_pullback(model, z_nodes, cot_u, cot_dx)

    cots = [None] * len(tape.values)

    def bump(idx, value):
        cots[idx] = value if cots[idx] is None else cots[idx] + value

    for i, reg in enumerate(node_regs):
        bump(reg, node_cot[:, i])
    field_grads = net.zero_grads(model.field)
    cot_v = [np.zeros_like(v) for v in velocities]
    for kind, out, src, extra in reversed(tape.ops):
        if cots[out] is None:
            continue
        if kind == "vel":
            v_idx, trace = extra
            cz, fg, cv = _velocity_vjp(model, trace, velocities[v_idx], cots[out])
            bump(src, cz)
            net.add_grads(field_grads, fg)
            cot_v[v_idx] += cv
        elif kind == "lin":
            for idx, coeff in extra:
                bump(idx, coeff * cots[out])
    lam = cots[node_regs[0]]
    cot_w = np.stack([cv / dur for cv, dur in zip(cot_v, feats.durations)], axis=1)
    cot_e0, xi_grads = net.vjp_trace(model.xi, xi_acts, lam)
    embed_grad = None
    if model.embed is not None:
        d1 = model.embed.shape[0]
        refine = feats.raw_increments.shape[2]
        emb_incs = feats.raw_increments @ model.embed.T
        if model.time_channel:
            dt_fine = (feats.durations / refine)[None, :, None, None]
            t_incs = np.broadcast_to(dt_fine, emb_incs.shape[:-1] + (1,))
            emb_incs = np.concatenate([emb_incs, t_incs], axis=-1)
        inc_grads = logsig_from_increments_vjp(emb_incs, model.depth, cot_w)
        embed_grad = np.einsum("bjks,bjkd->sd", inc_grads[..., :d1], feats.raw_increments)
        embed_grad += np.einsum("bs,bd->sd", cot_e0[..., :d1], feats.x0)
    return _grads_to_vec(model, embed_grad, xi_grads, field_grads, u_grads, dx_grads)


def grad_for_paths(model, values, grid, cot_u, cot_dx=None, method="adjoint"):
    """Convenience wrapper: features + gradient for a batch of raw paths."""
    feats = compute_features(model, values, grid)
    fn = adjoint_grad if method == "adjoint" else backprop_grad
    return fn(model, feats, cot_u, cot_dx)
