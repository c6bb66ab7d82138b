"""Minimal feed-forward networks with exact reverse-mode gradients, plus Adagrad.

Parameters flatten into a single vector in a fixed order: layer by layer,
row-major weight matrix first, then the bias.  Hidden layers use tanh, the
output layer is affine.
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class Mlp:
    """Fully connected network; ``weights[k]`` has shape (n_{k+1}, n_k)."""

    sizes: tuple
    weights: list
    biases: list

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @property
    def n_in(self):
        return self.sizes[0]

    @property
    def n_out(self):
        return self.sizes[-1]


def init_mlp(sizes, seed):
    """Deterministic init: weights uniform in +-sqrt(1/fan_in), biases zero."""
    if len(sizes) < 2 or any(n < 1 for n in sizes):
        raise ValueError("sizes must list at least input and output widths")
    rng = np.random.Generator(np.random.Philox(key=[int(seed) & ((1 << 64) - 1), 0]))
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(1.0 / n_in)
        weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return Mlp(tuple(sizes), weights, biases)


def forward(mlp, x):
    """Forward pass; ``x`` has shape (*batch, n_in)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != mlp.n_in:
        raise ValueError(f"input width {x.shape[-1]} != {mlp.n_in}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite network input")
    h = x
    last = len(mlp.weights) - 1
    for k, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        h = h @ w.T + b
        if k < last:
            h = np.tanh(h)
    return h


def forward_trace(mlp, x):
    """Forward pass retaining the per-layer activations needed by ``vjp_trace``."""
    x = np.asarray(x, dtype=float)
    acts = [x]
    h = x
    last = len(mlp.weights) - 1
    for k, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        h = h @ w.T + b
        if k < last:
            h = np.tanh(h)
        acts.append(h)
    return h, acts


def vjp_trace(mlp, acts, cot):
    """Pull an output cotangent back through traced activations.

    Returns ``(grad_x, grads)`` where grads is a list of (dW, db) pairs; batch
    axes are summed into the parameter gradients.
    """
    last = len(mlp.weights) - 1
    grads = [None] * len(mlp.weights)
    g = np.asarray(cot, dtype=float)
    for k in range(last, -1, -1):
        a_in = acts[k]
        if k < last:
            g = g * (1.0 - acts[k + 1] ** 2)  # tanh' from the stored activation
        flat_g = g.reshape(-1, g.shape[-1])
        flat_a = a_in.reshape(-1, a_in.shape[-1])
        grads[k] = (flat_g.T @ flat_a, flat_g.sum(axis=0))
        g = g @ mlp.weights[k]
    return g, grads


def vjp(mlp, x, cot):
    """Gradients of <cot, forward(x)> with respect to x and all parameters."""
    x = np.asarray(x, dtype=float)
    cot = np.asarray(cot, dtype=float)
    if cot.shape[-1] != mlp.n_out or cot.shape[:-1] != x.shape[:-1]:
        raise ValueError("cotangent shape does not match the output shape")
    _, acts = forward_trace(mlp, x)
    return vjp_trace(mlp, acts, cot)


def zero_grads(mlp):
    return [(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(mlp.weights, mlp.biases)]


def add_grads(acc, inc):
    for (aw, ab), (iw, ib) in zip(acc, inc):
        aw += iw
        ab += ib
    return acc


def flatten_params(mlp):
    parts = []
    for w, b in zip(mlp.weights, mlp.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


def set_params(mlp, vec):
    """Write a flat vector back into the layer arrays (inverse of flatten)."""
    offset = 0
    for w, b in zip(mlp.weights, mlp.biases):
        w[...] = vec[offset : offset + w.size].reshape(w.shape)
        offset += w.size
        b[...] = vec[offset : offset + b.size]
        offset += b.size
    if offset != len(vec):
        raise ValueError("parameter vector length mismatch")


def flatten_grads(mlp, grads):
    parts = []
    for dw, db in grads:
        parts.append(dw.ravel())
        parts.append(db)
    return np.concatenate(parts)


# --------------------------------------------------------------------------- #
# Adagrad                                                                     #
# --------------------------------------------------------------------------- #


class AdagradState:
    """Per-coordinate accumulator of squared gradients."""

    def __init__(self, n_params, lr=0.1, eps=1e-10):
        if lr <= 0 or eps <= 0:
            raise ValueError("lr and eps must be positive")
        self.lr = lr
        self.eps = eps
        self.acc = np.zeros(n_params)


def adagrad_step(state, params, grads):
    """One update: acc += g^2; p -= lr * g / (sqrt(acc) + eps)."""
    if params.shape != grads.shape or params.shape != state.acc.shape:
        raise ValueError("params, grads and accumulator must have equal length")
    state.acc += grads**2
    return params - state.lr * grads / (np.sqrt(state.acc) + state.eps)
