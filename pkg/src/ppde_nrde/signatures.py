"""Truncated tensor algebra and Lyndon-basis log-signatures of piecewise-linear paths.

A truncated tensor holds one dense coefficient block per degree k = 0..N,
block k listing its dim**k coefficients in lexicographic multi-index order.
Signatures of piecewise-linear paths are exact: each linear segment has the
closed-form signature exp(increment) and segments combine by Chen's product.

The private ``_*_blocks`` kernels operate on lists of arrays whose level-k
entry has shape ``(*batch, dim**k)``; the public types are the unbatched view.
Reverse-mode (`*_vjp`) variants exist for the kernels that sit on the
gradient path of a trainable embedding layer.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .lyndon import lyndon_basis

__all__ = [
    "beta",
    "TruncatedTensor",
    "LogSignature",
    "PiecewisePath",
    "NonLieElementError",
    "segment_signature",
    "tensor_mul",
    "tensor_log",
    "tensor_exp",
    "path_signature",
    "project_lyndon",
    "lyndon_to_tensor",
    "logsig",
    "lyndon_labels",
    "logsig_from_increments",
    "logsig_from_increments_vjp",
]


# --------------------------------------------------------------------------- #
# Dimension count                                                             #
# --------------------------------------------------------------------------- #


def _mobius(n):
    if n == 1:
        return 1
    result = 1
    k = 0
    p = 2
    while p * p <= n:
        if n % p == 0:
            n //= p
            if n % p == 0:
                return 0  # square factor
            k += 1
        p += 1
    if n > 1:
        k += 1
    return (-1) ** k


def beta(dim, depth):
    """Number of Lyndon words of length 1..depth over a dim-letter alphabet.

    This is the dimension of the depth-``depth`` truncated log-signature of a
    ``dim``-dimensional path (necklace-counting sum over the Mobius function).
    Exact integer arithmetic throughout, so no overflow is possible.
    """
    if dim < 1 or depth < 1:
        raise ValueError("beta requires dim >= 1 and depth >= 1")
    total = 0
    for k in range(1, depth + 1):
        acc = 0
        for i in range(1, k + 1):
            if k % i == 0:
                acc += _mobius(k // i) * dim**i
        q, r = divmod(acc, k)
        if r:
            raise ArithmeticError(f"necklace sum {acc} not divisible by {k}")
        total += q
    return total


# --------------------------------------------------------------------------- #
# Batched block kernels                                                       #
# --------------------------------------------------------------------------- #


def _one_blocks(dim, depth, batch_shape=()):
    blocks = [np.ones(batch_shape + (1,))]
    for k in range(1, depth + 1):
        blocks.append(np.zeros(batch_shape + (dim**k,)))
    return blocks


def _zero_like(blocks):
    return [np.zeros_like(b) for b in blocks]


def _mul_blocks(a, b, dim):
    """Degree-truncated tensor product: out_k = sum_{p+q=k} a_p (x) b_q."""
    depth = len(a) - 1
    batch = a[1].shape[:-1] if depth >= 1 else a[0].shape[:-1]
    out = []
    for k in range(depth + 1):
        acc = np.zeros(batch + (dim**k,))
        for p in range(k + 1):
            q = k - p
            term = np.einsum("...i,...j->...ij", a[p], b[q])
            acc += term.reshape(batch + (dim**k,))
        out.append(acc)
    return out


def _mul_blocks_vjp(a, b, cot, dim):
    """Cotangents of ``_mul_blocks`` with respect to both factors."""
    depth = len(a) - 1
    batch = cot[0].shape[:-1]
    ca = _zero_like(a)
    cb = _zero_like(b)
    for k in range(depth + 1):
        for p in range(k + 1):
            q = k - p
            c = cot[k].reshape(batch + (dim**p, dim**q))
            ca[p] += np.einsum("...ij,...j->...i", c, b[q])
            cb[q] += np.einsum("...ij,...i->...j", c, a[p])
    return ca, cb


def _seg_blocks(increment, depth, dim):
    """Signature blocks of one linear segment: level k = increment^(x)k / k!."""
    batch = increment.shape[:-1]
    blocks = [np.ones(batch + (1,)), increment.astype(float, copy=True)]
    for k in range(2, depth + 1):
        prev = blocks[k - 1]
        nxt = np.einsum("...i,...j->...ij", prev, increment) / k
        blocks.append(nxt.reshape(batch + (dim**k,)))
    return blocks


def _seg_blocks_vjp(increment, depth, dim, cot):
    """Cotangent of ``_seg_blocks`` with respect to the increment."""
    blocks = _seg_blocks(increment, depth, dim)
    batch = increment.shape[:-1]
    grad = np.zeros_like(increment, dtype=float)
    carry = [c.copy() for c in cot]
    for k in range(depth, 1, -1):
        c = carry[k].reshape(batch + (dim ** (k - 1), dim)) / k
        grad += np.einsum("...ij,...i->...j", c, blocks[k - 1])
        carry[k - 1] += np.einsum("...ij,...j->...i", c, increment)
    if depth >= 1:
        grad += carry[1]
    return grad


def _log_blocks(x, dim):
    """Truncated tensor logarithm: log(x) = sum_n (-1)^(n-1)/n (x-1)^(x)n."""
    depth = len(x) - 1
    y = [np.zeros_like(x[0])] + [lvl.astype(float, copy=True) for lvl in x[1:]]
    acc = [lvl.copy() for lvl in y]
    power = y
    for n in range(2, depth + 1):
        power = _mul_blocks(power, y, dim)
        coef = (-1.0) ** (n - 1) / n
        for k in range(depth + 1):
            acc[k] += coef * power[k]
    acc[0] = np.zeros_like(x[0])
    return acc


def _log_blocks_vjp(x, dim, cot):
    """Cotangent of ``_log_blocks`` with respect to x (degree-0 slot is fixed)."""
    depth = len(x) - 1
    y = [np.zeros_like(x[0])] + [lvl.astype(float, copy=True) for lvl in x[1:]]
    powers = [None, y]
    for n in range(2, depth + 1):
        powers.append(_mul_blocks(powers[n - 1], y, dim))
    cy = _zero_like(y)
    carry = None
    for n in range(depth, 1, -1):
        coef = (-1.0) ** (n - 1) / n
        c_n = [coef * c for c in cot]
        if carry is not None:
            c_n = [u + v for u, v in zip(c_n, carry)]
        carry, cy_inc = _mul_blocks_vjp(powers[n - 1], y, c_n, dim)
        cy = [u + v for u, v in zip(cy, cy_inc)]
    c_1 = [c.copy() for c in cot]
    if carry is not None:
        c_1 = [u + v for u, v in zip(c_1, carry)]
    cy = [u + v for u, v in zip(cy, c_1)]
    cy[0] = np.zeros_like(x[0])
    return cy


def _exp_blocks(x, dim):
    """Truncated tensor exponential of a degree-0-free element."""
    depth = len(x) - 1
    out = _one_blocks(dim, depth, x[0].shape[:-1])
    power = None
    coef = 1.0
    for n in range(1, depth + 1):
        power = x if n == 1 else _mul_blocks(power, x, dim)
        coef /= n
        for k in range(depth + 1):
            out[k] = out[k] + coef * power[k]
    return out


def _chen_blocks(segments, dim, keep_prefixes=False):
    """Fold segment signatures left to right; optionally keep the prefixes."""
    acc = segments[0]
    prefixes = [acc]
    for seg in segments[1:]:
        acc = _mul_blocks(acc, seg, dim)
        if keep_prefixes:
            prefixes.append(acc)
    return (acc, prefixes) if keep_prefixes else acc


def _project_blocks(lie, dim, depth):
    """Lyndon coefficients of Lie blocks, concatenated over degrees 1..depth."""
    basis = lyndon_basis(dim, depth)
    parts = [lie[k] @ basis.projectors[k].T for k in range(1, depth + 1)]
    return np.concatenate(parts, axis=-1)


def _project_blocks_vjp(cot, dim, depth, batch_shape):
    """Pull coefficient cotangents back to Lie-block cotangents."""
    basis = lyndon_basis(dim, depth)
    out = [np.zeros(batch_shape + (1,))]
    offset = 0
    for k in range(1, depth + 1):
        m = basis.projectors[k].shape[0]
        out.append(cot[..., offset : offset + m] @ basis.projectors[k])
        offset += m
    return out


# --------------------------------------------------------------------------- #
# Public value types                                                          #
# --------------------------------------------------------------------------- #


class NonLieElementError(ValueError):
    """Raised when a tensor fails the Lie-element residual check.

    Carries the offending relative residual norm as ``residual``.
    """

    def __init__(self, residual):
        self.residual = residual
        super().__init__(
            f"tensor is not a Lie element: relative projection residual {residual:.3e}"
        )


@dataclass(frozen=True)
class TruncatedTensor:
    """Element of the tensor algebra truncated at ``depth``."""

    dim: int
    depth: int
    levels: tuple

    def __post_init__(self):
        if len(self.levels) != self.depth + 1:
            raise ValueError("need one block per degree 0..depth")
        for k, lvl in enumerate(self.levels):
            if lvl.shape != (self.dim**k,):
                raise ValueError(f"degree-{k} block must have {self.dim ** k} entries")

    @classmethod
    def identity(cls, dim, depth):
        return cls(dim, depth, tuple(_one_blocks(dim, depth)))

    @classmethod
    def from_blocks(cls, blocks, dim):
        return cls(dim, len(blocks) - 1, tuple(np.asarray(b, dtype=float) for b in blocks))

    def as_vector(self):
        """All blocks concatenated, degree 0 first."""
        return np.concatenate(self.levels)

    def scalar(self):
        return float(self.levels[0][0])


@dataclass(frozen=True)
class LogSignature:
    """Log-signature coefficients in the Lyndon-word basis.

    Coordinates follow the word order of :func:`lyndon.lyndon_words`
    (by length, then lexicographic); the identically-zero degree-0 constant
    is not stored, so ``len(coeffs) == beta(dim, depth)``.
    """

    dim: int
    depth: int
    coeffs: np.ndarray

    def __post_init__(self):
        expected = beta(self.dim, self.depth)
        if self.coeffs.shape != (expected,):
            raise ValueError(
                f"log-signature of dim={self.dim} depth={self.depth} "
                f"needs {expected} coefficients, got {self.coeffs.shape}"
            )


class PiecewisePath:
    """A d-dimensional path observed on a strictly increasing time grid.

    Values are interpolated linearly between samples, which is the regime in
    which all signature computations here are exact.
    """

    def __init__(self, times, values):
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if times.ndim != 1 or values.ndim != 2 or len(times) != len(values):
            raise ValueError("times must be (n+1,) and values (n+1, d)")
        if len(times) < 2:
            raise ValueError("path needs >= 2 samples")
        if not np.all(np.diff(times) > 0):
            raise ValueError("times must be strictly increasing")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(values))):
            raise ValueError("path contains non-finite entries")
        self.times = times
        self.values = values

    @property
    def dim(self):
        return self.values.shape[1]

    @property
    def n_segments(self):
        return len(self.times) - 1

    def increments(self):
        return np.diff(self.values, axis=0)

    def reversed(self):
        span = self.times[0] + self.times[-1]
        return PiecewisePath(span - self.times[::-1], self.values[::-1])

    def __len__(self):
        return len(self.times)


# --------------------------------------------------------------------------- #
# Public operations                                                           #
# --------------------------------------------------------------------------- #


def segment_signature(increment, depth):
    """Signature of one linear segment: degree-k block is increment^(x)k / k!."""
    increment = np.asarray(increment, dtype=float)
    if increment.ndim != 1:
        raise ValueError("increment must be a vector")
    if not np.all(np.isfinite(increment)):
        raise ValueError("increment must be finite")
    dim = increment.shape[0]
    return TruncatedTensor.from_blocks(_seg_blocks(increment, depth, dim), dim)


def tensor_mul(a, b):
    """Truncated tensor product of two tensors with matching dim and depth."""
    if a.dim != b.dim or a.depth != b.depth:
        raise ValueError("tensor_mul requires matching dim and depth")
    return TruncatedTensor.from_blocks(_mul_blocks(list(a.levels), list(b.levels), a.dim), a.dim)


def path_signature(path, depth):
    """Chen product of the segment signatures of a piecewise-linear path."""
    incs = path.increments()
    segs = [_seg_blocks(incs[s], depth, path.dim) for s in range(len(incs))]
    return TruncatedTensor.from_blocks(_chen_blocks(segs, path.dim), path.dim)


def tensor_log(x):
    """Truncated tensor logarithm; requires degree-0 coefficient exactly 1."""
    if x.levels[0][0] != 1.0:
        raise ValueError("tensor_log requires a group-like input (degree-0 == 1)")
    return TruncatedTensor.from_blocks(_log_blocks(list(x.levels), x.dim), x.dim)


def tensor_exp(x):
    """Truncated tensor exponential; requires degree-0 coefficient exactly 0."""
    if x.levels[0][0] != 0.0:
        raise ValueError("tensor_exp requires a degree-0-free input")
    return TruncatedTensor.from_blocks(_exp_blocks(list(x.levels), x.dim), x.dim)


def project_lyndon(lie, tol=1e-9):
    """Coefficients of a Lie element in the Lyndon bracket basis.

    The input must reconstruct from the computed coefficients to relative
    residual ``tol``; otherwise :class:`NonLieElementError` is raised.
    """
    if abs(lie.levels[0][0]) > tol:
        raise NonLieElementError(abs(lie.levels[0][0]))
    blocks = list(lie.levels)
    coeffs = _project_blocks(blocks, lie.dim, lie.depth)
    basis = lyndon_basis(lie.dim, lie.depth)
    offset = 0
    sq_res = 0.0
    sq_in = 0.0
    for k in range(1, lie.depth + 1):
        m = basis.expansions[k].shape[1]
        recon = basis.expansions[k] @ coeffs[offset : offset + m]
        sq_res += float(np.sum((recon - blocks[k]) ** 2))
        sq_in += float(np.sum(blocks[k] ** 2))
        offset += m
    rel = np.sqrt(sq_res) / max(np.sqrt(sq_in), 1e-300)
    if sq_in > 0 and rel > tol:
        raise NonLieElementError(rel)
    return LogSignature(lie.dim, lie.depth, coeffs)


def lyndon_to_tensor(ls):
    """Expand Lyndon coefficients back into dense tensor blocks (inverse of projection)."""
    basis = lyndon_basis(ls.dim, ls.depth)
    blocks = [np.zeros(1)]
    offset = 0
    for k in range(1, ls.depth + 1):
        m = basis.expansions[k].shape[1]
        blocks.append(basis.expansions[k] @ ls.coeffs[offset : offset + m])
        offset += m
    return TruncatedTensor.from_blocks(blocks, ls.dim)


def logsig(path, depth):
    """Log-signature of a piecewise-linear path in the Lyndon basis."""
    return project_lyndon(tensor_log(path_signature(path, depth)))


def lyndon_labels(dim, depth):
    """Bracket labels for each log-signature coordinate, e.g. ``['1', '2', '[1,2]']``."""
    return lyndon_basis(dim, depth).labels()


# --------------------------------------------------------------------------- #
# Batched fast path (used by the model's feature layer)                       #
# --------------------------------------------------------------------------- #


def logsig_from_increments(increments, depth):
    """Log-signature coefficients from segment increments, batched.

    ``increments`` has shape ``(*batch, n_segments, dim)``; the result has
    shape ``(*batch, beta(dim, depth))``.  No Lie residual check is performed:
    the composition exp/Chen/log lands in the Lie subspace by construction.
    """
    increments = np.asarray(increments, dtype=float)
    dim = increments.shape[-1]
    n_seg = increments.shape[-2]
    segs = [_seg_blocks(increments[..., s, :], depth, dim) for s in range(n_seg)]
    sig = _chen_blocks(segs, dim)
    lie = _log_blocks(sig, dim)
    return _project_blocks(lie, dim, depth)


def logsig_from_increments_vjp(increments, depth, cot):
    """Cotangent of :func:`logsig_from_increments` w.r.t. the increments."""
    increments = np.asarray(increments, dtype=float)
    dim = increments.shape[-1]
    n_seg = increments.shape[-2]
    batch = increments.shape[:-2]
    segs = [_seg_blocks(increments[..., s, :], depth, dim) for s in range(n_seg)]
    sig, prefixes = _chen_blocks(segs, dim, keep_prefixes=True)
    lie_cot = _project_blocks_vjp(cot, dim, depth, batch)
    sig_cot = _log_blocks_vjp(sig, dim, lie_cot)
    grad = np.zeros_like(increments)
    for s in range(n_seg - 1, 0, -1):
        sig_cot, seg_cot = _mul_blocks_vjp(prefixes[s - 1], segs[s], sig_cot, dim)
        grad[..., s, :] = _seg_blocks_vjp(increments[..., s, :], depth, dim, seg_cot)
    grad[..., 0, :] = _seg_blocks_vjp(increments[..., 0, :], depth, dim, sig_cot)
    return grad
