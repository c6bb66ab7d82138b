"""Lyndon words, standard bracketings, and their tensor-algebra expansions.

Lyndon words over the alphabet {0, ..., dim-1} index a basis of the free Lie
algebra.  Words are ordered by length first, then lexicographically, which
fixes the coordinate order of every log-signature produced by this package.
"""

from functools import lru_cache

import numpy as np


def lyndon_words(dim, depth):
    """All Lyndon words with letters in {0..dim-1} and length <= depth.

    Returned as a tuple of tuples, sorted by (length, lexicographic).
    Generation is Duval's algorithm.
    """
    if dim < 1 or depth < 1:
        raise ValueError("dim and depth must be >= 1")
    words = []
    w = [-1]
    while w:
        w[-1] += 1
        m = len(w)
        if m <= depth:
            words.append(tuple(w))
        while len(w) < depth:
            w.append(w[-m])
        while w and w[-1] == dim - 1:
            w.pop()
    words.sort(key=lambda u: (len(u), u))
    return tuple(words)


def is_lyndon(word):
    """A word is Lyndon iff it is strictly smaller than all its proper suffixes."""
    return all(word < word[i:] for i in range(1, len(word)))


def standard_factorization(word):
    """Split w = u + v where v is the longest proper Lyndon suffix.

    Both factors of a Lyndon word are again Lyndon, so the split defines a
    bracketing tree recursively.
    """
    if len(word) < 2:
        raise ValueError("factorization needs a word of length >= 2")
    for i in range(1, len(word)):
        if is_lyndon(word[i:]):
            return word[:i], word[i:]
    raise ValueError(f"{word!r} is not a Lyndon word")


def bracket(word):
    """Bracketing tree of a Lyndon word: ints at leaves, pairs at inner nodes."""
    if len(word) == 1:
        return word[0]
    u, v = standard_factorization(word)
    return (bracket(u), bracket(v))


def bracket_label(word):
    """Human-readable bracket string with 1-based letters, e.g. ``[1,[1,2]]``."""

    def fmt(node):
        if isinstance(node, int):
            return str(node + 1)
        return f"[{fmt(node[0])},{fmt(node[1])}]"

    return fmt(bracket(word))


def _expand(node, dim):
    """Dense coefficient vector of a bracket tree inside its tensor degree."""
    if isinstance(node, int):
        e = np.zeros(dim)
        e[node] = 1.0
        return e
    a = _expand(node[0], dim)
    b = _expand(node[1], dim)
    return np.kron(a, b) - np.kron(b, a)


class LyndonBasis:
    """Per-(dim, depth) basis tables.

    ``expansions[k]`` maps Lyndon coefficients of degree k to the dense
    degree-k tensor block; ``projectors[k]`` is its pseudo-inverse, so
    projection of a Lie element onto the basis is a matrix product.
    """

    def __init__(self, dim, depth):
        self.dim = dim
        self.depth = depth
        self.words = lyndon_words(dim, depth)
        self.words_by_degree = tuple(
            tuple(w for w in self.words if len(w) == k) for k in range(depth + 1)
        )
        expansions = [None]
        projectors = [None]
        for k in range(1, depth + 1):
            cols = [_expand(bracket(w), dim) for w in self.words_by_degree[k]]
            if cols:
                mat = np.stack(cols, axis=1)
            else:
                mat = np.zeros((dim**k, 0))  # dim=1 has no Lyndon words past length 1
            expansions.append(mat)
            projectors.append(np.linalg.pinv(mat))
        self.expansions = tuple(expansions)
        self.projectors = tuple(projectors)

    def labels(self):
        return [bracket_label(w) for w in self.words]


@lru_cache(maxsize=None)
def lyndon_basis(dim, depth):
    """Cached :class:`LyndonBasis` instance (the tables are pure functions of dim/depth)."""
    return LyndonBasis(dim, depth)
