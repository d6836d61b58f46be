"""Cosine similarity, kernel construction, and exact nearest neighbors.

All computation is done in float64 regardless of storage dtype. Kernels
are symmetrized explicitly so downstream eigendecompositions never see
asymmetry introduced by floating-point summation order.
"""

from __future__ import annotations

import numpy as np

from ._validation import as_matrix, as_vector, check_same_dim
from .errors import DegenerateEmbeddingError, ParameterError


def cosine(a, b) -> float:
    """Cosine similarity of two vectors.

    Scale-invariant in each argument; raises DegenerateEmbeddingError on a
    zero vector rather than returning NaN.
    """
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    check_same_dim(a, b, "a", "b")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateEmbeddingError("cosine of a zero vector is undefined")
    return float(np.dot(a, b) / (na * nb))


def cosine_rows(a, b) -> np.ndarray:
    """Row-wise cosine similarity of two aligned matrices."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    bad = np.nonzero((na == 0.0) | (nb == 0.0))[0]
    if bad.size:
        raise DegenerateEmbeddingError(
            f"cosine of a zero vector is undefined (row {bad[0]})"
        )
    return np.einsum("ij,ij->i", a, b) / (na * nb)


def unit_rows(x) -> np.ndarray:
    """Return ``x`` with unit-normalized rows, in float64."""
    x = as_matrix(x, "x")
    norms = np.linalg.norm(x, axis=1)
    zero = np.nonzero(norms == 0.0)[0]
    if zero.size:
        raise DegenerateEmbeddingError(
            f"cannot normalize zero row {zero[0]}"
        )
    return x / norms[:, None]


def pairwise_kernel(x) -> np.ndarray:
    """Full n-by-n cosine similarity matrix of the rows of ``x``.

    The result is exactly symmetric (upper triangle mirrored) with an
    exact unit diagonal.
    """
    u = unit_rows(x)
    k = u @ u.T
    k = np.triu(k, 1)
    k = k + k.T
    np.fill_diagonal(k, 1.0)
    return k


def cross_kernel(a, b) -> np.ndarray:
    """Cosine similarities between rows of ``a`` and rows of ``b``."""
    ua = unit_rows(a)
    ub = unit_rows(b)
    check_same_dim(ua, ub, "a", "b")
    return ua @ ub.T


def top_k_neighbors(
    x,
    k: int,
    *,
    include_self: bool = False,
    batch_size: int = 1024,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact top-k cosine neighbors of every row among all rows.

    Returns (indices, similarities), each of shape (n, k), both sorted by
    descending similarity. Ties are broken toward the lower row index so
    results are deterministic. ``k`` is capped at the number of available
    neighbors. Work proceeds in row batches so memory stays O(batch * n).
    """
    u = unit_rows(x)
    n = u.shape[0]
    limit = n if include_self else n - 1
    if limit < 1:
        raise ParameterError(
            "top_k_neighbors needs at least one candidate neighbor"
        )
    if not isinstance(k, (int, np.integer)) or isinstance(k, bool) or k < 1:
        raise ParameterError(f"k must be a positive integer, got {k!r}")
    k = min(int(k), limit)
    idx_out = np.empty((n, k), dtype=np.int64)
    sim_out = np.empty((n, k), dtype=np.float64)
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        sims = u[start:stop] @ u.T
        if not include_self:
            rows = np.arange(start, stop)
            sims[np.arange(stop - start), rows] = -np.inf
        # np.argsort is stable, so sorting on -sims breaks ties by index.
        order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        idx_out[start:stop] = order
        sim_out[start:stop] = np.take_along_axis(sims, order, axis=1)
    return idx_out, sim_out


def max_cross_similarity(
    a,
    b,
    *,
    batch_size: int = 2048,
) -> np.ndarray:
    """For every row of ``a``, its maximum cosine similarity to any row of ``b``."""
    ua = unit_rows(a)
    ub = unit_rows(b)
    check_same_dim(ua, ub, "a", "b")
    out = np.empty(ua.shape[0], dtype=np.float64)
    for start in range(0, ua.shape[0], batch_size):
        stop = min(start + batch_size, ua.shape[0])
        out[start:stop] = (ua[start:stop] @ ub.T).max(axis=1)
    return out
