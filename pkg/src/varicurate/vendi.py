"""Vendi score: effective diversity of a set under its cosine kernel.

For n rows the score is exp of the Shannon entropy of the normalized
kernel eigenvalues, so it ranges from 1 (all rows identical up to scale)
to n (mutually orthogonal rows). The loss used for diversity guidance is
the negated score, and its gradient with respect to the (unit-normalized)
rows has the closed form

    dL/dU = 2 (V diag(c) V^T) U,   c_p = VS * (log lam_p_bar + H) / S

where V, lam are the kernel eigenvectors/values, H the entropy and S the
eigenvalue sum. c_p depends only on lam_p, so the matrix V diag(c) V^T is
well-defined even when eigenvalues repeat.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from ._validation import check_unit_rows
from .errors import NumericError, ParameterError
from .similarity import pairwise_kernel

EIGENGAP_TOL = 1e-10
DIAGONAL_JITTER = 1e-8
_EIG_FLOOR = 1e-12


@dataclass(frozen=True)
class VendiResult:
    """Score plus the spectrum it came from."""

    score: float
    entropy: float
    eigenvalues: np.ndarray
    jitter_applied: bool = False

    @property
    def loss(self) -> float:
        return -self.score


def _rows_of(x) -> np.ndarray:
    data = getattr(x, "data", x)
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 1:
        raise ParameterError(
            f"vendi score needs a non-empty 2-D batch, got shape {data.shape}"
        )
    return data


def _spectrum(kernel: np.ndarray) -> np.ndarray:
    try:
        lam = scipy.linalg.eigvalsh(kernel)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"kernel eigendecomposition failed: {exc}") from exc
    if not np.all(np.isfinite(lam)):
        raise NumericError("kernel eigenvalues are not finite")
    return np.clip(lam[::-1], 0.0, None)


def _entropy(lam: np.ndarray) -> float:
    total = lam.sum()
    if total <= 0.0:
        raise NumericError("kernel spectrum sums to zero")
    p = lam / total
    p_ = p[p > 0]
    return float(-(p_ * np.log(p_)).sum())


def vendi_diagnostics(x) -> VendiResult:
    """Score, entropy, and the clamped eigenvalue spectrum of ``x``."""
    lam = _spectrum(pairwise_kernel(_rows_of(x)))
    h = _entropy(lam)
    return VendiResult(score=float(np.exp(h)), entropy=h, eigenvalues=lam)


def vendi_score(x) -> float:
    """Vendi score of the rows of ``x`` (an array or embedding set).

    Rows are cosine-compared, so per-row scale does not matter.
    """
    return vendi_diagnostics(x).score


def vendi_loss(x) -> float:
    """Negated vendi score; lower means more diverse."""
    return -vendi_score(x)


def vendi_loss_grad(u: np.ndarray) -> tuple[float, np.ndarray, bool]:
    """Loss and its Riemannian gradient at unit-normalized rows ``u``.

    Returns ``(loss, grad, jitter_applied)``. ``grad`` has the shape of
    ``u`` and is tangent to the unit sphere row-wise (each row orthogonal
    to the corresponding input row), which is the correct object to chain
    through a row-normalization step.

    Directions along clamped (numerically zero or negative) eigenvalues
    carry no gradient. When the spectrum has near-coincident eigenvalues
    the kernel diagonal is nudged by a tiny isotropic jitter before the
    decomposition purely as a numerical stabilizer, and the returned flag
    is set so callers can surface it.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2 or u.shape[0] < 1:
        raise ParameterError(
            f"gradient needs a non-empty 2-D batch, got shape {u.shape}"
        )
    check_unit_rows(u, "u")
    n = u.shape[0]
    kernel = pairwise_kernel(u)
    jitter_applied = False
    try:
        lam, vec = scipy.linalg.eigh(kernel)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"kernel eigendecomposition failed: {exc}") from exc
    if n > 1 and np.min(np.diff(np.sort(lam))) < EIGENGAP_TOL:
        jitter_applied = True
        try:
            lam, vec = scipy.linalg.eigh(
                kernel + DIAGONAL_JITTER * np.eye(n)
            )
        except np.linalg.LinAlgError as exc:
            raise NumericError(
                f"kernel eigendecomposition failed after jitter: {exc}"
            ) from exc
    if not np.all(np.isfinite(lam)):
        raise NumericError("kernel eigenvalues are not finite")
    lam = np.clip(lam, 0.0, None)
    total = lam.sum()
    if total <= 0.0:
        raise NumericError("kernel spectrum sums to zero")
    p = lam / total
    pos = p > _EIG_FLOOR
    h = float(-(p[pos] * np.log(p[pos])).sum())
    score = float(np.exp(h))
    coeff = np.zeros_like(lam)
    coeff[pos] = score * (np.log(p[pos]) + h) / total
    # dL/dK, assembled in the eigenbasis; then dK/dU for K = U U^T.
    g_kernel = (vec * coeff) @ vec.T
    grad = 2.0 * (g_kernel @ u)
    grad -= np.einsum("ij,ij->i", grad, u)[:, None] * u
    return -score, grad, jitter_applied
