"""Batched spectral norms and conditioning for small dense matrices.

Everything in this package measures matrix size in the operator 2-norm.
Dimensions 1 and 2 use closed forms so that per-path loops over large
ensembles stay cheap; larger dimensions fall back to LAPACK SVD.
"""

from __future__ import annotations

import numpy as np


def spectral_norm_sq(mats: np.ndarray) -> np.ndarray:
    """Squared operator 2-norm of a batch of square matrices.

    Parameters
    ----------
    mats : ndarray, shape (..., d, d)

    Returns
    -------
    ndarray, shape (...)
        Largest singular value squared, elementwise over the batch.
    """
    mats = np.asarray(mats, dtype=float)
    d = mats.shape[-1]
    if mats.shape[-2] != d:
        raise ValueError("expected square matrices")
    if d == 1:
        return mats[..., 0, 0] ** 2
    if d == 2:
        # sigma_max^2 = (F + sqrt(F^2 - 4 det^2)) / 2 with F the squared
        # Frobenius norm; the discriminant is clipped against roundoff.
        f = np.einsum("...ij,...ij->...", mats, mats)
        det = mats[..., 0, 0] * mats[..., 1, 1] - mats[..., 0, 1] * mats[..., 1, 0]
        disc = f * f - 4.0 * det * det
        return 0.5 * (f + np.sqrt(np.maximum(disc, 0.0)))
    svals = np.linalg.svd(mats, compute_uv=False)
    return svals[..., 0] ** 2


def spectral_norm(mats: np.ndarray) -> np.ndarray:
    """Operator 2-norm of a batch of square matrices."""
    return np.sqrt(spectral_norm_sq(mats))


def cond_two(mats: np.ndarray) -> np.ndarray:
    """2-norm condition number of a batch of square matrices.

    Singular matrices get ``inf``. For d = 2 the identity
    sigma_max * sigma_min = |det| avoids a second SVD sweep.
    """
    mats = np.asarray(mats, dtype=float)
    d = mats.shape[-1]
    if d == 1:
        a = np.abs(mats[..., 0, 0])
        return np.where(a > 0.0, 1.0, np.inf)
    if d == 2:
        smax_sq = spectral_norm_sq(mats)
        det = np.abs(mats[..., 0, 0] * mats[..., 1, 1] - mats[..., 0, 1] * mats[..., 1, 0])
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(det > 0.0, smax_sq / det, np.inf)
        return out
    svals = np.linalg.svd(mats, compute_uv=False)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(svals[..., -1] > 0.0, svals[..., 0] / svals[..., -1], np.inf)
    return out
