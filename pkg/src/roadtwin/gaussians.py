"""Shared Gaussian numerics for the tracker and the fusion stages."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy import linalg


class NonPositiveDefinite(Exception):
    """A covariance failed its Cholesky factorization."""


class Gaussian(NamedTuple):
    mean: np.ndarray
    cov: np.ndarray


def symmetrize(p: np.ndarray) -> np.ndarray:
    return 0.5 * (p + p.T)


def cholesky_spd(p: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, raising NonPositiveDefinite on failure."""
    try:
        return linalg.cholesky(p, lower=True)
    except linalg.LinAlgError as err:
        raise NonPositiveDefinite(str(err)) from err


def is_spd(p: np.ndarray, sym_tol: float = 1e-9) -> bool:
    if np.max(np.abs(p - p.T)) > sym_tol:
        return False
    try:
        linalg.cholesky(p, lower=True)
    except linalg.LinAlgError:
        return False
    return True


def spd_inverse(p: np.ndarray) -> np.ndarray:
    l = cholesky_spd(p)
    inv = linalg.cho_solve((l, True), np.eye(p.shape[0]))
    return symmetrize(inv)


def mahalanobis2(diff: np.ndarray, cov: np.ndarray) -> float:
    """Squared Mahalanobis distance diff' cov^-1 diff."""
    l = cholesky_spd(cov)
    y = linalg.solve_triangular(l, diff, lower=True)
    return float(y @ y)


def gaussian_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    d = x.shape[0]
    l = cholesky_spd(cov)
    y = linalg.solve_triangular(l, x - mean, lower=True)
    log_det = 2.0 * np.sum(np.log(np.diag(l)))
    return float(-0.5 * (y @ y + log_det + d * np.log(2.0 * np.pi)))


def det_inv_2x2(s: np.ndarray):
    """Batched determinant and inverse of (..., 2, 2) matrices.

    Raises NonPositiveDefinite when any determinant is non-positive.
    """
    det = s[..., 0, 0] * s[..., 1, 1] - s[..., 0, 1] * s[..., 1, 0]
    if np.any(det <= 0):
        raise NonPositiveDefinite("2x2 matrix not positive definite")
    inv = np.empty_like(s)
    inv[..., 0, 0] = s[..., 1, 1]
    inv[..., 1, 1] = s[..., 0, 0]
    inv[..., 0, 1] = -s[..., 0, 1]
    inv[..., 1, 0] = -s[..., 1, 0]
    return det, inv / det[..., None, None]


def moment_match(weights, means, covs) -> Gaussian:
    """Single Gaussian with the mixture's total mean and covariance.

    Weights need not be normalized; the moments are taken under the
    normalized weights.
    """
    w = np.asarray(weights, dtype=float)
    m = np.asarray(means, dtype=float)
    p = np.asarray(covs, dtype=float)
    total = w.sum()
    wn = w / total
    mean = wn @ m
    spread = m - mean
    cov = np.einsum("i,ijk->jk", wn, p) + np.einsum("i,ij,ik->jk", wn, spread, spread)
    return Gaussian(mean, symmetrize(cov))
