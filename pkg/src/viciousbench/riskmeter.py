"""Reconstruction risk: Gaussian statistics, Mahalanobis distance, and R.

All quadratic forms go through a Cholesky factor of ``sigma + ridge * I``;
the dense inverse is only materialised on request (:attr:`GaussianStats.sigma_inv`).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import linalg

from . import tensorio
from .errors import ArgumentError, IllConditionedError

DEFAULT_RIDGE_SCALE = 1.0
DEFAULT_FLOOR = 1e-6
PSNR_CAP = 100.0


@dataclass(frozen=True, eq=False)
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray
    chol: np.ndarray  # lower factor of sigma + ridge * I
    ridge: float
    fitted_on: int

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @cached_property
    def sigma_inv(self) -> np.ndarray:
        return linalg.cho_solve((self.chol, True), np.eye(self.dim))

    @cached_property
    def log_det(self) -> float:
        return 2.0 * float(np.log(np.diag(self.chol)).sum())

    def whiten(self, diff) -> np.ndarray:
        """``L^{-1} diff`` for row vectors; its norm is the Mahalanobis distance."""
        diff = np.atleast_2d(np.asarray(diff, dtype=np.float64))
        return linalg.solve_triangular(self.chol, diff.T, lower=True, check_finite=False).T

    def save(self, path) -> None:
        tensorio.save_tensors(path, [self.mu, self.sigma, self.chol,
                                     np.array([self.ridge]), np.array([self.fitted_on], dtype=np.int64)])

    @classmethod
    def load(cls, path) -> "GaussianStats":
        mu, sigma, chol, ridge, n = tensorio.read_tensors(path)
        return cls(mu, sigma, chol, float(ridge[0]), int(n[0]))

    @classmethod
    def identity(cls, dim: int) -> "GaussianStats":
        eye = np.eye(dim)
        return cls(np.zeros(dim), eye, eye.copy(), 0.0, 0)


def _flatten(samples) -> np.ndarray:
    arr = np.asarray(samples)
    return arr.reshape(arr.shape[0], -1)


def fit_gaussian_stats(samples, ridge: float | None = None, chunk: int = 8192,
                       ridge_scale: float = DEFAULT_RIDGE_SCALE) -> GaussianStats:
    """Unbiased mean/covariance of flattened samples plus a ridge-regularised factor.

    ``ridge=None`` picks ``ridge_scale * trace(sigma) / D``, the mean per-coordinate variance, so
    that directions the data barely moves in cannot dominate the distance.

    Raises:
        ArgumentError: fewer than two samples or negative ridge.
        IllConditionedError: ``sigma + ridge * I`` is singular.
    """
    x = _flatten(samples)
    n, d = x.shape
    if n < 2:
        raise ArgumentError("need at least two samples to fit a covariance")
    mu = x.mean(axis=0, dtype=np.float64)
    sigma = np.zeros((d, d))
    for start in range(0, n, chunk):
        c = x[start:start + chunk].astype(np.float64) - mu
        sigma += c.T @ c
    sigma /= n - 1
    sigma = (sigma + sigma.T) / 2
    if ridge is None:
        ridge = ridge_scale * float(np.trace(sigma)) / d
    if ridge < 0:
        raise ArgumentError("ridge must be non-negative")
    reg = sigma + ridge * np.eye(d)
    if ridge == 0:
        eig = np.linalg.eigvalsh(reg)
        if eig[0] <= max(eig[-1], 1.0) * d * np.finfo(float).eps:
            raise IllConditionedError("covariance is singular with ridge=0; pass ridge > 0")
    try:
        chol = np.linalg.cholesky(reg)
    except np.linalg.LinAlgError:
        raise IllConditionedError("covariance + ridge is not positive definite; increase ridge") from None
    return GaussianStats(mu, sigma, chol, float(ridge), n)


def mahalanobis(a, b, stats: GaussianStats):
    """``sqrt((a-b)^T (sigma + ridge I)^{-1} (a-b))``; batched over leading rows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    single = a.ndim == 1 and b.ndim == 1
    diff = a.reshape(-1, stats.dim) - b.reshape(-1, stats.dim)
    d = np.linalg.norm(stats.whiten(diff), axis=1)
    return float(d[0]) if single else d


def log_gaussian_density(x, stats: GaussianStats):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    d = mahalanobis(x.reshape(-1, stats.dim), stats.mu[None], stats)
    out = -0.5 * stats.dim * math.log(2 * math.pi) - 0.5 * stats.log_det - 0.5 * np.asarray(d) ** 2
    return float(out[0]) if single else out


def gaussian_density(x, stats: GaussianStats):
    """Multivariate normal density; evaluated in log space then exponentiated."""
    out = np.exp(log_gaussian_density(x, stats))
    return float(out) if np.ndim(out) == 0 else out


def risk_terms(originals, reconstructions, stats: GaussianStats, floor: float | None = None) -> np.ndarray:
    """Per-sample ``d(x, mu) / max(d(x, x_rec), eps)``.

    ``floor=None`` sets ``eps = 1e-6 * mean d(x, mu)``; a number is used as is.
    """
    x = _flatten(originals).astype(np.float64)
    xr = _flatten(reconstructions).astype(np.float64)
    if len(x) == 0:
        raise ArgumentError("need at least one (x, x_rec) pair")
    if x.shape != xr.shape:
        raise ArgumentError(f"shape mismatch {x.shape} vs {xr.shape}")
    to_mean = mahalanobis(x, stats.mu[None], stats)
    to_rec = mahalanobis(x, xr, stats)
    eps = DEFAULT_FLOOR * float(to_mean.mean()) if floor is None else float(floor)
    if eps <= 0:
        eps = np.finfo(float).tiny
    return to_mean / np.maximum(to_rec, eps)


def reconstruction_risk(pairs_or_originals, reconstructions=None, stats: GaussianStats | None = None,
                        floor: float | None = None) -> float:
    """Mean risk over a test set.

    Call as ``reconstruction_risk(x, x_rec, stats)`` with stacked arrays, or
    ``reconstruction_risk(pairs, stats=stats)`` with a list of ``(x, x_rec)``.
    """
    if stats is None:
        raise ArgumentError("stats are required")
    if reconstructions is None:
        pairs = list(pairs_or_originals)
        if not pairs:
            raise ArgumentError("need at least one (x, x_rec) pair")
        originals = np.stack([np.asarray(p[0]) for p in pairs])
        reconstructions = np.stack([np.asarray(p[1]) for p in pairs])
    else:
        originals = pairs_or_originals
    return float(risk_terms(originals, reconstructions, stats, floor).mean())


def psnr_per_image(x_rec, x) -> np.ndarray:
    """``10 log10(1 / MSE)`` per image for [0, 1] data, capped at 100 dB."""
    a = _flatten(x_rec).astype(np.float64)
    b = _flatten(x).astype(np.float64)
    mse = ((a - b) ** 2).mean(axis=1)
    with np.errstate(divide="ignore"):
        val = 10.0 * np.log10(1.0 / mse)
    return np.minimum(val, PSNR_CAP)


def psnr(x_rec, x) -> float:
    """Mean per-image PSNR in dB; 4-D input is a batch, anything else one image."""
    a, b = np.asarray(x_rec), np.asarray(x)
    if a.ndim < 4:
        a, b = a[None], b[None]
    return float(psnr_per_image(a, b).mean())


def stats_summary(stats: GaussianStats) -> str:
    eig = np.linalg.eigvalsh(stats.sigma)
    return json.dumps({
        "dim": stats.dim, "fitted_on": stats.fitted_on, "ridge": stats.ridge,
        "trace": float(np.trace(stats.sigma)), "eig_min": float(eig[0]), "eig_max": float(eig[-1]),
        "log_det_regularized": stats.log_det,
    }, indent=2)
