"""Matrix functions of symmetric matrices.

Two families live here: truncated Taylor/Mercator series (cheap, used by the
accelerated covariance learner) and exact eigendecomposition routines that
serve as the reference path and as test oracles.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gridoutage.errors import (
    NotPositiveDefiniteError,
    NotSymmetricError,
    SeriesConditionError,
)

SYM_ATOL = 1e-12
PD_RTOL = 1e-10


@dataclass(frozen=True)
class ApproxConfig:
    """Truncation orders for the series approximations."""

    k_exp: int = 12
    k_log: int = 16

    def __post_init__(self):
        if self.k_exp < 2 or self.k_exp % 2:
            raise ValueError(f"k_exp must be even and >= 2, got {self.k_exp}")
        if self.k_log < 1:
            raise ValueError(f"k_log must be >= 1, got {self.k_log}")


def as_symmetric(x, atol=SYM_ATOL) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise NotSymmetricError(f"expected a square matrix, got shape {x.shape}")
    if not np.allclose(x, x.T, rtol=0.0, atol=atol):
        err = np.max(np.abs(x - x.T))
        raise NotSymmetricError(f"matrix is not symmetric (max asymmetry {err:.3g})")
    return x


def symmetrize(x: np.ndarray) -> np.ndarray:
    return 0.5 * (x + x.T)


def min_eigenvalue(x) -> float:
    """Smallest eigenvalue of a symmetric matrix."""
    x = as_symmetric(x)
    return float(np.linalg.eigvalsh(x)[0])


def is_positive_definite(x) -> bool:
    """PD test used throughout: ``min eig > 1e-10 * trace / dim``."""
    x = np.asarray(x, dtype=float)
    lam = np.linalg.eigvalsh(symmetrize(x))
    scale = max(float(np.trace(x)) / x.shape[0], 0.0)
    return bool(lam[0] > PD_RTOL * scale and lam[0] > 0.0)


def check_positive_definite(x, name="matrix") -> np.ndarray:
    x = as_symmetric(x)
    if not is_positive_definite(x):
        raise NotPositiveDefiniteError(f"{name} is not positive definite")
    return x


def gershgorin_bounds(x: np.ndarray) -> tuple[float, float]:
    """Cheap enclosure ``[lo, hi]`` of the spectrum of a symmetric matrix."""
    d = np.diag(x)
    r = np.sum(np.abs(x), axis=1) - np.abs(d)
    return float(np.min(d - r)), float(np.max(d + r))


def truncated_exp(x, k_exp: int = 12, check: bool = True) -> np.ndarray:
    """Sum of the first ``k_exp + 1`` terms of the exponential series.

    Evaluated in nested (Horner) form ``I + X/1 (I + X/2 (I + ...))`` so no
    explicit power ``X**k`` is ever formed.

    Raises
    ------
    SeriesConditionError
        If ``check`` and ``k_exp <= -a_min``; the result is then not
        guaranteed positive definite. ``err.value`` holds ``a_min``.
    """
    x = as_symmetric(x)
    if k_exp < 2 or k_exp % 2:
        raise ValueError(f"k_exp must be even and >= 2, got {k_exp}")
    if check:
        a_min = float(np.linalg.eigvalsh(x)[0])
        if k_exp <= -a_min:
            raise SeriesConditionError(
                f"k_exp={k_exp} too small for smallest eigenvalue {a_min:.4g}; "
                f"need k_exp > {-a_min:.4g}",
                value=a_min,
            )
    n = x.shape[0]
    eye = np.eye(n)
    out = eye.copy()
    for k in range(k_exp, 0, -1):
        out = eye + (x @ out) / k
    return symmetrize(out)


def truncated_log(x, k_log: int = 16, check: bool = True) -> np.ndarray:
    """Mercator series ``sum_{k=1}^{K} (-1)^{k+1} (X - I)^k / k``.

    The series only converges when the spectral radius of ``X - I`` is
    below one; with ``check`` that is verified and a ``SeriesConditionError``
    carrying the radius is raised otherwise.
    """
    x = as_symmetric(x)
    if k_log < 1:
        raise ValueError(f"k_log must be >= 1, got {k_log}")
    n = x.shape[0]
    eye = np.eye(n)
    d = x - eye
    if check:
        lam = np.linalg.eigvalsh(x)
        scale = max(float(np.trace(x)) / n, 0.0)
        if lam[0] <= max(PD_RTOL * scale, 0.0):
            raise NotPositiveDefiniteError("truncated_log needs a positive definite input")
        radius = float(np.max(np.abs(lam - 1.0)))
        if radius >= 1.0:
            raise SeriesConditionError(
                f"spectral radius of X - I is {radius:.4g} >= 1; series diverges",
                value=radius,
            )
    coef = [(-1.0) ** (k + 1) / k for k in range(1, k_log + 1)]
    out = coef[-1] * eye
    for c in reversed(coef[:-1]):
        out = c * eye + d @ out
    out = d @ out
    return symmetrize(out)


def _eig_apply(x: np.ndarray, fn) -> np.ndarray:
    lam, q = np.linalg.eigh(x)
    return symmetrize((q * fn(lam)) @ q.T)


def exact_exp_sym(x) -> np.ndarray:
    """Matrix exponential through ``Q diag(exp a) Q^T``."""
    return _eig_apply(as_symmetric(x), np.exp)


def exact_log_sym(x) -> np.ndarray:
    """Principal matrix logarithm of a symmetric positive definite matrix."""
    x = as_symmetric(x)
    lam, q = np.linalg.eigh(x)
    scale = max(float(np.trace(x)) / x.shape[0], 0.0)
    if lam[0] <= max(PD_RTOL * scale, 0.0):
        raise NotPositiveDefiniteError("exact_log_sym needs a positive definite input")
    return symmetrize((q * np.log(lam)) @ q.T)


def exp_sym_unchecked(x: np.ndarray) -> np.ndarray:
    """``exact_exp_sym`` without input validation, for inner loops."""
    if x.shape == (1, 1):
        return np.exp(x)
    return _eig_apply(x, np.exp)


def log_spd_unchecked(x: np.ndarray) -> np.ndarray:
    """``exact_log_sym`` with only a positivity check, for inner loops."""
    if x.shape == (1, 1):
        if not x[0, 0] > 0:
            raise NotPositiveDefiniteError("matrix logarithm of a non-positive scalar")
        return np.log(x)
    lam, q = np.linalg.eigh(x)
    if not lam[0] > 0:
        raise NotPositiveDefiniteError("matrix logarithm needs a positive definite input")
    return symmetrize((q * np.log(lam)) @ q.T)
