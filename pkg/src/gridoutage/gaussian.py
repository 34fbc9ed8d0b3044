"""Multivariate Gaussian increment distributions.

Everything works in log space; the change-point statistics downstream only
ever consume log-densities.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular, LinAlgError

from gridoutage.errors import NotPositiveDefiniteError
from gridoutage.matfun import as_symmetric, check_positive_definite

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True, eq=False)
class IncrementDistribution:
    """``N(mean, cov)`` over voltage-magnitude increments (per unit)."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise ValueError(
                f"mean of length {mean.size} does not match cov of shape {cov.shape}"
            )
        cov = check_positive_definite(cov, "covariance")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    @cached_property
    def chol(self) -> np.ndarray:
        return cholesky(self.cov, lower=True)

    @cached_property
    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    @cached_property
    def precision(self) -> np.ndarray:
        return cho_solve((self.chol, True), np.eye(self.dim))

    def __eq__(self, other):
        if not isinstance(other, IncrementDistribution):
            return NotImplemented
        return np.array_equal(self.mean, other.mean) and np.array_equal(self.cov, other.cov)

    __hash__ = None

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "cov": self.cov.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "IncrementDistribution":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["cov"], dtype=float))

    def affine(self, w: np.ndarray, shift=None) -> "IncrementDistribution":
        """Distribution of ``w @ (x - shift)``."""
        mean = self.mean if shift is None else self.mean - shift
        return IncrementDistribution(w @ mean, w @ self.cov @ w.T)

    def marginal(self, idx) -> "IncrementDistribution":
        idx = np.asarray(idx, dtype=int)
        return IncrementDistribution(self.mean[idx], self.cov[np.ix_(idx, idx)])


def gaussian_log_pdf(mean: np.ndarray, chol: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Row-wise log density given a lower Cholesky factor. ``x`` is (N, M)."""
    z = solve_triangular(chol, (x - mean).T, lower=True, check_finite=False)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (np.sum(z * z, axis=0) + logdet + mean.size * LOG_2PI)


def log_pdf(dist: IncrementDistribution, x):
    """Log density at one point (returns float) or at each row of a 2-D array."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 0 or (x.ndim == 1 and x.size == dist.dim)
    if single:
        x2 = x.reshape(1, -1)
    elif x.ndim == 1 and dist.dim == 1:
        # a 1-D array against a scalar distribution is a batch of samples
        x2 = x.reshape(-1, 1)
    else:
        x2 = np.atleast_2d(x)
    if x2.shape[1] != dist.dim:
        raise ValueError(f"sample dimension {x2.shape[1]} != distribution dimension {dist.dim}")
    out = gaussian_log_pdf(dist.mean, dist.chol, x2)
    return float(out[0]) if single else out


def kl_divergence(f: IncrementDistribution, g: IncrementDistribution) -> float:
    """Closed-form ``KL(f || g)`` between two Gaussians."""
    if f.dim != g.dim:
        raise ValueError(f"dimension mismatch: {f.dim} vs {g.dim}")
    m = f.dim
    diff = f.mean - g.mean
    z = solve_triangular(g.chol, diff, lower=True)
    trace_term = float(np.trace(cho_solve((g.chol, True), f.cov)))
    return 0.5 * (trace_term + float(z @ z) - m + g.logdet - f.logdet)


def sample(dist: IncrementDistribution, rng, n: int) -> np.ndarray:
    """``n`` i.i.d. draws as an (n, M) array.

    ``rng`` is a ``numpy.random.Generator`` or anything accepted by
    ``numpy.random.default_rng`` (an int seed, a ``SeedSequence``).
    """
    rng = np.random.default_rng(rng)
    z = rng.standard_normal((n, dist.dim))
    return dist.mean + z @ dist.chol.T


@dataclass(frozen=True, eq=False)
class WhiteningTransform:
    """Linear map ``w`` with ``w.T @ w == inv(sigma0)``."""

    w: np.ndarray

    @property
    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.w)


def whitening_transform(sigma0) -> WhiteningTransform:
    """PCA whitening: ``diag(lam)**-1/2 @ Q.T`` from ``sigma0 = Q diag(lam) Q.T``."""
    sigma0 = check_positive_definite(sigma0, "sigma0")
    lam, q = np.linalg.eigh(sigma0)
    return WhiteningTransform((q / np.sqrt(lam)).T)


def apply_whitening(w, stream, shift=None) -> np.ndarray:
    w = w.w if isinstance(w, WhiteningTransform) else np.asarray(w)
    x = np.atleast_2d(np.asarray(stream, dtype=float))
    if shift is not None:
        x = x - shift
    return x @ w.T


def conditional_covariance(sigma, i: int, k: int) -> np.ndarray:
    """Covariance of buses ``(i, k)`` given all others, via the Schur complement."""
    sigma = as_symmetric(sigma, atol=1e-9 * max(1.0, float(np.max(np.abs(sigma)))))
    m = sigma.shape[0]
    if m < 3:
        raise ValueError("conditioning needs at least 3 variables")
    if i == k or not (0 <= i < m and 0 <= k < m):
        raise IndexError(f"invalid pair ({i}, {k}) for dimension {m}")
    keep = [i, k]
    rest = [j for j in range(m) if j not in keep]
    s_ii = sigma[np.ix_(keep, keep)]
    s_ik = sigma[np.ix_(keep, rest)]
    s_kk = sigma[np.ix_(rest, rest)]
    try:
        c = cholesky(s_kk, lower=True)
    except LinAlgError as exc:
        raise NotPositiveDefiniteError("conditioning block is singular") from exc
    t = solve_triangular(c, s_ik.T, lower=True)
    out = s_ii - t.T @ t
    return 0.5 * (out + out.T)
