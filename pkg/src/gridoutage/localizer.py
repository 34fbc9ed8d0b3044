"""Branch localization from the change in conditional correlations.

For every bus pair the correlation given all other buses is compared before
and after the outage: a pair that was strongly coupled (``|rho| > delta_max``)
and became nearly independent (``|rho| < delta_min``) is reported as an
out-of-service branch.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from gridoutage.gaussian import conditional_covariance
from gridoutage.matfun import check_positive_definite

DEGENERATE_VAR = 1e-12


class DegenerateCorrelationError(ArithmeticError):
    """A conditional variance is too small for the correlation to be resolved."""


@dataclass(frozen=True)
class LocalizerThresholds:
    delta_max: float = 0.5
    delta_min: float = 0.1

    def __post_init__(self):
        if not 0 < self.delta_min < self.delta_max < 1:
            raise ValueError(
                f"need 0 < delta_min < delta_max < 1, got {self.delta_min}, {self.delta_max}"
            )


def conditional_correlation(sigma, i: int, k: int) -> float:
    """Correlation of variables ``i`` and ``k`` (0-based) given all others.

    Computed literally from the 2x2 Schur complement.
    """
    c = conditional_covariance(sigma, i, k)
    if c[0, 0] <= DEGENERATE_VAR or c[1, 1] <= DEGENERATE_VAR:
        raise DegenerateCorrelationError(
            f"conditional variance of pair ({i}, {k}) is below {DEGENERATE_VAR:g}"
        )
    return float(np.clip(c[0, 1] / np.sqrt(c[0, 0] * c[1, 1]), -1.0, 1.0))


def conditional_correlation_matrix(sigma) -> np.ndarray:
    """All pairwise conditional correlations at once, ``-P_ik / sqrt(P_ii P_kk)``.

    ``P`` is the precision matrix. The diagonal is set to 1.
    """
    sigma = check_positive_definite(sigma, "covariance")
    if sigma.shape[0] < 3:
        raise ValueError("conditioning needs at least 3 variables")
    p = np.linalg.inv(sigma)
    p = 0.5 * (p + p.T)
    d = np.diag(p)
    # P_ii is the inverse of a conditional variance
    if np.any(1.0 / d <= DEGENERATE_VAR):
        raise DegenerateCorrelationError("a conditional variance is numerically zero")
    s = 1.0 / np.sqrt(d)
    r = -p * np.outer(s, s)
    np.fill_diagonal(r, 1.0)
    return np.clip(r, -1.0, 1.0)


@dataclass(frozen=True)
class Candidate:
    i: int
    k: int
    rho_pre: float
    rho_post: float

    def to_dict(self) -> dict:
        return {"i": self.i, "k": self.k, "rho_pre": self.rho_pre, "rho_post": self.rho_post}


def localize(sigma0, sigma1_hat, th: LocalizerThresholds | None = None, labels=None) -> list[Candidate]:
    """Pairs whose conditional correlation collapsed, sorted by ``(i, k)``.

    ``labels`` maps matrix positions to reported ids (e.g. bus ids with the
    slack removed); by default positions are reported 0-based.
    """
    th = th or LocalizerThresholds()
    s0 = np.asarray(sigma0, dtype=float)
    s1 = np.asarray(sigma1_hat, dtype=float)
    if s0.shape != s1.shape:
        raise ValueError(f"dimension mismatch: {s0.shape} vs {s1.shape}")
    m = s0.shape[0]
    labels = list(range(m)) if labels is None else list(labels)
    if len(labels) != m:
        raise ValueError(f"{len(labels)} labels for dimension {m}")
    r0 = conditional_correlation_matrix(s0)
    r1 = conditional_correlation_matrix(s1)
    iu, ku = np.triu_indices(m, 1)
    hit = (np.abs(r0[iu, ku]) > th.delta_max) & (np.abs(r1[iu, ku]) < th.delta_min)
    out = [
        Candidate(labels[a], labels[b], float(r0[a, b]), float(r1[a, b]))
        for a, b in zip(iu[hit], ku[hit])
    ]
    return sorted(out, key=lambda c: (c.i, c.k))


def candidate_pairs(candidates) -> set[tuple[int, int]]:
    return {(min(c.i, c.k), max(c.i, c.k)) for c in candidates}


def candidates_to_json(candidates) -> str:
    return json.dumps({"candidates": [c.to_dict() for c in candidates]}, indent=2) + "\n"
