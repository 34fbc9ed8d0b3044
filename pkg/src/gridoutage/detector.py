"""Bayesian sequential outage detection.

With a geometric prior ``Geo(rho)`` on the change time, the posterior odds
that the change already happened,

    Lambda_N = sum_{k<=N} pi(k) prod_{n<k} g prod_{n>=k} f
               / (P(lambda > N) prod_{n<=N} g),

is compared against ``B = (1 - alpha) / (rho * alpha)``; the first crossing
is the declared outage time. Once more than ``window`` samples have arrived
only the latest ``window`` are used and the prior is re-anchored at the
window start. Because ``f`` may be re-learned at every step, the statistic
is recomputed over the window instead of being updated recursively.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from gridoutage import kernels
from gridoutage.gaussian import IncrementDistribution, gaussian_log_pdf
from gridoutage.learner import LearnerConfig, pgd_fit

SCHEMA = "gridoutage.outcome/1"


def geometric_log_prior(rho: float, k: int) -> float:
    """``log(rho (1 - rho)^(k-1))``."""
    if k < 1:
        raise ValueError(f"change time index must be >= 1, got {k}")
    if k == 1:
        return math.log(rho)
    return math.log(rho) + (k - 1) * math.log1p(-rho)


def geometric_log_tail(rho: float, n: int) -> float:
    """``log P(lambda > n) = n log(1 - rho)``."""
    if n < 0:
        raise ValueError("n must be non-negative")
    return n * math.log1p(-rho) if n else 0.0


def threshold(rho: float, alpha: float) -> float:
    return (1.0 - alpha) / (rho * alpha)


def log_threshold(rho: float, alpha: float) -> float:
    return math.log1p(-alpha) - math.log(rho) - math.log(alpha)


def log_posterior_ratio(window, g: IncrementDistribution, f: IncrementDistribution, rho: float) -> float:
    """Log posterior odds of ``lambda <= N`` over a window of ``N`` samples."""
    x = np.asarray(window, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1) if g.dim == 1 else x.reshape(1, -1)
    if x.shape[0] == 0:
        raise ValueError("empty window")
    log_g = gaussian_log_pdf(g.mean, g.chol, x)
    log_f = gaussian_log_pdf(f.mean, f.chol, x)
    return kernels.log_posterior_ratio(log_g, log_f, math.log(rho), math.log1p(-rho))


@dataclass(frozen=True)
class DetectorConfig:
    rho: float = 0.04
    alpha: float = 0.01
    window: int = 100
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    mode: str = "pgd"

    def __post_init__(self):
        if not 0 < self.rho < 1:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.window < 2:
            raise ValueError("window must be at least 2")
        if self.mode not in ("f_known", "pgd"):
            raise ValueError(f"mode must be 'f_known' or 'pgd', got {self.mode!r}")


@dataclass
class DetectionOutcome:
    """Result of one sequential run.

    ``tau`` is the 1-based index of the sample at which the statistic first
    reached ``log(threshold)``, or ``None`` if the stream ran out first.
    """

    tau: int | None
    threshold: float
    trace: list[float]
    mu: np.ndarray | None = None
    sigma: np.ndarray | None = None
    localized: list | None = None

    def to_dict(self, digits: int = 12) -> dict:
        def r(v):
            return float(f"{v:.{digits}g}")

        learned = None
        if self.mu is not None:
            learned = {
                "mu": [r(v) for v in np.ravel(self.mu)],
                "sigma": [[r(v) for v in row] for row in np.atleast_2d(self.sigma)],
            }
        return {
            "schema": SCHEMA,
            "tau": self.tau,
            "threshold": r(self.threshold),
            "trace": [r(v) for v in self.trace],
            "learned": learned,
            "localized": None if self.localized is None else [
                {"i": c.i, "k": c.k, "rho_pre": r(c.rho_pre), "rho_post": r(c.rho_post)}
                for c in self.localized
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


class SequentialDetector:
    """Consumes one increment vector at a time.

    In ``pgd`` mode every update re-fits ``f`` on the current window,
    warm-started at the previous step's estimate. In ``f_known`` mode ``f``
    must be supplied.
    """

    def __init__(self, g: IncrementDistribution, config: DetectorConfig | None = None,
                 f: IncrementDistribution | None = None, mean_bound=None):
        self.g = g
        self.config = config or DetectorConfig()
        if self.config.mode == "f_known" and f is None:
            raise ValueError("f_known mode needs the post-change distribution f")
        self.f = f
        self.mean_bound = mean_bound
        self._x: deque = deque(maxlen=self.config.window)
        self._log_g: deque = deque(maxlen=self.config.window)
        self._log_f: deque = deque(maxlen=self.config.window)
        self._log_rho = math.log(self.config.rho)
        self._log1m = math.log1p(-self.config.rho)
        self.mu = None if f is None else f.mean
        self.sigma = None if f is None else f.cov
        self.n = 0
        self.fits = 0

    def update(self, x) -> float:
        """Add one sample; return the log posterior ratio over the window."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if x.shape != (self.g.dim,):
            raise ValueError(f"sample has shape {x.shape}, expected ({self.g.dim},)")
        self.n += 1
        self._x.append(x)
        self._log_g.append(float(gaussian_log_pdf(self.g.mean, self.g.chol, x[None, :])[0]))
        window = np.asarray(self._x)
        log_g = np.fromiter(self._log_g, dtype=float, count=len(self._log_g))
        if self.config.mode == "pgd":
            warm = None if self.mu is None else (self.mu, self.sigma)
            fit = pgd_fit(window, self.g, self.config.learner, warm_start=warm,
                          rho=self.config.rho, log_g=log_g, mean_bound=self.mean_bound)
            self.mu, self.sigma = fit.mu, fit.sigma
            self.fits += 1
            lse = -fit.trace.best_value if self.config.learner.output_mode == "best" \
                else -fit.trace.averaged_objective
            return lse - (len(log_g) * self._log1m + float(np.sum(log_g)))
        self._log_f.append(float(gaussian_log_pdf(self.f.mean, self.f.chol, x[None, :])[0]))
        log_f = np.fromiter(self._log_f, dtype=float, count=len(self._log_f))
        return kernels.log_posterior_ratio(log_g, log_f, self._log_rho, self._log1m)


def run_detection(stream, g: IncrementDistribution, config: DetectorConfig | None = None,
                  f: IncrementDistribution | None = None, mean_bound=None) -> DetectionOutcome:
    """Run until the first threshold crossing or until ``stream`` is exhausted."""
    config = config or DetectorConfig()
    outcome = run_multi_threshold(stream, g, config, [config.alpha], f=f, mean_bound=mean_bound)
    return outcome[0]


def run_multi_threshold(stream, g, config: DetectorConfig, alphas, f=None, mean_bound=None):
    """One pass serving several false-alarm levels at once.

    The statistic does not depend on ``alpha``, so stopping at the largest
    threshold and reading off each first crossing is equivalent to separate
    runs. Returns one ``DetectionOutcome`` per alpha, each with the trace
    truncated at its own stopping time.
    """
    det = SequentialDetector(g, config, f=f, mean_bound=mean_bound)
    levels = [log_threshold(config.rho, a) for a in alphas]
    taus: list[int | None] = [None] * len(alphas)
    learned: list[tuple | None] = [None] * len(alphas)
    trace: list[float] = []
    top = max(levels)
    for x in _iter_samples(stream, g.dim):
        stat = det.update(x)
        trace.append(stat)
        for j, lvl in enumerate(levels):
            if taus[j] is None and stat >= lvl:
                taus[j] = det.n
                learned[j] = (None, None) if det.mu is None else (np.array(det.mu), np.array(det.sigma))
        if stat >= top:
            break
    out = []
    for j, a in enumerate(alphas):
        tau = taus[j]
        mu, sigma = learned[j] if learned[j] is not None else (
            (None, None) if det.mu is None else (det.mu, det.sigma))
        out.append(DetectionOutcome(
            tau=tau,
            threshold=threshold(config.rho, a),
            trace=trace[:tau] if tau is not None else list(trace),
            mu=mu,
            sigma=sigma,
        ))
    return out


def _iter_samples(stream, dim):
    if isinstance(stream, np.ndarray):
        arr = stream.reshape(-1, 1) if (stream.ndim == 1 and dim == 1) else np.atleast_2d(stream)
        yield from arr
    else:
        yield from stream
