"""Online estimation of the unknown post-outage Gaussian by mirror descent.

The objective is the negative log of the change-point mixture likelihood

    -log sum_k pi(k) prod_{n<k} g(x_n) prod_{n>=k} f(x_n | mu, Sigma)

over a window ``x_1..x_N`` with a geometric prior ``pi``. Its gradient is a
responsibility-weighted sum of per-sample Gaussian scores, the weight of
sample ``n`` being the posterior probability that the change happened at or
before ``n``.

Mean and covariance are updated alternately (mean first) with the mirror
step ``theta <- grad_phi^{-1}(grad_phi(theta) - eta * grad / N)``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy

from gridoutage import kernels
from gridoutage.errors import NotPositiveDefiniteError
from gridoutage.gaussian import IncrementDistribution, gaussian_log_pdf
from gridoutage.matfun import (
    ApproxConfig,
    exact_log_sym,
    exp_sym_unchecked,
    gershgorin_bounds,
    is_positive_definite,
    log_spd_unchecked,
    symmetrize,
    truncated_exp,
    truncated_log,
)

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# mirror maps


class MirrorMap:
    """Bregman potential ``phi`` with its gradient and inverse gradient."""

    name = "abstract"

    def potential(self, theta) -> float:
        raise NotImplementedError

    def grad(self, theta):
        raise NotImplementedError

    def inv_grad(self, dual):
        raise NotImplementedError

    def contains(self, theta) -> bool:
        return True

    def step(self, theta, gradient, eta: float, max_step: float | None = None):
        """Mirror step; ``max_step`` caps the Frobenius norm of the dual move."""
        move = eta * np.asarray(gradient, dtype=float)
        if max_step is not None:
            size = math.sqrt(float(np.sum(move * move)))
            if size > max_step:
                move = move * (max_step / size)
        return self.inv_grad(self.grad(theta) - move)

    def bregman(self, a, b) -> float:
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        return float(self.potential(a) - self.potential(b) - np.sum(self.grad(b) * (a - b)))


class EuclideanMap(MirrorMap):
    """``phi = |theta|^2 / 2``: the mirror step is plain gradient descent."""

    name = "euclidean"

    def potential(self, theta):
        theta = np.asarray(theta, dtype=float)
        return 0.5 * float(np.sum(theta * theta))

    def grad(self, theta):
        return np.array(theta, dtype=float)

    def inv_grad(self, dual):
        return np.array(dual, dtype=float)


class BoundedIntervalMap(MirrorMap):
    """Per-coordinate entropy barrier keeping iterates inside ``(-b, b)``.

    ``phi(mu) = sum (mu+b) log(mu+b) + (b-mu) log(b-mu) + mu``, so
    ``grad = log((b+mu)/(b-mu)) + 1`` and ``inv_grad(y) = b tanh((y-1)/2)``.
    ``bound`` may be a scalar or a per-coordinate array.
    """

    name = "bounded"

    def __init__(self, bound=1.1):
        bound = np.asarray(bound, dtype=float)
        if np.any(bound <= 0):
            raise ValueError("bound must be positive")
        self.bound = bound

    def contains(self, theta) -> bool:
        return bool(np.all(np.abs(np.asarray(theta, dtype=float)) < self.bound))

    def _check(self, theta):
        theta = np.asarray(theta, dtype=float)
        if not self.contains(theta):
            raise ValueError(f"parameter outside the open interval (-{self.bound}, {self.bound})")
        return theta

    def potential(self, theta):
        mu = self._check(theta)
        b = self.bound
        return float(np.sum(xlogy(mu + b, mu + b) + xlogy(b - mu, b - mu) + mu))

    def grad(self, theta):
        mu = self._check(theta)
        return np.log((self.bound + mu) / (self.bound - mu)) + 1.0

    def inv_grad(self, dual):
        out = self.bound * np.tanh((np.asarray(dual, dtype=float) - 1.0) / 2.0)
        # tanh saturates to exactly +-1 for large arguments; stay in the open set
        inner = np.nextafter(self.bound, 0.0)
        return np.clip(out, -inner, inner)


class MatrixEntropyMap(MirrorMap):
    """``phi(S) = tr(S log S - S)``: gradient ``log S``, inverse ``exp``.

    With ``accelerated`` the logarithm and exponential use truncated series
    after a scalar shift (``exp(Y) = e^s exp(Y - sI)``,
    ``log(S) = log(S/s) + log(s) I`` with ``s`` the mean eigenvalue), which
    recenters the spectrum where the series are accurate. Inputs whose
    Gershgorin enclosure leaves ``exp_radius`` / ``log_radius`` fall back to
    the eigendecomposition path.
    """

    name = "matrix_entropy"

    def __init__(self, accelerated=False, approx: ApproxConfig | None = None,
                 exp_radius: float = 1.0, log_radius: float = 0.5):
        self.accelerated = accelerated
        self.approx = approx or ApproxConfig()
        self.exp_radius = exp_radius
        self.log_radius = log_radius
        self.fallbacks = 0

    def contains(self, theta) -> bool:
        return is_positive_definite(theta)

    def potential(self, theta):
        s = np.asarray(theta, dtype=float)
        return float(np.trace(s @ exact_log_sym(s) - s))

    def bregman(self, a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        return float(np.trace(a @ (exact_log_sym(a) - exact_log_sym(b)) - a + b))

    def grad(self, theta):
        s = np.asarray(theta, dtype=float)
        if not self.accelerated:
            return log_spd_unchecked(s)
        m = s.shape[0]
        shift = float(np.trace(s)) / m
        if shift > 0:
            d = s / shift
            lo, hi = gershgorin_bounds(d)
            if lo > 0 and max(1.0 - lo, hi - 1.0) < self.log_radius:
                return truncated_log(d, self.approx.k_log, check=False) + math.log(shift) * np.eye(m)
        self.fallbacks += 1
        log.debug("truncated log outside its convergence region; using eigendecomposition")
        return log_spd_unchecked(s)

    def inv_grad(self, dual):
        y = symmetrize(np.asarray(dual, dtype=float))
        if not self.accelerated:
            return exp_sym_unchecked(y)
        m = y.shape[0]
        shift = float(np.trace(y)) / m
        z = y - shift * np.eye(m)
        lo, hi = gershgorin_bounds(z)
        k = self.approx.k_exp
        if max(-lo, hi) <= self.exp_radius and k > -lo:
            return math.exp(shift) * truncated_exp(z, k, check=False)
        self.fallbacks += 1
        log.debug("truncated exp outside its accuracy region; using eigendecomposition")
        return exp_sym_unchecked(y)


def mirror_euclidean() -> EuclideanMap:
    return EuclideanMap()


def mirror_bounded_interval(bound=1.1) -> BoundedIntervalMap:
    return BoundedIntervalMap(bound)


def mirror_matrix_entropy(accelerated: bool = False, approx: ApproxConfig | None = None,
                          **kwargs) -> MatrixEntropyMap:
    return MatrixEntropyMap(accelerated, approx, **kwargs)


# --------------------------------------------------------------------------
# objective


def _as_window(stream, dim: int) -> np.ndarray:
    x = np.asarray(stream, dtype=float)
    if x.ndim == 1 and dim == 1:
        x = x.reshape(-1, 1)
    x = np.atleast_2d(x)
    if x.shape[0] == 0:
        raise ValueError("empty window")
    if x.shape[1] != dim:
        raise ValueError(f"window has dimension {x.shape[1]}, expected {dim}")
    return x


def _log_prior_args(rho: float) -> tuple[float, float]:
    if not 0 < rho <= 1:
        raise ValueError(f"rho must lie in (0, 1], got {rho}")
    return math.log(rho), (math.log1p(-rho) if rho < 1 else -math.inf)


class WindowObjective:
    """Negative log mixture likelihood over a fixed window and fixed ``g``."""

    def __init__(self, stream, g: IncrementDistribution, rho: float, log_g=None):
        self.x = _as_window(stream, g.dim)
        self.g = g
        self.rho = rho
        self._lr, self._l1m = _log_prior_args(rho)
        self.log_g = gaussian_log_pdf(g.mean, g.chol, self.x) if log_g is None else np.asarray(log_g, dtype=float)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def evaluate(self, mu, sigma, want_mu=True, want_sigma=True):
        """Objective and the requested gradients at ``(mu, sigma)``."""
        want = (1 if want_mu else 0) | (2 if want_sigma else 0)
        try:
            lse, gmu, gsig = kernels.window_objective(
                self.x, self.log_g, mu, sigma, self._lr, self._l1m, want)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError("post-change covariance is not positive definite") from exc
        return -lse, gmu, gsig

    def value(self, mu, sigma) -> float:
        return self.evaluate(mu, sigma, False, False)[0]


def neg_log_likelihood(stream, g: IncrementDistribution, mu1, sigma1, rho: float = 0.04) -> float:
    """Log-domain negative mixture likelihood (see module docstring)."""
    return WindowObjective(stream, g, rho).value(np.atleast_1d(mu1), np.atleast_2d(sigma1))


def grad_mu(stream, g, mu1, sigma1, rho: float = 0.04) -> np.ndarray:
    return WindowObjective(stream, g, rho).evaluate(
        np.atleast_1d(mu1), np.atleast_2d(sigma1), want_sigma=False)[1]


def grad_sigma(stream, g, mu1, sigma1, rho: float = 0.04) -> np.ndarray:
    return WindowObjective(stream, g, rho).evaluate(
        np.atleast_1d(mu1), np.atleast_2d(sigma1), want_mu=False)[2]


# --------------------------------------------------------------------------
# projected gradient descent


@dataclass(frozen=True)
class LearnerConfig:
    """PGD settings.

    ``step=None`` selects the ``1/sqrt(max_iters)`` schedule. Gradients are
    divided by the window length before the step, so ``step`` acts on the
    per-sample objective while ``stop_tol`` applies to the summed objective.
    """

    max_iters: int = 300
    step: float | None = None
    stop_tol: float = 1e-3
    early_stop: bool = True
    accelerated: bool = False
    output_mode: str = "best"
    mean_map: str = "bounded"
    mean_bound: float = 1.1
    approx: ApproxConfig = field(default_factory=ApproxConfig)
    exp_radius: float = 1.0
    log_radius: float = 0.5
    max_dual_step: float | None = 1.0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if self.stop_tol <= 0:
            raise ValueError("stop_tol must be positive")
        if self.step is not None and self.step <= 0:
            raise ValueError("step must be positive")
        if self.output_mode not in ("best", "averaged"):
            raise ValueError(f"output_mode must be 'best' or 'averaged', got {self.output_mode!r}")
        if self.mean_map not in ("bounded", "euclidean"):
            raise ValueError(f"mean_map must be 'bounded' or 'euclidean', got {self.mean_map!r}")

    @property
    def eta(self) -> float:
        return self.step if self.step is not None else 1.0 / math.sqrt(self.max_iters)

    def mean_mirror(self, bound=None) -> MirrorMap:
        if self.mean_map == "euclidean":
            return mirror_euclidean()
        return mirror_bounded_interval(self.mean_bound if bound is None else bound)

    def cov_mirror(self) -> MatrixEntropyMap:
        return mirror_matrix_entropy(self.accelerated, self.approx,
                                     exp_radius=self.exp_radius, log_radius=self.log_radius)

    @classmethod
    def from_dict(cls, d: dict) -> "LearnerConfig":
        d = dict(d)
        if "approx" in d and isinstance(d["approx"], dict):
            d["approx"] = ApproxConfig(**d["approx"])
        return cls(**d)


@dataclass
class LearnTrace:
    objective: list[float]
    grad_norm: list[float]
    best_index: int
    iterations: int
    converged: bool
    averaged_objective: float
    fallbacks: int = 0

    @property
    def best_value(self) -> float:
        return self.objective[self.best_index]


@dataclass
class FitResult:
    mu: np.ndarray
    sigma: np.ndarray
    trace: LearnTrace
    mu_avg: np.ndarray
    sigma_avg: np.ndarray

    @property
    def distribution(self) -> IncrementDistribution:
        return IncrementDistribution(self.mu, self.sigma)


def pgd_fit(stream, g: IncrementDistribution, config: LearnerConfig | None = None,
            warm_start=None, rho: float = 0.04, log_g=None, mean_bound=None,
            callback=None) -> FitResult:
    """Learn ``(mu1, Sigma1)`` on a window by alternating mirror steps.

    Starts from ``warm_start`` when given, otherwise from the parameters of
    ``g``. Stops when the objective changes by at most ``stop_tol`` between
    iterations (if ``early_stop``) or after ``max_iters`` iterations.
    ``callback(e, mu, sigma, value)`` is called after every iteration.
    """
    config = config or LearnerConfig()
    obj = WindowObjective(stream, g, rho, log_g=log_g)
    mean_map = config.mean_mirror(mean_bound)
    cov_map = config.cov_mirror()

    if warm_start is None:
        mu, sigma = g.mean.copy(), np.array(g.cov, dtype=float)
    else:
        mu = np.atleast_1d(np.asarray(warm_start[0], dtype=float)).copy()
        sigma = np.atleast_2d(np.asarray(warm_start[1], dtype=float)).copy()
    if mu.shape != (g.dim,) or sigma.shape != (g.dim, g.dim):
        raise ValueError("warm start does not match the distribution dimension")
    if not mean_map.contains(mu):
        raise ValueError("initial mean lies outside the mirror map's domain")
    if not cov_map.contains(sigma):
        raise NotPositiveDefiniteError("initial covariance is not positive definite")

    eta = config.eta
    n = obj.n
    value, gmu, _ = obj.evaluate(mu, sigma, want_sigma=False)
    values = [value]
    norms = []
    best = (value, mu, sigma)
    best_index = 0
    sum_mu = np.zeros_like(mu)
    sum_sigma = np.zeros_like(sigma)
    converged = False
    e = 0
    for e in range(1, config.max_iters + 1):
        mu = mean_map.step(mu, gmu / n, eta, config.max_dual_step)
        _, _, gsig = obj.evaluate(mu, sigma, want_mu=False)
        sigma = cov_map.step(sigma, gsig / n, eta, config.max_dual_step)
        new_value, gmu_next, _ = obj.evaluate(mu, sigma, want_sigma=False)
        norms.append(float(np.sqrt(np.sum(gmu**2) + np.sum(gsig**2))) / n)
        gmu = gmu_next
        values.append(new_value)
        if callback is not None:
            callback(e, mu, sigma, new_value)
        sum_mu += mu
        sum_sigma += sigma
        if new_value < best[0]:
            best = (new_value, mu, sigma)
            best_index = e
        if config.early_stop and abs(value - new_value) <= config.stop_tol:
            converged = True
            break
        value = new_value

    mu_avg = sum_mu / e
    sigma_avg = symmetrize(sum_sigma / e)
    avg_value = obj.value(mu_avg, sigma_avg)
    trace = LearnTrace(values, norms, best_index, e, converged, avg_value, cov_map.fallbacks)
    if config.output_mode == "best":
        out_mu, out_sigma = best[1], best[2]
    else:
        out_mu, out_sigma = mu_avg, sigma_avg
    return FitResult(np.array(out_mu), np.array(out_sigma), trace, mu_avg, sigma_avg)


def restricted_set_check(mu1, sigma1, stream, tol: float = 1e-9) -> bool:
    """Whether ``Sigma1 - v_k v_k^T / (N-k+1)`` is PSD for every suffix ``k``.

    ``v_k`` is the summed residual of samples ``k..N`` about ``mu1``. This
    is a diagnostic of the region where the objective is convex in the mean;
    it is never used as a projection.
    """
    sigma1 = np.atleast_2d(np.asarray(sigma1, dtype=float))
    x = _as_window(stream, sigma1.shape[0])
    r = x - np.atleast_1d(mu1)
    n = x.shape[0]
    suffix = np.cumsum(r[::-1], axis=0)[::-1]
    counts = np.arange(n, 0, -1, dtype=float)
    for v, cnt in zip(suffix, counts):
        if np.linalg.eigvalsh(sigma1 - np.outer(v, v) / cnt)[0] < -tol:
            return False
    return True
