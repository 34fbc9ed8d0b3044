"""Pure-numpy change-point kernels; same contract as the compiled ``_kernels``."""
import numpy as np


def _log_terms(log_g, log_f, log_rho, log1m_rho):
    n = log_g.shape[0]
    # log pi(k) for k = 1..n; the k = 1 term must not touch log1m_rho (may be -inf)
    steps = np.arange(n, dtype=float)
    log_prior = np.full(n, log_rho)
    if n > 1:
        log_prior[1:] += steps[1:] * log1m_rho
    pre = np.concatenate(([0.0], np.cumsum(log_g)[:-1]))
    post_before = np.concatenate(([0.0], np.cumsum(log_f)[:-1]))
    return log_prior + pre + (np.sum(log_f) - post_before)


def changepoint_terms(log_g, log_f, log_rho, log1m_rho):
    """Log-sum-exp over change points and cumulative responsibilities.

    For a window of length ``N`` with per-sample log densities ``log_g`` and
    ``log_f`` the k-th term is
    ``log pi(k) + sum_{n<k} log_g[n] + sum_{n>=k} log_f[n]``. Returns the
    log-sum-exp of the terms and ``c[n] = sum_{k<=n} w_k`` where ``w`` is the
    softmax of the terms (posterior weight that sample ``n`` is post-change).
    """
    log_g = np.ascontiguousarray(log_g, dtype=float)
    log_f = np.ascontiguousarray(log_f, dtype=float)
    t = _log_terms(log_g, log_f, log_rho, log1m_rho)
    top = np.max(t)
    if not np.isfinite(top):
        return float(top), np.zeros_like(t)
    e = np.exp(t - top)
    s = np.sum(e)
    return float(top + np.log(s)), np.cumsum(e) / s


def log_posterior_ratio(log_g, log_f, log_rho, log1m_rho):
    log_g = np.ascontiguousarray(log_g, dtype=float)
    log_f = np.ascontiguousarray(log_f, dtype=float)
    t = _log_terms(log_g, log_f, log_rho, log1m_rho)
    top = np.max(t)
    num = top + np.log(np.sum(np.exp(t - top))) if np.isfinite(top) else top
    den = log_g.shape[0] * log1m_rho + np.sum(log_g)
    return float(num - den)


_LOG_2PI = float(np.log(2.0 * np.pi))


def window_objective(x, log_g, mu, sigma, log_rho, log1m_rho, want=3):
    """Mixture log-likelihood over a window and its gradients.

    Returns ``(lse, grad_mu, grad_sigma)`` where ``-lse`` is the objective
    and the gradients are those of ``-lse``; a gradient is ``None`` unless
    requested through the bit mask ``want`` (1: mean, 2: covariance).
    Raises ``numpy.linalg.LinAlgError`` if ``sigma`` is not positive definite.
    """
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    m = mu.shape[0]
    chol = np.linalg.cholesky(sigma)
    r = x - mu
    z = np.linalg.solve(chol, r.T)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    log_f = -0.5 * (np.sum(z * z, axis=0) + logdet + m * _LOG_2PI)
    lse, c = changepoint_terms(log_g, log_f, log_rho, log1m_rho)
    gmu = gsig = None
    if want:
        linv = np.linalg.solve(chol, np.eye(m))
        prec = linv.T @ linv
        if want & 1:
            gmu = -prec @ (c @ r)
        if want & 2:
            scatter = (r * c[:, None]).T @ r
            gsig = 0.5 * np.sum(c) * prec - 0.5 * prec @ scatter @ prec
            gsig = 0.5 * (gsig + gsig.T)
    return lse, gmu, gsig
