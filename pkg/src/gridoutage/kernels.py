"""Backend selection for the change-point kernels.

The compiled extension is used when it was built; otherwise (or when the
``GRIDOUTAGE_PURE_PYTHON`` environment variable is set) the numpy fallback
is loaded. Call sites go through this module so ``use_backend`` can swap
implementations at runtime for benchmarking.
"""
import os

from gridoutage import _fallback

try:
    if os.environ.get("GRIDOUTAGE_PURE_PYTHON"):
        raise ImportError("pure-python backend requested")
    from gridoutage import _kernels as _compiled
except ImportError:
    _compiled = None

_BACKENDS = {"python": _fallback}
if _compiled is not None:
    _BACKENDS["cython"] = _compiled

# Above this dimension the hand-written loops in the compiled objective lose
# to BLAS, so the numpy version is used regardless of backend.
COMPILED_MAX_DIM = 56

BACKEND = None
changepoint_terms = None
log_posterior_ratio = None
_window_objective = None


def window_objective(x, log_g, mu, sigma, log_rho, log1m_rho, want=3):
    """Window objective and gradients; see ``_fallback.window_objective``."""
    if len(mu) > COMPILED_MAX_DIM:
        return _fallback.window_objective(x, log_g, mu, sigma, log_rho, log1m_rho, want)
    return _window_objective(x, log_g, mu, sigma, log_rho, log1m_rho, want)


def available_backends():
    return sorted(_BACKENDS)


def use_backend(name):
    """Route kernel calls to ``"cython"`` or ``"python"``."""
    global BACKEND, changepoint_terms, log_posterior_ratio, _window_objective
    try:
        mod = _BACKENDS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} unavailable; have {available_backends()}") from None
    BACKEND = name
    changepoint_terms = mod.changepoint_terms
    log_posterior_ratio = mod.log_posterior_ratio
    _window_objective = mod.window_objective


use_backend("cython" if _compiled is not None else "python")
