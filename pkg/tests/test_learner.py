import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import minimize

from gridoutage.errors import NotPositiveDefiniteError
from gridoutage.gaussian import IncrementDistribution, log_pdf, sample
from gridoutage.learner import (
    BoundedIntervalMap,
    LearnerConfig,
    grad_mu,
    grad_sigma,
    mirror_bounded_interval,
    mirror_euclidean,
    mirror_matrix_entropy,
    neg_log_likelihood,
    pgd_fit,
    restricted_set_check,
)
from oracles import naive_mixture, random_spd, random_sym, scalar_pdf

G = IncrementDistribution([0.0], [[0.5]])
F = IncrementDistribution([1.0], [[0.2]])


def _theta_star(x, g):
    """Minimizer of the objective by BFGS over (mu, log var)."""
    def fun(p):
        return neg_log_likelihood(x, g, [p[0]], [[math.exp(p[1])]])
    res = minimize(fun, [0.5, math.log(0.3)], method="BFGS", options={"gtol": 1e-9})
    return res.x[0], math.exp(res.x[1]), res.fun


# --------------------------------------------------------------------------
# objective


def test_single_sample_point_prior_is_minus_log_f():
    x = np.array([[0.7]])
    val = neg_log_likelihood(x, G, [0.3], [[0.4]], rho=1.0)
    assert val == -log_pdf(IncrementDistribution([0.3], [[0.4]]), 0.7)


def test_objective_prefers_true_parameters():
    x = sample(F, 1, 200)
    assert neg_log_likelihood(x, G, F.mean, F.cov) < neg_log_likelihood(x, G, G.mean, G.cov)


def test_objective_matches_direct_products():
    rng = np.random.default_rng(2)
    for n in range(1, 21):
        x = rng.normal(0.5, 0.6, size=n)
        mu, var = rng.uniform(-0.5, 1.5), rng.uniform(0.1, 1.0)
        direct, _ = naive_mixture(x, lambda v: scalar_pdf(v, 0.0, 0.5), lambda v: scalar_pdf(v, mu, var), 0.04)
        assert neg_log_likelihood(x, G, [mu], [[var]]) == pytest.approx(-math.log(direct), abs=1e-9)


def test_objective_errors():
    with pytest.raises(NotPositiveDefiniteError):
        neg_log_likelihood([0.1, 0.2], G, [0.0], [[-1.0]])
    with pytest.raises(ValueError):
        neg_log_likelihood(np.zeros((0, 1)), G, [0.0], [[1.0]])


def test_gradient_small_at_truth():
    x = sample(F, 1, 2000)
    gm = grad_mu(x, G, F.mean, F.cov) / len(x)
    gs = grad_sigma(x, G, F.mean, F.cov) / len(x)
    assert math.sqrt(float(np.sum(gm**2) + np.sum(gs**2))) <= 0.05


def _fd_check(x, g, mu, sigma, h=1e-6):
    def val(m, s):
        return neg_log_likelihood(x, g, m, s)
    gm = grad_mu(x, g, mu, sigma)
    gs = grad_sigma(x, g, mu, sigma)
    m = mu.size
    fd_mu = np.array([(val(mu + h * e, sigma) - val(mu - h * e, sigma)) / (2 * h) for e in np.eye(m)])
    fd_sig = np.zeros((m, m))
    for i in range(m):
        for k in range(i, m):
            d = np.zeros((m, m))
            d[i, k] = d[k, i] = 1.0
            dd = (val(mu, sigma + h * d) - val(mu, sigma - h * d)) / (2 * h)
            fd_sig[i, k] = fd_sig[k, i] = dd if i == k else dd / 2
    rel_mu = np.linalg.norm(gm - fd_mu) / max(np.linalg.norm(fd_mu), 1e-12)
    rel_sig = np.linalg.norm(gs - fd_sig) / max(np.linalg.norm(fd_sig), 1e-12)
    return rel_mu, rel_sig


def test_gradients_match_finite_differences_3d():
    rng = np.random.default_rng(3)
    for _ in range(5):
        g = IncrementDistribution(np.zeros(3), random_spd(rng, 3, 0.5, 2.0))
        x = rng.normal(0.3, 1.0, size=(12, 3))
        mu = rng.normal(0.0, 0.3, size=3)
        sigma = random_spd(rng, 3, 0.5, 2.0)
        rel_mu, rel_sig = _fd_check(x, g, mu, sigma)
        assert rel_mu <= 1e-5 and rel_sig <= 1e-5


def test_grad_sigma_symmetric():
    rng = np.random.default_rng(4)
    g = IncrementDistribution(np.zeros(4), np.eye(4))
    gs = grad_sigma(rng.normal(size=(30, 4)), g, np.zeros(4), random_spd(rng, 4))
    assert np.max(np.abs(gs - gs.T)) <= 1e-12


# --------------------------------------------------------------------------
# mirror maps


def test_euclidean_map():
    mp = mirror_euclidean()
    x = np.array([0.3, -2.0])
    np.testing.assert_array_equal(mp.inv_grad(mp.grad(x)), x)
    np.testing.assert_array_equal(mp.step(x, np.array([5.0, 1.0]), 0.0), x)
    np.testing.assert_allclose(mp.step(np.zeros(2), np.array([1.0, -2.0]), 0.1), [-0.1, 0.2])


def test_bounded_interval_map_closed_forms():
    mp = mirror_bounded_interval(1.1)
    assert mp.grad(np.array([0.0]))[0] == 1.0
    assert mp.inv_grad(np.array([1.0]))[0] == 0.0
    out = mp.inv_grad(np.array([-1e3, 1e3]))
    assert np.all(np.abs(out) < 1.1)
    # gradient of the potential by central differences
    mu = np.array([0.4, -0.9])
    h = 1e-6
    fd = [(mp.potential(mu + h * e) - mp.potential(mu - h * e)) / (2 * h) for e in np.eye(2)]
    np.testing.assert_allclose(mp.grad(mu), fd, rtol=1e-7)
    with pytest.raises(ValueError):
        mp.grad(np.array([1.1]))


def test_bounded_interval_steps_stay_interior():
    rng = np.random.default_rng(5)
    mp = mirror_bounded_interval(1.1)
    for _ in range(10_000):
        mu = rng.uniform(-1.0999, 1.0999, size=2)
        nxt = mp.step(mu, rng.normal(0, 50, size=2), 0.1)
        assert np.all(np.abs(nxt) < 1.1)


def test_bounded_interval_array_bound():
    mp = BoundedIntervalMap([1.0, 2.0])
    x = np.array([0.9, -1.9])
    np.testing.assert_allclose(mp.inv_grad(mp.grad(x)), x, atol=1e-12)


def test_matrix_entropy_eta_zero_is_identity():
    rng = np.random.default_rng(6)
    mp = mirror_matrix_entropy()
    s = random_spd(rng, 4)
    assert np.max(np.abs(mp.step(s, random_sym(rng, 4, 1.0), 0.0) - s)) <= 1e-9


def test_matrix_entropy_accelerated_matches_exact():
    rng = np.random.default_rng(7)
    exact, fast = mirror_matrix_entropy(False), mirror_matrix_entropy(True)
    for _ in range(200):
        s = random_spd(rng, 4, 0.5, 1.5)
        grad = random_sym(rng, 4, 1.0)
        grad *= rng.uniform(0, 0.3) / np.linalg.norm(grad, 2)
        diff = np.max(np.abs(exact.step(s, grad, 1.0) - fast.step(s, grad, 1.0)))
        assert diff <= 1e-5


def test_matrix_entropy_falls_back_outside_region(caplog):
    mp = mirror_matrix_entropy(True)
    s = np.diag([0.01, 5.0])
    with caplog.at_level("DEBUG", logger="gridoutage.learner"):
        out = mp.grad(s)
    np.testing.assert_allclose(out, np.diag(np.log([0.01, 5.0])), atol=1e-12)
    assert mp.fallbacks == 1
    assert "eigendecomposition" in caplog.text


@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_bregman_nonnegative(seed, m):
    rng = np.random.default_rng(seed)
    a, b = random_spd(rng, m), random_spd(rng, m)
    ent = mirror_matrix_entropy()
    assert ent.bregman(a, b) > 0
    assert ent.bregman(a, a) == pytest.approx(0.0, abs=1e-10)
    bi = mirror_bounded_interval(1.1)
    u, v = rng.uniform(-1.09, 1.09, m), rng.uniform(-1.09, 1.09, m)
    assert bi.bregman(u, v) >= 0
    assert bi.bregman(u, u) == pytest.approx(0.0, abs=1e-12)
    eu = mirror_euclidean()
    assert eu.bregman(u, v) == pytest.approx(0.5 * np.sum((u - v) ** 2))


# --------------------------------------------------------------------------
# PGD


def test_pgd_recovers_fig4_scenario():
    x = sample(F, 8, 500)
    res = pgd_fit(x, G)
    assert abs(res.mu[0] - 1.0) <= 0.1 and abs(res.sigma[0, 0] - 0.2) <= 0.05
    assert res.trace.best_value <= min(res.trace.objective) + 1e-12
    assert res.trace.best_value <= res.trace.averaged_objective


def test_pgd_warm_start_at_optimum_stops_quickly():
    x = sample(F, 9, 500)
    mu, var, _ = _theta_star(x, G)
    res = pgd_fit(x, G, warm_start=(np.array([mu]), np.array([[var]])))
    assert res.trace.converged and res.trace.iterations <= 2


def test_pgd_approaches_optimum_as_budget_grows():
    x = sample(F, 10, 300)
    _, _, best = _theta_star(x, G)
    gaps, avg_gaps = [], []
    for e in (25, 100, 400, 1600):
        res = pgd_fit(x, G, LearnerConfig(max_iters=e, early_stop=False))
        gaps.append(res.trace.best_value - best)
        avg_gaps.append(res.trace.averaged_objective - best)
        assert res.trace.best_value <= res.trace.averaged_objective
    assert all(b <= a + 1e-9 for a, b in zip(gaps, gaps[1:]))
    assert all(b < a for a, b in zip(avg_gaps, avg_gaps[1:]))
    assert gaps[-1] <= 1e-6


def test_pgd_iterates_feasible():
    rng = np.random.default_rng(11)
    g = IncrementDistribution(np.zeros(3), np.eye(3) * 0.5)
    x = rng.normal(0.6, 0.8, size=(80, 3))
    seen = []

    def cb(e, mu, sigma, value):
        seen.append((mu.copy(), sigma.copy()))

    for acc in (False, True):
        pgd_fit(x, g, LearnerConfig(accelerated=acc), callback=cb)
    assert seen
    for mu, sigma in seen:
        assert np.all(np.abs(mu) < 1.1)
        assert np.linalg.eigvalsh(sigma)[0] > 0


def test_pgd_averaged_output_mode():
    x = sample(F, 12, 200)
    res = pgd_fit(x, G, LearnerConfig(output_mode="averaged"))
    np.testing.assert_array_equal(res.mu, res.mu_avg)


def test_pgd_reports_non_convergence():
    res = pgd_fit(sample(F, 13, 100), G, LearnerConfig(max_iters=3))
    assert not res.trace.converged and res.trace.iterations == 3


def test_pgd_rejects_infeasible_warm_start():
    with pytest.raises(ValueError):
        pgd_fit(sample(F, 1, 10), G, warm_start=(np.array([1.5]), np.array([[0.2]])))
    with pytest.raises(NotPositiveDefiniteError):
        pgd_fit(sample(F, 1, 10), G, warm_start=(np.array([0.5]), np.array([[-0.2]])))
    with pytest.raises(ValueError):
        pgd_fit(sample(F, 1, 10), G, warm_start=(np.zeros(2), np.eye(2)))


def test_learner_config_validation():
    assert LearnerConfig(max_iters=400).eta == pytest.approx(0.05)
    assert LearnerConfig(step=0.3).eta == 0.3
    for bad in ({"max_iters": 0}, {"stop_tol": 0.0}, {"step": -1.0},
                {"output_mode": "last"}, {"mean_map": "box"}):
        with pytest.raises(ValueError):
            LearnerConfig(**bad)
    cfg = LearnerConfig.from_dict({"accelerated": True, "approx": {"k_exp": 8, "k_log": 10}})
    assert cfg.approx.k_exp == 8


def test_restricted_set_check():
    const = np.full((10, 2), 0.3)
    assert restricted_set_check([0.3, 0.3], np.eye(2) * 1e-6, const)
    rng = np.random.default_rng(14)
    x = rng.normal(size=(20, 2))
    assert restricted_set_check([0.0, 0.0], np.eye(2) * 1e6, x)
    assert not restricted_set_check([0.0, 0.0], np.eye(2) * 0.01, x + 3.0)
