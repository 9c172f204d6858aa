import itertools

import numpy as np
import pytest

from deltamix.errors import ConfigurationError
from deltamix.lasso import (
    GramFactor,
    LassoProblem,
    alpha_max,
    floor_weights,
    kkt_residual,
    kkt_tolerance,
    objective,
    soft_threshold,
    solve,
)


def random_problem(rng, p, rank=None, alpha_frac=0.1, theta_star=None):
    """Random PSD Gram ``A'A / m`` with ``r`` in its range, as in least squares."""
    m = p + 2 if rank is None else rank
    A = rng.normal(size=(m, p))
    G = A.T @ A / m
    if theta_star is None:
        r = A.T @ rng.normal(size=m) / m
    else:
        r = G @ theta_star + A.T @ rng.normal(scale=0.1, size=m) / m
    w = rng.uniform(0.5, 2.0, size=p)
    prob = LassoProblem(G, r, w, 0.0)
    return prob.with_alpha(alpha_frac * alpha_max(prob))


def fista(prob, iters=200000, tol=1e-14):
    """Accelerated proximal gradient on F = t'Gt - 2t'r + a sum w|t|."""
    G, r = prob.gram, prob.linear
    step = 1.0 / (2.0 * np.linalg.eigvalsh(G).max())
    thr = step * prob.alpha * prob.weights
    x = np.zeros(prob.p)
    y, t = x.copy(), 1.0
    for _ in range(iters):
        grad = 2.0 * (G @ y - r)
        z = y - step * grad
        xn = np.sign(z) * np.maximum(np.abs(z) - thr, 0.0)
        tn = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = xn + ((t - 1.0) / tn) * (xn - x)
        if np.max(np.abs(xn - x)) < tol:
            x = xn
            break
        x, t = xn, tn
    return x


def brute_force(prob, lo=-2.0, hi=2.0):
    """Grid minimum of F over [lo, hi]^p: 0.05 grid, then 1e-3 around the best cell."""
    p = prob.p
    coarse = np.arange(lo, hi + 1e-12, 0.05)
    pts = np.array(list(itertools.product(coarse, repeat=p)))
    vals = _batch_objective(prob, pts)
    c = pts[np.argmin(vals)]
    axes = [np.arange(max(lo, ci - 0.05), min(hi, ci + 0.05) + 1e-12, 1e-3) for ci in c]
    fine = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, p)
    vals = _batch_objective(prob, fine)
    return float(vals.min())


def _batch_objective(prob, T):
    return np.einsum("ij,jk,ik->i", T, prob.gram, T) - 2 * T @ prob.linear + prob.alpha * np.abs(T) @ prob.weights


def test_soft_threshold():
    assert soft_threshold(5.0, 2.0) == 3.0
    assert soft_threshold(-1.0, 2.0) == 0.0
    assert soft_threshold(-3.5, 0.0) == -3.5
    assert np.array_equal(soft_threshold(np.array([-3.0, 0.5, 4.0]), 1.0), [-2.0, 0.0, 3.0])
    with pytest.raises(ValueError):
        soft_threshold(1.0, -0.1)


def test_scalar_problem():
    # minimize t^2 - 2t + |t|: t = 1/2
    sol = solve(LassoProblem([[1.0]], [1.0], [1.0], 1.0))
    assert sol.theta[0] == pytest.approx(0.5, abs=1e-12)
    assert sol.converged


def test_alpha_max():
    assert alpha_max(LassoProblem([[1.0]], [0.0], [1.0], 0.0)) == 0.0
    assert alpha_max(LassoProblem([[1.0]], [1.0], [2.0], 0.0)) == 1.0


def test_zero_above_alpha_max():
    rng = np.random.default_rng(0)
    for _ in range(20):
        base = random_problem(rng, 8)
        for f in (1.0, 1.01):
            prob = base.with_alpha(f * alpha_max(base))
            sol = solve(prob, init=rng.normal(size=8))
            assert np.all(sol.theta == 0.0) and sol.converged
            assert kkt_residual(prob, np.zeros(8)) == 0.0


def test_kkt_at_zero_without_penalty():
    r = np.array([0.3, -1.7, 0.9])
    prob = LassoProblem(np.eye(3), r, np.ones(3), 0.0)
    assert kkt_residual(prob, np.zeros(3)) == pytest.approx(2 * 1.7)


def test_kkt_certificate_on_random_instances():
    rng = np.random.default_rng(42)
    for i in range(100):
        p = int(rng.integers(2, 40))
        rank = p if i % 2 == 0 else int(rng.integers(1, p + 1))
        prob = random_problem(rng, p, rank, alpha_frac=rng.uniform(0.01, 0.9))
        sol = solve(prob)
        assert sol.converged
        assert sol.kkt_residual <= kkt_tolerance(prob)
        assert kkt_residual(prob, sol.theta) == sol.kkt_residual


@pytest.mark.parametrize("seed", range(10))
def test_matches_proximal_gradient(seed):
    rng = np.random.default_rng(100 + seed)
    prob = random_problem(rng, 3, alpha_frac=0.2)
    sol = solve(prob)
    ref = fista(prob)
    assert abs(sol.objective - objective(prob, ref)) <= 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_brute_force_cannot_beat_solution(seed):
    rng = np.random.default_rng(200 + seed)
    prob = random_problem(rng, 3, alpha_frac=0.3, theta_star=rng.uniform(-1, 1, 3))
    sol = solve(prob)
    assert np.all(np.abs(sol.theta) <= 2.0)
    assert brute_force(prob) >= sol.objective - 1e-4


def test_scaling_invariance():
    rng = np.random.default_rng(7)
    prob = random_problem(rng, 12, alpha_frac=0.2)
    a = solve(prob)
    for c in (0.1, 3.0, 250.0):
        b = solve(LassoProblem(prob.gram, prob.linear, c * prob.weights, prob.alpha / c))
        assert np.allclose(a.theta, b.theta, rtol=1e-9, atol=1e-12)


def test_diagonal_gram_closed_form():
    rng = np.random.default_rng(9)
    d = rng.uniform(0.5, 3.0, 10)
    r = rng.normal(size=10)
    w = rng.uniform(0.5, 2.0, 10)
    alpha = 0.7
    sol = solve(LassoProblem(np.diag(d), r, w, alpha))
    assert np.allclose(sol.theta, soft_threshold(r, alpha * w / 2) / d, rtol=0, atol=1e-14)


def test_objective_monotone_over_sweeps():
    rng = np.random.default_rng(3)
    for rank in (30, 6):
        prob = random_problem(rng, 30, rank, alpha_frac=0.05)
        sol = solve(prob, record_trace=True, max_iter=300)
        assert sol.trace is not None and sol.trace.size >= 2
        assert np.all(np.diff(sol.trace) <= 1e-12 * (1 + np.abs(sol.trace[:-1])))


def test_warm_start_reaches_same_objective():
    rng = np.random.default_rng(4)
    prob = random_problem(rng, 25, 10, alpha_frac=0.1)
    cold = solve(prob)
    warm = solve(prob, init=solve(prob.with_alpha(2 * prob.alpha)).theta)
    assert warm.converged and cold.converged
    assert warm.objective == pytest.approx(cold.objective, rel=1e-8, abs=1e-10)


def test_non_convergence_is_reported_not_raised():
    rng = np.random.default_rng(5)
    prob = random_problem(rng, 60, 8, alpha_frac=1e-4)
    sol = solve(prob, max_iter=1, tol=1e-15, kkt_tol=1e-300)
    assert not sol.converged
    assert sol.iterations == 1


def test_invalid_problems():
    with pytest.raises(ConfigurationError):
        LassoProblem(np.eye(2), [1.0], [1.0], 0.0)
    with pytest.raises(ConfigurationError):
        LassoProblem(np.eye(2), [1.0, 1.0], [1.0, 0.0], 0.0)
    with pytest.raises(ConfigurationError):
        LassoProblem(np.diag([1.0, 0.0]), [1.0, 1.0], [1.0, 1.0], 0.0)
    with pytest.raises(ConfigurationError):
        LassoProblem(np.eye(2), [1.0, 1.0], [1.0, 1.0], -1.0)


def test_floor_weights():
    assert floor_weights([0.0, 1.0, 3.0]).tolist() == [2.0, 1.0, 3.0]
    assert floor_weights([0.0, 0.0]).tolist() == [1.0, 1.0]
    assert floor_weights([2.0, 5.0]).tolist() == [2.0, 5.0]


def test_gram_factor_reproduces_gram():
    rng = np.random.default_rng(6)
    A = rng.normal(size=(5, 20))
    G = A.T @ A
    f = GramFactor(G)
    assert f.rank == 5
    assert np.allclose(f.B.T @ f.B, G, atol=1e-10)
    assert np.allclose(f.diag, np.diag(G))
