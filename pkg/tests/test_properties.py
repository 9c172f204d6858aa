import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from deltamix.counts import CountSample, parse_counts
from deltamix.dictionary import GammaDictionary
from deltamix.estimator import FitDiagnostics, MixingDensityEstimate, estimate_pi0, predicted_frequencies
from deltamix.inversion import qqstar_matrix
from deltamix.lasso import LassoProblem, kkt_residual, kkt_tolerance, soft_threshold, solve
from deltamix.metrics import delta_g

counts = st.lists(st.integers(0, 300), min_size=1, max_size=200)
finite = st.floats(-1e6, 1e6, allow_nan=False)


@given(counts)
def test_frequencies_are_a_distribution(values):
    s = CountSample.from_counts(values)
    assert math.fsum(s.frequencies) == 1.0
    assert np.all(s.frequencies >= 0)
    assert s.frequencies.size == max(values) + 1


@given(counts)
def test_parse_round_trip(values):
    s = parse_counts("".join(f"{v}\n" for v in values))
    assert s.counts.tolist() == values


@given(finite, st.floats(0, 1e6))
def test_soft_threshold_shrinks(x, t):
    y = soft_threshold(x, t)
    assert abs(y) <= abs(x)
    assert y == 0.0 or np.sign(y) == np.sign(x)
    assert y == x - min(max(x, -t), t)


@given(st.integers(1, 60))
def test_qqstar_symmetric_with_unit_row_bound(L):
    qq = qqstar_matrix(L)
    assert np.array_equal(qq, qq.T)
    assert np.all(qq.sum(axis=1) <= 1 + 1e-12)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.floats(0, 1))
def test_pi0_estimate_in_unit_interval(theta, nu0):
    u0 = np.linspace(0.9, 0.1, len(theta))
    assert 0.0 <= estimate_pi0(np.array(theta), nu0, u0) <= 1.0


@given(
    st.lists(st.tuples(st.floats(1.0, 60.0), st.floats(0.05, 2.0)), min_size=1, max_size=4),
    st.data(),
)
def test_nonnegative_mixtures_predict_subprobabilities(params, data):
    theta = np.array(data.draw(st.lists(st.floats(0, 1), min_size=len(params), max_size=len(params))))
    theta = theta / max(1.0, theta.sum())
    pi0 = data.draw(st.floats(0, max(0.0, 1 - theta.sum())))
    d = GammaDictionary.from_params(params, 0.5 * np.arange(1, 11), 0.5)
    diag = FitDiagnostics(0.0, float(theta.sum()), 0.0, 1, "shortcut", True, 0.0, 1)
    nh = predicted_frequencies(MixingDensityEstimate(pi0=pi0, theta=theta, dictionary=d, diagnostics=diag), 50)
    assert np.all(nh >= -1e-15)
    assert nh.sum() <= pi0 + theta.sum() + 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
def test_lasso_kkt_certificate(p, seed, frac):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(p + 3, p))
    G = A.T @ A / (p + 3)
    r = A.T @ rng.normal(size=p + 3) / (p + 3)
    w = rng.uniform(0.5, 2.0, p)
    amax = float(np.max(2 * np.abs(r) / w))
    prob = LassoProblem(G, r, w, frac * amax)
    sol = solve(prob)
    assert sol.converged
    assert kkt_residual(prob, sol.theta) <= kkt_tolerance(prob)


@given(st.lists(st.floats(0.01, 10), min_size=2, max_size=20), st.floats(1e-3, 1e3))
def test_density_error_scale_free(g, c):
    g = np.array(g)
    gh = g[::-1].copy()
    assert np.isclose(delta_g(c * g, c * gh), delta_g(g, gh), rtol=1e-9)
