import numpy as np
import pytest
from scipy import integrate

from deltamix.dictionary import GammaDictionary
from deltamix.errors import ConfigurationError, DomainError
from deltamix.estimator import FitDiagnostics, MixingDensityEstimate
from deltamix.metrics import delta_g, delta_nu, error_grid
from deltamix.selection import density_error
from deltamix.simulation import (
    CASES,
    Component,
    TestDensity,
    parse_cases,
    run_seed,
    run_study,
    sample_counts,
    sample_lambda,
    simulate_counts,
)


@pytest.mark.parametrize("name", list(CASES))
def test_case_densities_integrate_to_continuous_weight(name):
    d = CASES[name]
    mass, _ = integrate.quad(d.pdf, 0, 200, points=[20, 40, 80], limit=400)
    assert mass == pytest.approx(1.0 - d.pi0, abs=1e-7)


@pytest.mark.parametrize("name", list(CASES))
def test_sampled_intensity_moments(name):
    d = CASES[name]
    lam = sample_lambda(d, 100_000, 1)
    mean, _ = integrate.quad(lambda x: x * d.pdf(x), 0, 200, points=[20, 40, 80], limit=400)
    second, _ = integrate.quad(lambda x: x * x * d.pdf(x), 0, 200, points=[20, 40, 80], limit=400)
    sd = np.sqrt(second - mean**2)
    assert abs(lam.mean() - mean) <= 4 * sd / np.sqrt(lam.size)
    assert d.mean() == pytest.approx(mean, rel=1e-6)
    assert np.mean(lam == 0.0) == pytest.approx(d.pi0, abs=0.006)


def test_case1_count_mean():
    y = simulate_counts(CASES["1"], 100_000, run_seed(3, 0, 0))
    # Poisson-Gamma(3, 1): mean 3, variance 3 + 3
    assert abs(y.mean() - 3.0) <= 3 * np.sqrt(6.0 / y.size)
    assert y.var() == pytest.approx(6.0, rel=0.05)


def test_case8_zero_fraction():
    y = simulate_counts(CASES["8"], 50_000, run_seed(0, 7, 0))
    assert np.mean(y == 0) == pytest.approx(0.2, abs=0.01)


def test_nearly_pure_point_mass_gives_zeros():
    d = TestDensity("z", (Component(1e-12, "gamma", (50.0, 1.0)),), pi0=1.0 - 1e-12)
    assert np.all(sample_counts(sample_lambda(d, 1000, 0), 1) == 0)


def test_zero_intensity_gives_zero_count():
    assert np.all(sample_counts(np.zeros(500), 0) == 0)


def test_poisson_moments():
    y = sample_counts(np.full(200_000, 5.0), 2)
    assert y.mean() == pytest.approx(5.0, abs=0.03)
    assert y.var() == pytest.approx(5.0, rel=0.02)


def test_negative_intensity_rejected():
    with pytest.raises(ConfigurationError):
        sample_counts([1.0, -0.1], 0)


def test_normal_draws_are_nonnegative():
    c = Component(1.0, "normal", (0.5, 2.0))
    x = c.draw(np.random.default_rng(0), 10_000)
    assert np.all(x >= 0)
    mass, _ = integrate.quad(c.pdf, 0, 50)
    assert mass == pytest.approx(1.0, abs=1e-9)


def test_streams_are_independent_of_run_order():
    a = simulate_counts(CASES["3"], 300, run_seed(5, 2, 4))
    b = simulate_counts(CASES["3"], 300, run_seed(5, 2, 4))
    c = simulate_counts(CASES["3"], 300, run_seed(5, 2, 5))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_invalid_densities():
    with pytest.raises(ConfigurationError):
        TestDensity("x", (Component(0.5, "gamma", (1.0, 1.0)),))
    with pytest.raises(ConfigurationError):
        Component(1.0, "beta", (1.0, 1.0))
    with pytest.raises(ConfigurationError):
        Component(1.0, "gamma", (0.0, 1.0))


def test_parse_cases():
    assert parse_cases("all") == list(CASES)
    assert parse_cases("1, 3,7") == ["1", "3", "7"]
    assert parse_cases([2, 5]) == ["2", "5"]
    with pytest.raises(ConfigurationError, match="valid cases"):
        parse_cases("1,10")
    with pytest.raises(ConfigurationError):
        parse_cases("")


def test_delta_metrics():
    g = np.array([0.1, 0.4, 0.2])
    assert delta_g(g, g) == 0.0
    assert delta_g(g, np.zeros(3)) == 1.0
    assert delta_g(5 * g, 5 * g + 5 * np.array([0.1, 0, 0])) == pytest.approx(delta_g(g, g + [0.1, 0, 0]), rel=1e-14)
    assert delta_nu(g, g) == 0.0
    with pytest.raises(DomainError):
        delta_g(np.zeros(3), g)
    with pytest.raises(DomainError):
        delta_nu(g, g[:2])


def test_error_grid_zero_point_rule():
    grid = np.array([0.5, 1.0])
    assert error_grid(grid, 0.5, 0.0, 0.0).tolist() == [0.0, 0.5, 1.0]
    assert error_grid(grid, 0.5, 0.3, 0.0).tolist() == [0.5, 1.0]
    assert error_grid(grid, 0.5, 0.0, 0.1).tolist() == [0.5, 1.0]


def test_representable_truth_has_zero_error():
    d = GammaDictionary.from_params([[40.0, 1.0], [3.0, 0.5]], 0.5 * np.arange(1, 401), 0.5)
    diag = FitDiagnostics(0.0, 0.7, 0.0, 1, "shortcut", True, 0.0, 1)
    est = MixingDensityEstimate(pi0=0.3, theta=np.array([0.7, 0.0]), dictionary=d, diagnostics=diag)
    assert density_error(CASES["7"], est) <= 1e-6


def test_single_run_has_zero_sd():
    rep = run_study("1", 400, 1, seed=2, path_size=8)
    for c in rep.cells():
        assert c.runs == 1 and c.sd_dg == 0.0 and c.sd_dnu == 0.0


def test_study_is_reproducible():
    a = run_study("3", 400, 2, seed=11, path_size=8)
    b = run_study("3", 400, 2, seed=11, path_size=8)
    assert a.summary_csv() == b.summary_csv()
    assert a.runs_csv() == b.runs_csv()
    assert a.densities_csv() == b.densities_csv()
    assert "Average density error" in a.text_table()


def test_study_validation():
    with pytest.raises(ConfigurationError):
        run_study("1", 400, 0)
    with pytest.raises(ConfigurationError):
        run_study("1", 1, 1)
    with pytest.raises(ConfigurationError):
        run_study("1", 400, 1, methods=("cv",))
