import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, special

import specfun
from common import ConvergenceError, DomainError
from specfun import BetaParams, beta_cdf, beta_pdf, log_beta, log_gamma, specfun_table

GRID_SHAPES = (0.2, 0.5, 0.75, 1.0, 1.5, 3.0, 5.0)
GRID_X = np.array([0.01] + [round(0.05 * i, 2) for i in range(1, 20)] + [0.99])
FD_SHAPES = (0.5, 0.75, 1.0, 1.5, 3.0, 5.0)

shapes = st.floats(min_value=0.2, max_value=5.0)
interior = st.floats(min_value=1e-3, max_value=1 - 1e-3)


@pytest.mark.parametrize(
    "x, expected",
    [(1.0, 0.0), (5.0, np.log(24.0)), (0.5, 0.5 * np.log(np.pi)), (2.0, 0.0), (10.0, np.log(362880.0))],
)
def test_log_gamma_known_values(x, expected):
    assert log_gamma(x) == pytest.approx(expected, abs=1e-12)


def test_log_gamma_matches_gammaln_over_range():
    x = np.logspace(-3, 6, 2000)
    np.testing.assert_allclose(log_gamma(x), special.gammaln(x), rtol=1e-13, atol=1e-12)


def test_log_gamma_returns_float_for_scalars():
    assert isinstance(log_gamma(3.0), float)
    assert isinstance(log_gamma(np.array([1.0, 2.0])), np.ndarray)


@pytest.mark.parametrize("x", [0.0, -1.0, -0.5, np.inf, np.nan])
def test_log_gamma_domain(x):
    with pytest.raises(DomainError):
        log_gamma(x)


@pytest.mark.parametrize(
    "a, b, expected", [(1, 1, 0.0), (2, 3, np.log(1 / 12)), (0.5, 0.5, np.log(np.pi))]
)
def test_log_beta_known_values(a, b, expected):
    assert log_beta(a, b) == pytest.approx(expected, abs=1e-12)


@given(shapes, shapes)
def test_log_beta_symmetric_exactly(a, b):
    assert log_beta(a, b) == log_beta(b, a)


def test_log_beta_rejects_non_positive():
    with pytest.raises(DomainError):
        log_beta(0.0, 1.0)


@pytest.mark.parametrize("value", [0.0, -1.0, np.nan, np.inf])
def test_beta_params_validation(value):
    with pytest.raises(DomainError):
        BetaParams(value, 1.0)
    with pytest.raises(DomainError):
        BetaParams(1.0, value)


def test_beta_pdf_known_values():
    assert beta_pdf(0.3, BetaParams(1, 1)) == pytest.approx(1.0, abs=1e-12)
    assert beta_pdf(0.5, BetaParams(2, 2)) == pytest.approx(1.5, abs=1e-12)
    hand = 0.2**2 * 0.8**0.5 / np.exp(log_beta(3.0, 1.5))
    assert beta_pdf(0.2, BetaParams(3, 1.5)) == pytest.approx(hand, rel=1e-12)


def test_beta_pdf_matches_scipy():
    from scipy import stats

    for a in GRID_SHAPES:
        for b in GRID_SHAPES:
            np.testing.assert_allclose(beta_pdf(GRID_X, BetaParams(a, b)), stats.beta.pdf(GRID_X, a, b), rtol=1e-10)


@pytest.mark.parametrize("x", [0.0, 1.0, -0.1, 1.5, np.nan])
def test_beta_pdf_domain(x):
    with pytest.raises(DomainError):
        beta_pdf(x, BetaParams(2, 2))


def test_beta_cdf_known_values():
    assert beta_cdf(0.5, BetaParams(1, 1)) == pytest.approx(0.5, abs=1e-12)
    assert beta_cdf(0.5, BetaParams(2, 2)) == pytest.approx(0.5, abs=1e-12)
    params = BetaParams(2, 5)
    quadrature, _ = integrate.quad(lambda t: beta_pdf(t, params), 0, 0.3, epsabs=1e-13, epsrel=1e-13)
    assert beta_cdf(0.3, params) == pytest.approx(quadrature, abs=1e-10)


def test_beta_cdf_grid_against_betainc():
    for a in GRID_SHAPES:
        for b in GRID_SHAPES:
            np.testing.assert_allclose(beta_cdf(GRID_X, BetaParams(a, b)), special.betainc(a, b, GRID_X), rtol=0, atol=1e-9)


@pytest.mark.parametrize("a, b", [(1.5, 3.0), (3.0, 1.5), (2.0, 5.0), (5.0, 5.0)])
def test_beta_cdf_against_quadrature(a, b):
    params = BetaParams(a, b)
    for x in (0.05, 0.3, 0.5, 0.8, 0.99):
        quadrature, _ = integrate.quad(lambda t: beta_pdf(t, params), 0, x, epsabs=1e-13, epsrel=1e-13)
        assert beta_cdf(x, params) == pytest.approx(quadrature, abs=1e-9)


def test_beta_cdf_endpoints():
    params = BetaParams(0.5, 3.0)
    assert beta_cdf(0.0, params) == 0.0
    assert beta_cdf(1.0, params) == 1.0


@pytest.mark.parametrize("x", [-0.01, 1.01, np.nan])
def test_beta_cdf_domain(x):
    with pytest.raises(DomainError):
        beta_cdf(x, BetaParams(2, 2))


@given(interior, shapes, shapes)
def test_beta_cdf_complement_symmetry(x, a, b):
    assert abs(beta_cdf(x, BetaParams(a, b)) - (1 - beta_cdf(1 - x, BetaParams(b, a)))) <= 1e-10


@pytest.mark.parametrize("a", FD_SHAPES)
@pytest.mark.parametrize("b", FD_SHAPES)
def test_beta_cdf_derivative_is_pdf(a, b):
    params = BetaParams(a, b)
    step = 1e-6
    x = np.linspace(0.1, 0.9, 17)
    finite_difference = (np.asarray(beta_cdf(x + step, params)) - np.asarray(beta_cdf(x - step, params))) / (2 * step)
    np.testing.assert_allclose(finite_difference, beta_pdf(x, params), rtol=1e-5)


@pytest.mark.parametrize("a", GRID_SHAPES)
@pytest.mark.parametrize("b", GRID_SHAPES)
def test_beta_cdf_monotone(a, b):
    values = np.asarray(beta_cdf(np.linspace(0, 1, 1001), BetaParams(a, b)))
    assert np.all(np.diff(values) >= 0)
    assert np.all((values >= 0) & (values <= 1))


def test_beta_cdf_iteration_cap(monkeypatch):
    monkeypatch.setattr(specfun, "CF_MAX_ITERATIONS", 2)
    with pytest.raises(ConvergenceError):
        beta_cdf(0.4, BetaParams(50.0, 60.0))


def test_specfun_table_layout():
    table = specfun_table()
    assert list(table.columns) == ["x", "a", "b", "pdf", "cdf"]
    assert len(table) == len(GRID_SHAPES) ** 2 * len(GRID_X)
    assert table["cdf"].between(0, 1).all()
