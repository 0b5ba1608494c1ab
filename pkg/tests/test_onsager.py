from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mplab.ensembles import SpectrumSpec, spectrum_singular_values
from mplab.errors import InsufficientMomentsError, InvalidParameterError
from mplab.moments import EMPIRICAL_TRACE, MomentSequence, mp_moments
from mplab.onsager import (
    amp_convergence_verdict,
    critical_point,
    default_tolerance,
    g_table,
    g_table_two_index,
    generating_function_check,
    numerator_p,
    onsager_weights,
    series_g,
)


def _polymul(p, q):
    out = [Fraction(0)] * (len(p) + len(q) - 1)
    for i, a in enumerate(p):
        for j, b in enumerate(q):
            out[i + j] += a * b
    return out


def _polyadd(p, q, a=1, b=1):
    n = max(len(p), len(q))
    p = list(p) + [0] * (n - len(p))
    q = list(q) + [0] * (n - len(q))
    return [a * x + b * y for x, y in zip(p, q)]


def coefficient_oracle(mu, delta, T, k):
    """``<lambda^k d m_t / d b_0>`` for AMP's linear map with xi = 1.

    Builds the partial derivatives as explicit polynomials in lambda from the
    memory recursion of AMP's error model, then applies the moment
    functional.  Shares no code with the g-recursions under test.
    """
    d = Fraction(delta)
    carry = [1 + 1 / d, Fraction(-1)]
    coeff = {}
    for t in range(T + 1):
        coeff[(t, t)] = [Fraction(1), Fraction(-1)]
        if t >= 1:
            coeff[(t, t - 1)] = _polyadd([-1 / d], _polymul(carry, coeff[(t - 1, t - 1)]))
        for tp in range(t - 1):
            coeff[(t, tp)] = _polyadd(_polymul(carry, coeff[(t - 1, tp)]),
                                      coeff[(t - 2, tp)], 1, -1 / d)
    poly = coeff[(T, 0)]
    return sum(c * mu[j + k] for j, c in enumerate(poly))


@pytest.mark.parametrize("delta", [Fraction(1, 4), Fraction(1, 2), Fraction(1), Fraction(2)])
def test_mp_rows_vanish_exactly(delta):
    table = g_table(mp_moments(delta, 9, exact=True), 8)
    assert all(row[0] == 0 for row in table.rows)
    assert isinstance(table[3][0], Fraction)


@pytest.mark.parametrize("delta", [Fraction(1, 2), Fraction(3, 2)])
def test_table_matches_polynomial_oracle(delta):
    rng = np.random.default_rng(4)
    mu = [Fraction(1)] + [Fraction(int(v), 7) for v in rng.integers(1, 50, 14)]
    ms = MomentSequence(float(delta), tuple(mu), exact=True)
    table = g_table(ms, 6)
    for tau in range(7):
        for k in range(3):
            assert table[tau][k] == coefficient_oracle(mu, delta, tau, k)


def test_perturbed_second_moment():
    ms = mp_moments(Fraction(1, 2), 4, exact=True)
    eps = Fraction(1, 1000)
    mu = list(ms.mu)
    mu[2] += eps
    table = g_table(MomentSequence(0.5, tuple(mu), exact=True), 3)
    assert table[0][0] == 0
    assert table[1][0] == eps


def test_point_mass_deviates_at_one():
    ms = MomentSequence(1.0, (1, 1, 1, 1, 1), exact=True)
    verdict = amp_convergence_verdict(ms, 3, 1e-12)
    assert not verdict.matched
    assert (verdict.tau, verdict.magnitude) == (1, 1.0)
    assert str(verdict) == "DeviatesAt(1, 1)"


def test_verdict_strings_and_dict():
    v = amp_convergence_verdict(mp_moments(0.5, 7), 6, 1e-12)
    assert v.matched and str(v) == "MPMatchedThrough(6)"
    assert v.to_dict()["verdict"] == "mp_matched_through"
    with pytest.raises(InvalidParameterError):
        amp_convergence_verdict(mp_moments(0.5, 7), 6, 0.0)


def test_needs_t_plus_one_moments():
    with pytest.raises(InsufficientMomentsError):
        g_table(mp_moments(0.5, 3), 3)
    g_table(mp_moments(0.5, 4), 3)


@pytest.mark.parametrize("T", [2, 4, 6])
def test_truncation_soundness(T):
    rng = np.random.default_rng(T)
    mu = (1.0,) + tuple(rng.uniform(0.5, 3.0, 2 * T + 2))
    short = g_table(MomentSequence(1.3, mu[:T + 2]), T)
    long = g_table(MomentSequence(1.3, mu), T)
    for tau in range(T + 1):
        n = len(short[tau])
        assert short[tau] == long[tau][:n]


@pytest.mark.parametrize("delta", [0.5, 2.0])
def test_two_index_is_stationary(delta):
    rng = np.random.default_rng(1)
    mu = (1.0,) + tuple(rng.uniform(0.5, 4.0, 10))
    ms = MomentSequence(delta, mu)
    one = g_table(ms, 6)
    two = g_table_two_index(ms, 6)
    for (tp, tau), row in two.items():
        ref = one[tau - tp]
        n = min(len(row), len(ref))
        np.testing.assert_allclose(row[:n], ref[:n], rtol=1e-12, atol=1e-12)


@given(st.lists(st.floats(0.1, 3.0), min_size=5, max_size=5))
def test_xi_scaling(xi):
    ms = MomentSequence(0.7, (1.0, 1.0, 2.6, 7.9, 25.0, 83.0, 290.0))
    table = g_table(ms, 5).leading()
    two = g_table_two_index(ms, 5, xi)
    a = onsager_weights(xi)
    for (tp, tau), row in two.items():
        assert row[0] == pytest.approx(a[tau] / a[tp] * table[tau - tp],
                                       rel=1e-10, abs=1e-12)


@given(st.lists(st.floats(0.1, 3.0), min_size=4, max_size=4))
def test_verdict_is_xi_free(xi):
    rng = np.random.default_rng(3)
    for ms in (mp_moments(0.5, 5, exact=False),
               MomentSequence(0.5, (1.0,) + tuple(rng.uniform(1, 5, 5)))):
        plain = amp_convergence_verdict(ms, 4, 1e-9).matched
        two = g_table_two_index(ms, 4, xi)
        scaled = max(abs(row[0]) for row in two.values()) <= 1e-9
        assert plain == scaled


def test_empirical_moments_of_sampled_operator():
    spec = SpectrumSpec("mp_sampled", 0.5)
    s = spectrum_singular_values(spec, 4096, 11)
    lam = np.zeros(4096)
    lam[:s.size] = s ** 2
    mu = tuple(float(np.mean(lam ** k)) for k in range(5))
    ms = MomentSequence(0.5, mu, EMPIRICAL_TRACE)
    g0 = g_table(ms, 3).leading()
    assert np.max(np.abs(g0)) <= 0.15
    assert amp_convergence_verdict(ms, 3, default_tolerance(4096)).matched


@pytest.mark.parametrize("delta", [0.5, 2.0])
def test_generating_function_identities(delta):
    hi = min(1.0, delta)
    ys = np.linspace(0, hi, 22)[1:-1]
    res = generating_function_check(delta, ys).max_residuals()
    assert res["eta_residual"] < 1e-12
    assert res["p_residual"] < 1e-10
    assert res["q_residual"] < 1e-10
    assert res["series_error"] < 1e-6


def test_critical_point_root_of_p():
    xs = critical_point(0.5, 0.3)
    assert xs > 0
    assert abs(numerator_p(-xs, 0.3, 0.5)) < 1e-12


def test_series_at_small_y_starts_from_zero_row():
    # G_0(x) = sum_k g[0][k] x^k and g[0][0] = mu_0 - mu_1 = 0 for MP
    row = g_table(mp_moments(Fraction(1, 2), 22, exact=True), 0)[0]
    assert row[0] == 0
    x = 1e-3
    g0 = sum(float(c) * x ** k for k, c in enumerate(row[:21]))
    assert series_g(0.5, x, 1e-9, 20) == pytest.approx(g0, rel=1e-6)


def test_generating_grid_validation():
    with pytest.raises(InvalidParameterError):
        generating_function_check(0.5, [0.6])
