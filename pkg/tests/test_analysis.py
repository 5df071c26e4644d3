import math
from fractions import Fraction

import numpy as np
import pytest
from scipy import optimize, stats

from spear import analysis


def test_success_prob_closed_form():
    assert analysis.success_prob_lower(2) == pytest.approx(0.061, rel=1e-12)
    ref = 5 / 16 * (1 - 0.939**4)
    assert analysis.success_prob_lower(5) == pytest.approx(ref, rel=1e-12)
    with pytest.raises(ValueError):
        analysis.success_prob_lower(1)


@pytest.mark.parametrize("b", [2, 3, 7, 16])
def test_expected_samples_exact_harmonic(b):
    H = sum(Fraction(1, k) for k in range(1, b + 1))
    assert analysis.harmonic(b) == pytest.approx(float(H), rel=1e-15)
    assert analysis.expected_samples(b) == pytest.approx(float(b * H) / analysis.success_prob_lower(b), rel=1e-12)


def test_asymptotic_tracks_exact():
    for b in (10, 20, 40):
        assert analysis.expected_samples_asymptotic(b) == pytest.approx(analysis.expected_samples(b), rel=1e-2)


def test_monte_carlo_exact_q_b2():
    # b=2: one row, exactly one of two entries zero -> 2 * 1/4
    assert analysis.success_prob_monte_carlo(2, trials=40000) == pytest.approx(0.5, abs=0.01)


@pytest.mark.parametrize("b,p,p_fr", [(5, 1e-3, 0.0), (10, 1e-8, 0.0), (12, 1e-6, 1e-9)])
def test_high_prob_samples_root_oracle(b, p, p_fr):
    q = analysis.success_prob_lower(b)
    ps = p - 1 + (1 - p_fr) ** b
    c = b * math.log(2 * b / ps)

    def gap(n):
        return stats.norm.cdf((c - n * q) / math.sqrt(n * q * (1 - q))) - ps / 2

    root = optimize.brentq(gap, c / q, 100 * c / q, xtol=1e-9)
    assert analysis.high_prob_samples(b, p, p_fr) == math.ceil(root)


def test_high_prob_guards():
    with pytest.raises(ValueError):
        analysis.high_prob_samples(4, 1e-3)
    with pytest.raises(ValueError):
        analysis.high_prob_samples(10, 1e-9, p_fr=1e-3)


def direct_miss(b, m, base):
    total = 0.0
    for k in range(m + 1):
        pk = math.comb(m, k) / 2**m
        inner = 1.0 if k < b - 1 else base ** ((b - 1) * math.comb(k, b - 1))
        total += pk * inner
    return total


@pytest.mark.parametrize("b,m", [(2, 10), (3, 12), (4, 30)])
def test_failure_bounds_direct_sum(b, m):
    est = analysis.failure_prob_bounds(b, m, 1e-9)
    fr = 1 - (1 - 1e-9) ** b
    assert est.p_ub == pytest.approx(min(1.0, b * direct_miss(b, m, 0.939) + fr), rel=1e-9)
    assert est.p_approx == pytest.approx(1 - (1 - direct_miss(b, m, 0.5)) ** b + fr, rel=1e-9)
    assert est.p_approx <= est.p_ub


def test_failure_bounds_decrease_with_width():
    assert analysis.monotone_in_m(2, [10, 20, 40, 80, 160]) is None
    assert analysis.monotone_in_m(4, [20, 40, 80, 160]) is None


def test_clopper_pearson_edges():
    assert analysis.clopper_pearson(0, 10)[0] == 0.0
    assert analysis.clopper_pearson(10, 10)[1] == 1.0
    lo, hi = analysis.clopper_pearson(0, 500)
    assert hi == pytest.approx(1 - 0.025 ** (1 / 500), rel=1e-9)


def test_column_recoverable_brute_force():
    dZ = np.array([[0.0, 1.0, 2.0], [0.0, 3.0, 1.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    assert analysis.column_recoverable(dZ, 0)
    # rows 2,3 are zero in columns 1,2 but both equal [1, 0]: rank 1 < 2
    assert not analysis.column_recoverable(dZ, 1)


def test_exact_enumeration_bounded_by_ub():
    # tiny case: every 2^(m b) pattern enumerated
    exact = analysis.exact_failure_prob_small(2, 6, 0.5)
    emp = analysis.validate_failure_empirically(2, 6, 2000, seed=3, p_fr=0.5)
    assert emp.ci_low <= exact <= emp.ci_high
    assert exact <= analysis.failure_prob_bounds(2, 6, 0.5).p_ub
